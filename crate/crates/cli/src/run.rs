//! Multi-seed training runs and their on-disk artifacts.
//!
//! ```text
//! <out>/config.toml                      canonical run config
//! <out>/manifest.toml                    every artifact below, plus the config hash
//! <out>/<mode>/seed<k>/metrics.csv       one row per update
//! <out>/<mode>/seed<k>/eval.csv          noise-free evaluation scores
//! <out>/<mode>/seed<k>/final.ckpt        parameters and batch-norm statistics
//! <out>/<mode>/seed<k>/maps/...          feature-map dumps at evaluation points
//! <out>/<mode>/curve.csv                 evaluation curves aggregated over seeds
//! <out>/summary.csv                      comparison, when both modes ran
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use varbranch::envs::{NoiseSpec, STACK};
use varbranch::model::Network;
use varbranch::trainer::{
    evaluate, train_with, Checkpoint, EvalPolicy, EvalResult, EvalRow, EvalSnapshot, MetricEvent, TrainError, TrainMetrics, TrainSetup,
};

use crate::compare::{compare_report, CompareOptions, CompareReport};
use crate::config::{parse_config_str, Mode, RunConfig};
use crate::curves::CurveBundle;
use crate::error::{CliError, Result};
use crate::featmap::{compute_map, write_map, MapKind};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";

pub const METRICS_HEADER: [&str; 9] =
    ["global_step", "worker_id", "episode_return", "episode_length", "policy_loss", "value_nll_loss", "entropy", "mean_nu", "grad_norm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Config,
    Metrics,
    Eval,
    Checkpoint,
    FeatureMap,
    Curve,
    Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub kind: ArtifactKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// The run stopped early; `note` says why.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub artifacts: Vec<Artifact>,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::data(&path, e.message().to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).expect("manifests always serialize");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Checks that the stored config matches the hash, every listed artifact
    /// exists and nothing unlisted sits in the run directory.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
        let cfg = parse_config_str(&text, Some(&cfg_path))?;
        if cfg.hash() != self.config_hash || sha256_hex(&text) != self.config_hash {
            return Err(CliError::Artifact(format!("{} does not match config hash {}", cfg_path.display(), self.config_hash)));
        }
        let listed: BTreeSet<&str> = self.artifacts.iter().map(|a| a.path.as_str()).collect();
        if listed.len() != self.artifacts.len() {
            return Err(CliError::Artifact("manifest lists an artifact twice".into()));
        }
        for a in &self.artifacts {
            if !dir.join(&a.path).is_file() {
                return Err(CliError::Artifact(format!("listed artifact {} is missing", a.path)));
            }
        }
        let mut on_disk = Vec::new();
        files_under(dir, &mut on_disk).map_err(|e| CliError::io(dir, e))?;
        for p in on_disk {
            let rel = relative(dir, &p);
            if rel != MANIFEST_FILE && !listed.contains(rel.as_str()) {
                return Err(CliError::Artifact(format!("{rel} is not listed in the manifest")));
            }
        }
        Ok(())
    }
}

/// What a checkpoint's metadata records about the cell that wrote it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellMeta {
    mode: Mode,
    seed: u64,
    /// Canonical run config text; its hash is the checkpoint's config hash.
    config: String,
}

/// A checkpoint together with the network and setup that match it.
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub config: RunConfig,
    pub mode: Mode,
    pub seed: u64,
    pub setup: TrainSetup,
    pub network: Network,
}

/// Loads a checkpoint written by [`run_experiment`], checking the embedded
/// config against the stored hash and the parameter layout against the network.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let checkpoint = Checkpoint::load(path, None)?;
    let meta: CellMeta = toml::from_str(&checkpoint.meta).map_err(|e| CliError::data(path, format!("checkpoint metadata: {}", e.message())))?;
    if sha256_hex(&meta.config) != checkpoint.config_hash {
        return Err(CliError::Artifact(format!("{}: embedded config does not match hash {}", path.display(), checkpoint.config_hash)));
    }
    let config = parse_config_str(&meta.config, Some(path))?;
    let setup = config.setup(meta.mode, meta.seed)?;
    let (network, store) = Network::new(setup.network.clone(), 0).map_err(TrainError::from)?;
    checkpoint.check_layout(&store, &network.new_bn_stats())?;
    Ok(LoadedCheckpoint { checkpoint, config, mode: meta.mode, seed: meta.seed, setup, network })
}

/// Plays noise-free episodes with a checkpoint's parameters.
pub fn eval_checkpoint(path: &Path, episodes: usize, policy: EvalPolicy, seed: u64) -> Result<EvalResult> {
    let l = load_checkpoint(path)?;
    let ck = &l.checkpoint;
    Ok(evaluate(&l.network, &ck.params, &ck.bn, l.setup.trainer.eval_bn, &l.setup.env, episodes, policy, seed)?)
}

/// First observation of a noise-free episode with `seed`.
pub fn probe_observation(setup: &TrainSetup, seed: u64) -> Result<Vec<f64>> {
    let mut env = setup.env.build(NoiseSpec::default(), seed).map_err(TrainError::from)?;
    Ok(env.reset())
}

/// Writes a feature map of a checkpoint for `obs` (or the probe observation
/// for `obs_seed`) to `<prefix>.pgm` and `<prefix>.csv`, with an overlay on
/// the newest frame when asked.
pub fn export_feature_map(
    checkpoint: &Path,
    obs: Option<Vec<f64>>,
    obs_seed: u64,
    which: MapKind,
    prefix: &Path,
    with_overlay: bool,
) -> Result<Vec<PathBuf>> {
    let l = load_checkpoint(checkpoint)?;
    let n = l.network.config();
    let obs = match obs {
        Some(o) if o.len() == n.obs_len() => o,
        Some(o) => return Err(CliError::config(format!("observation has {} values, the network expects {}", o.len(), n.obs_len()))),
        None => probe_observation(&l.setup, obs_seed)?,
    };
    let map = compute_map(&l.network, &l.checkpoint.params, &l.checkpoint.bn, l.setup.trainer.eval_bn, &obs, which)?;
    let plane = n.height * n.width;
    let frame = with_overlay.then(|| (&obs[(STACK - 1) * plane..], n.height, n.width));
    write_map(prefix, &map, frame)
}

fn write_metrics_csv(path: &Path, metrics: &TrainMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(path, e.to_string()))?;
    let io = |e: csv::Error| CliError::data(path, e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for u in &metrics.updates {
        let (ret, len) = u.episode.map_or((String::new(), String::new()), |e| (e.episode_return.to_string(), e.length.to_string()));
        w.write_record([
            u.global_step.to_string(),
            u.worker_id.to_string(),
            ret,
            len,
            u.policy_loss.to_string(),
            u.value_nll_loss.to_string(),
            u.entropy.to_string(),
            u.mean_nu.to_string(),
            u.grad_norm.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_eval_csv(path: &Path, evals: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(path, e.to_string()))?;
    let io = |e: csv::Error| CliError::data(path, e.to_string());
    w.write_record(["global_step", "mean_return"]).map_err(io)?;
    for e in evals {
        w.write_record([e.global_step.to_string(), e.mean_return.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Artifacts written by one cell so far, kept even when the cell fails.
struct CellLog<'a> {
    root: &'a Path,
    mode: Mode,
    seed: u64,
    artifacts: Vec<Artifact>,
}

impl CellLog<'_> {
    fn add(&mut self, path: &Path, kind: ArtifactKind) {
        self.artifacts.push(Artifact { path: relative(self.root, path), kind, mode: Some(self.mode), seed: Some(self.seed) });
    }
}

fn dump_maps(net: &Network, scored: &EvalSnapshot, setup: &TrainSetup, obs: &[f64], prefix: &Path, log: &mut CellLog<'_>) -> Result<()> {
    let (params, bn) = (&scored.params, &scored.bn);
    let n = net.config();
    let plane = n.height * n.width;
    let mut kinds = vec![MapKind::Value];
    if n.variance_branch {
        kinds.push(MapKind::Variance);
    }
    for which in kinds {
        let map = compute_map(net, params, bn, setup.trainer.eval_bn, obs, which)?;
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(format!("_{}", which.as_str()));
        let frame = (&obs[(STACK - 1) * plane..], n.height, n.width);
        for p in write_map(&prefix.with_file_name(name), &map, Some(frame))? {
            log.add(&p, ArtifactKind::FeatureMap);
        }
    }
    Ok(())
}

fn run_cell(cfg: &RunConfig, hash: &str, mode: Mode, seed: u64, log: &mut CellLog<'_>) -> Result<TrainMetrics> {
    let dir = log.root.join(mode.as_str()).join(format!("seed{seed}"));
    let maps = dir.join("maps");
    create_dir(&dir)?;
    let setup = cfg.setup(mode, seed)?;
    setup.validate()?;
    let every = cfg.report.feature_map_every;
    if every > 0 {
        create_dir(&maps)?;
    }
    let obs = probe_observation(&setup, seed)?;

    let mut evals_seen = 0usize;
    let mut dump_error = None;
    let result = train_with(&setup, |event, global| {
        let MetricEvent::Eval(row) = event else { return };
        let due = every > 0 && evals_seen % every == 0;
        evals_seen += 1;
        if let (true, None, Some(scored)) = (due, &dump_error, &row.snapshot) {
            let prefix = maps.join(format!("step{:09}", row.global_step));
            if let Err(e) = dump_maps(global.network(), scored, &setup, &obs, &prefix, log) {
                dump_error = Some(e);
            }
        }
    });
    let (output, failure) = match result {
        Ok(out) => (Some(out), None),
        Err(TrainError::WorkerFailed { worker, message, partial }) => {
            let metrics_path = dir.join("metrics.csv");
            write_metrics_csv(&metrics_path, &partial)?;
            log.add(&metrics_path, ArtifactKind::Metrics);
            return Err(TrainError::WorkerFailed { worker, message, partial }.into());
        }
        Err(e) => (None, Some(e)),
    };
    if let Some(e) = failure {
        return Err(e.into());
    }
    let output = output.expect("set when training succeeded");
    if let Some(e) = dump_error {
        return Err(e);
    }

    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &output.metrics)?;
    log.add(&metrics_path, ArtifactKind::Metrics);
    let eval_path = dir.join("eval.csv");
    write_eval_csv(&eval_path, &output.metrics.evals)?;
    log.add(&eval_path, ArtifactKind::Eval);

    let meta = toml::to_string(&CellMeta { mode, seed, config: cfg.to_toml() }).expect("cell metadata serializes");
    let ck_path = dir.join("final.ckpt");
    output.global.checkpoint(hash, &meta).save(&ck_path)?;
    log.add(&ck_path, ArtifactKind::Checkpoint);
    Ok(output.metrics)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Train cells concurrently instead of one after another.
    pub parallel: bool,
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub curves: Vec<(Mode, CurveBundle)>,
    pub comparison: Option<CompareReport>,
}

/// Removes the artifacts of an earlier run so a rerun cannot leave stale
/// files behind. Refuses non-empty directories that are not run directories.
fn prepare_dir(dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut existing = Vec::new();
    files_under(dir, &mut existing).map_err(|e| CliError::io(dir, e))?;
    if existing.is_empty() {
        return Ok(());
    }
    let old = Manifest::load(dir).map_err(|_| {
        CliError::config(format!("output directory {} is not empty and holds no {MANIFEST_FILE}; refusing to write into it", dir.display()))
    })?;
    let listed: BTreeSet<String> = old.artifacts.iter().map(|a| a.path.clone()).collect();
    if let Some(stray) = existing.iter().map(|p| relative(dir, p)).find(|r| r != MANIFEST_FILE && !listed.contains(r)) {
        return Err(CliError::config(format!("{} holds {stray}, which its manifest does not list; refusing to overwrite", dir.display())));
    }
    for p in existing {
        std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}

/// Trains every `(mode, seed)` cell of the config and writes its artifacts
/// and a manifest under `cfg.output_dir`. A failure leaves a manifest marked
/// partial that lists what was written before it.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let hash = cfg.hash();
    let mut manifest = Manifest { config_hash: hash.clone(), status: RunStatus::Partial, note: None, artifacts: Vec::new() };

    let result = run_cells(cfg, &hash, &dir, opts, &mut manifest.artifacts);
    match result {
        Ok((curves, comparison)) => {
            manifest.status = RunStatus::Complete;
            manifest.save(&dir)?;
            Ok(RunOutcome { dir, manifest, curves, comparison })
        }
        Err(e) => {
            manifest.note = Some(format!("run aborted: {e}"));
            if let Err(save) = manifest.save(&dir) {
                log::error!("could not write the partial manifest: {save}");
            }
            Err(e)
        }
    }
}

type CellResults = (Vec<(Mode, CurveBundle)>, Option<CompareReport>);

fn run_cells(cfg: &RunConfig, hash: &str, dir: &Path, opts: RunOptions, artifacts: &mut Vec<Artifact>) -> Result<CellResults> {
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;
    artifacts.push(Artifact { path: CONFIG_FILE.into(), kind: ArtifactKind::Config, mode: None, seed: None });

    let modes = cfg.mode.modes();
    let cells: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let run = |&(mode, seed): &(Mode, u64)| {
        log::info!("training {mode} seed {seed}");
        let mut log = CellLog { root: dir, mode, seed, artifacts: Vec::new() };
        let r = run_cell(cfg, hash, mode, seed, &mut log);
        (log.artifacts, r)
    };
    let results: Vec<_> = if opts.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells.iter().map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("cell threads report failures as errors")).collect()
        })
    } else {
        let mut out = Vec::new();
        for c in &cells {
            let (a, r) = run(c);
            let failed = r.is_err();
            out.push((a, r));
            if failed {
                break;
            }
        }
        out
    };

    let mut per_mode: Vec<(Mode, Vec<(String, Vec<(u64, f64)>)>)> = modes.iter().map(|&m| (m, Vec::new())).collect();
    let mut first_error = None;
    for ((mode, seed), (written, r)) in cells.iter().zip(results) {
        artifacts.extend(written);
        match r {
            Ok(metrics) => {
                let series = metrics.evals.iter().map(|e| (e.global_step, e.mean_return)).collect();
                per_mode.iter_mut().find(|(m, _)| m == mode).expect("cell modes come from the list").1.push((format!("seed{seed}"), series));
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let mut curves = Vec::new();
    for (mode, series) in per_mode {
        if series.iter().all(|s| s.1.is_empty()) {
            continue;
        }
        let bundle = CurveBundle::from_series(series).map_err(CliError::config)?;
        let path = dir.join(mode.as_str()).join("curve.csv");
        bundle.write(&path)?;
        artifacts.push(Artifact { path: relative(dir, &path), kind: ArtifactKind::Curve, mode: Some(mode), seed: None });
        curves.push((mode, bundle));
    }
    let comparison = match curves.as_slice() {
        [(ma, a), (mb, b)] => {
            let opts = CompareOptions { threshold: cfg.threshold(), budget: cfg.trainer.total_steps, final_window: cfg.report.final_window };
            let report = compare_report((ma.as_str(), a), (mb.as_str(), b), &opts);
            let path = dir.join("summary.csv");
            std::fs::write(&path, report.to_csv()).map_err(|e| CliError::io(&path, e))?;
            artifacts.push(Artifact { path: "summary.csv".into(), kind: ArtifactKind::Summary, mode: None, seed: None });
            Some(report)
        }
        _ => None,
    };
    Ok((curves, comparison))
}
