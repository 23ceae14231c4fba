//! Feature-map export as 8-bit binary graymaps plus raw-value CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varbranch::model::{BnStats, Network};
use varbranch::nn::{BnMode, ParamStore};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Value,
    Variance,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Value => "value",
            MapKind::Variance => "variance",
        }
    }
}

impl std::str::FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "value" => Ok(Self::Value),
            "variance" => Ok(Self::Variance),
            other => Err(format!("unknown map `{other}`; expected value or variance")),
        }
    }
}

/// A single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "map extent");
        Self { height, width, values }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Computes the value or variance map for one observation `[frames, h, w]`.
/// Batch-norm statistics are copied, so `bn` is not modified.
pub fn compute_map(net: &Network, params: &ParamStore, bn: &BnStats, mode: BnMode, obs: &[f64], which: MapKind) -> Result<FeatureMap> {
    let mut stats = bn.clone();
    let out = net.infer(params, obs, &net.zero_lstm(), mode, &mut stats).map_err(varbranch::trainer::TrainError::from)?;
    let map = match which {
        MapKind::Value => out.value_map,
        MapKind::Variance => out.variance_map.ok_or_else(|| CliError::config("this network has no variance branch"))?,
    };
    let &[_, _, h, w] = map.shape() else {
        return Err(CliError::Artifact(format!("unexpected map shape {:?}", map.shape())));
    };
    Ok(FeatureMap::new(h, w, map.into_data()))
}

/// Min-max scales to 0..=255. A constant map becomes uniform 128.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary portable graymap with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Inverse of [`encode_pgm`] for files it wrote.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + w * h {
        return None;
    }
    Some((w, h, bytes[pos + 1..].to_vec()))
}

/// One CSV row per map row. Values use the shortest text that parses back to the same f64.
pub fn map_to_csv(map: &FeatureMap) -> String {
    let mut out = String::new();
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn map_from_csv(text: &str) -> Result<FeatureMap, String> {
    let mut values = Vec::new();
    let (mut height, mut width) = (0, None);
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row: Vec<f64> = line.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| format!("`{c}`: {e}"))).collect::<Result<_, _>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(format!("row {} has {} values, expected {}", height + 1, row.len(), width.unwrap_or(0)));
        }
        values.extend(row);
        height += 1;
    }
    Ok(FeatureMap::new(height, width.unwrap_or(0), values))
}

/// Upsamples the normalized map to the frame size by nearest neighbour and
/// blends it half and half with `frame` (values in `[0, 1]`).
pub fn overlay(map: &FeatureMap, frame: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(frame.len(), height * width, "frame extent");
    let heat = normalize(&map.values);
    let mut out = Vec::with_capacity(frame.len());
    for r in 0..height {
        let mr = r * map.height / height;
        for c in 0..width {
            let mc = c * map.width / width;
            let h = heat[mr * map.width + mc] as f64;
            let base = frame[r * width + c].clamp(0.0, 1.0) * 255.0;
            out.push((0.5 * h + 0.5 * base).round() as u8);
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `<prefix>.pgm` and `<prefix>.csv`, plus `<prefix>_overlay.pgm` when
/// `frame` (the newest observation frame, `[h, w]`) is given. Returns the paths written.
pub fn write_map(prefix: &Path, map: &FeatureMap, frame: Option<(&[f64], usize, usize)>) -> Result<Vec<PathBuf>> {
    let with = |suffix: &str| {
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    let mut written = Vec::new();
    let pgm = with(".pgm");
    write_file(&pgm, &encode_pgm(map.width, map.height, &normalize(&map.values)))?;
    written.push(pgm);
    let csv = with(".csv");
    write_file(&csv, map_to_csv(map).as_bytes())?;
    written.push(csv);
    if let Some((frame, h, w)) = frame {
        let path = with("_overlay.pgm");
        write_file(&path, &encode_pgm(w, h, &overlay(map, frame, h, w)))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(normalize(&[0.3; 6]), vec![128; 6]);
        assert_eq!(normalize(&[]), Vec::<u8>::new());
    }

    #[test]
    fn extremes_map_to_black_and_white() {
        assert_eq!(normalize(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_round_trip() {
        let px = vec![0, 1, 2, 250, 255, 7];
        let bytes = encode_pgm(3, 2, &px);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes), Some((3, 2, px)));
    }

    #[test]
    fn overlay_blends_half_and_half() {
        let map = FeatureMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let frame = vec![1.0; 16];
        let px = overlay(&map, &frame, 4, 4);
        assert_eq!(px[0], 128); // 0.5 * 0 + 0.5 * 255
        assert_eq!(px[2], 255);
        assert_eq!(px[5], 128); // (1, 1) falls in map cell (0, 0)
        assert_eq!(px[15], 128);
    }
}
