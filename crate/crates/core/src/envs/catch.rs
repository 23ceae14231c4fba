use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Game, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatchConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for CatchConfig {
    fn default() -> Self {
        Self { width: 10, height: 10 }
    }
}

/// A ball drops one row per step from a random top-row column; the paddle in
/// the bottom row moves left, stays or moves right. The episode ends when the
/// ball reaches the bottom row, paying 1 if the paddle is in the ball's column.
/// Episodes span `height` frames (`height - 1` steps). The final frame draws
/// the ball one row above the paddle so ball and paddle never share a pixel.
#[derive(Clone, Debug)]
pub struct Catch {
    cfg: CatchConfig,
    ball_row: usize,
    ball_col: usize,
    paddle: usize,
}

impl Catch {
    pub fn new(cfg: CatchConfig) -> Result<Self> {
        if cfg.width < 5 || cfg.height < 5 {
            return Err(EnvError::Config(format!("catch grid must be at least 5x5, got {}x{}", cfg.height, cfg.width)));
        }
        let paddle = cfg.width / 2;
        Ok(Self { cfg, ball_row: 0, ball_col: 0, paddle })
    }

    /// Steps per episode.
    pub fn episode_len(&self) -> usize {
        self.cfg.height - 1
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn paddle(&self) -> usize {
        self.paddle
    }

    /// Starts an episode with the ball in a chosen column.
    pub fn reset_to(&mut self, col: usize) {
        self.ball_row = 0;
        self.ball_col = col.min(self.cfg.width - 1);
        self.paddle = self.cfg.width / 2;
    }

    /// Expected return of the uniform random policy, by enumerating every start
    /// column and every action sequence.
    pub fn random_policy_return(cfg: &CatchConfig) -> Result<f64> {
        let game = Catch::new(cfg.clone())?;
        if cfg.height > 13 {
            return Err(EnvError::Config("enumeration is limited to height <= 13".into()));
        }
        fn walk(c: &Catch, p: f64) -> f64 {
            (0..3)
                .map(|a| {
                    let mut next = c.clone();
                    let (r, done) = next.advance(a);
                    if done { p / 3.0 * r } else { walk(&next, p / 3.0) }
                })
                .sum()
        }
        let w = cfg.width;
        Ok((0..w)
            .map(|col| {
                let mut c = game.clone();
                c.reset_to(col);
                walk(&c, 1.0 / w as f64)
            })
            .sum())
    }

    /// Deterministic transition: `(true_reward, terminal)`.
    pub fn advance(&mut self, action: usize) -> (f64, bool) {
        match action {
            0 => self.paddle = self.paddle.saturating_sub(1),
            2 => self.paddle = (self.paddle + 1).min(self.cfg.width - 1),
            _ => {}
        }
        self.ball_row += 1;
        if self.ball_row == self.cfg.height - 1 {
            (if self.paddle == self.ball_col { 1.0 } else { 0.0 }, true)
        } else {
            (0.0, false)
        }
    }
}

impl Game for Catch {
    fn num_actions(&self) -> usize {
        3
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.cfg.height, self.cfg.width)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        let col = rng.random_range(0..self.cfg.width);
        self.reset_to(col);
    }

    fn step(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (f64, bool) {
        self.advance(action)
    }

    fn render(&self, frame: &mut [f64]) {
        frame.fill(0.0);
        let w = self.cfg.width;
        let row = self.ball_row.min(self.cfg.height - 2);
        frame[row * w + self.ball_col] = 1.0;
        frame[(self.cfg.height - 1) * w + self.paddle] = 1.0;
    }
}
