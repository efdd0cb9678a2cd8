//! The denoiser abstraction shared by the toy backends.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attn::{LayerMaps, Latent, PromptSpec};
use crate::error::{config, IsacError, Result};
use crate::image::{Color, Image};
use crate::toybench::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    SeededAttention,
    SyntheticScene,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::SeededAttention => "seeded-attention",
            BackendKind::SyntheticScene => "synthetic-scene",
        })
    }
}

impl FromStr for BackendKind {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded-attention" => Ok(BackendKind::SeededAttention),
            "synthetic-scene" => Ok(BackendKind::SyntheticScene),
            other => config(format!("unknown backend '{other}'")),
        }
    }
}

/// Resolution and head count of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub height: usize,
    pub width: usize,
    pub heads: usize,
}

/// Per-head attention probabilities recorded by hooks during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionCapture {
    pub self_layers: Vec<LayerMaps>,
    pub cross_layers: Vec<LayerMaps>,
}

/// Gradients with respect to per-head attention logits, indexed `[layer][head]`.
#[derive(Clone, Debug, Default)]
pub struct LogitGrads {
    pub self_logits: Vec<Vec<Array2<f64>>>,
    pub cross_logits: Vec<Vec<Array2<f64>>>,
}

/// Linear β schedule and its cumulative products; index with `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return config(format!("need at least 2 timesteps, got {steps}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn standard(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Coefficient on the predicted noise in the posterior mean.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Posterior-mean multiplier on `X_t` when the predicted noise is zero.
    pub fn scale(&self, t: usize) -> f64 {
        1.0 / self.alpha(t).sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// A noise-predicting denoiser that exposes its attention through hooks.
pub trait Denoiser: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// `(H, W, d)` of the latents it accepts.
    fn grid(&self) -> (usize, usize, usize);

    fn layers(&self) -> &[LayerSpec];

    /// Predicted noise at `(x, t)`. When `hooks` is given the per-head attention
    /// probabilities are recorded there; the returned prediction is the same either way.
    fn forward(
        &self,
        x: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        prompt: &PromptSpec,
        hooks: Option<&mut AttentionCapture>,
    ) -> Result<Latent>;

    /// Pull attention-logit gradients back to the latent.
    fn attention_backward(&self, x: &Latent, prompt: &PromptSpec, grads: &LogitGrads) -> Result<Array2<f64>>;

    /// Restrict injected noise to the backend's stochastic subspace.
    fn shape_noise(&self, z: Array2<f64>) -> Array2<f64> {
        z
    }

    fn decode(&self, x: &Latent) -> Image;

    fn ground_truth(&self, _x: &Latent) -> Result<SceneSpec> {
        Err(IsacError::Unsupported(format!("{} backend has no scene ground truth", self.kind())))
    }

    /// Class colors used by the decoder, when it has any.
    fn palette(&self) -> Option<&[Color]> {
        None
    }

    /// Hash of every fixed weight of the backend.
    fn weight_hash(&self) -> String;
}

pub(crate) fn check_latent(x: &Latent, grid: (usize, usize, usize)) -> Result<()> {
    if (x.height(), x.width(), x.dim()) != grid {
        return config(format!(
            "latent is {}x{}x{}, backend expects {}x{}x{}",
            x.height(),
            x.width(),
            x.dim(),
            grid.0,
            grid.1,
            grid.2
        ));
    }
    Ok(())
}
