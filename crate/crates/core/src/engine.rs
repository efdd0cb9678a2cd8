//! The per-timestep loop: probe attention, build masks and losses, take one
//! gradient step on the latent, then denoise.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn::{Latent, PromptSpec};
use crate::backend::{AttentionCapture, BackendKind, Denoiser, LayerSpec, NoiseSchedule};
use crate::error::{config, IsacError, Result};
use crate::image::Image;
use crate::losses::{loss_gradient, schedule_weights, LossKind, LossReport, ScheduleId, StepContext, StepSettings};
use crate::toybench::{build_scene_denoiser_with, build_seeded_denoiser, SceneConfig, SceneSpec};

/// Prompt text plus the requested classes (in prompt order) and their counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub text: String,
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
}

impl PromptConfig {
    pub fn spec(&self, dim: usize, seed: u64) -> Result<PromptSpec> {
        let classes: Vec<&str> = self.classes.iter().map(String::as_str).collect();
        PromptSpec::from_text(&self.text, &classes, &self.counts, dim, seed)
    }
}

fn default_steps() -> usize {
    50
}
fn default_eta() -> f64 {
    0.01
}
fn default_schedule() -> ScheduleId {
    ScheduleId::E
}
fn default_loss() -> LossKind {
    LossKind::Mpo
}
fn default_backend() -> BackendKind {
    BackendKind::SyntheticScene
}
fn default_side() -> usize {
    16
}
fn default_dim() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Number of denoising steps T.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Learning rate η of the single per-step latent update.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleId,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Seed of the backend weights (independent of the run seed).
    #[serde(default)]
    pub backend_seed: u64,
    /// Seed of the token embeddings.
    #[serde(default)]
    pub embedding_seed: u64,
    /// May be omitted when the prompts come from a benchmark suite.
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Layer plan of the seeded backend; defaults to full and half resolution with two heads each.
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default)]
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(PromptConfig::default())
    }
}

impl RunConfig {
    pub fn new(prompt: PromptConfig) -> Self {
        Self {
            steps: default_steps(),
            eta: default_eta(),
            schedule: default_schedule(),
            loss: default_loss(),
            backend: default_backend(),
            backend_seed: 0,
            embedding_seed: 0,
            prompt,
            height: default_side(),
            width: default_side(),
            dim: default_dim(),
            layers: None,
            scene: SceneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return config(format!("steps must be at least 2, got {}", self.steps));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return config(format!("eta must be finite and nonnegative, got {}", self.eta));
        }
        if self.height < 2 || self.width < 2 || self.dim < 2 {
            return config("grid must be at least 2x2x2");
        }
        if self.prompt.classes.len() != self.prompt.counts.len() {
            return config("prompt needs one count per class");
        }
        Ok(())
    }

    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        self.prompt.spec(self.dim, self.embedding_seed)
    }

    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        self.layers.clone().unwrap_or_else(|| {
            vec![
                LayerSpec { height: self.height, width: self.width, heads: 2 },
                LayerSpec { height: self.height / 2, width: self.width / 2, heads: 2 },
            ]
        })
    }

    pub fn build_backend(&self, prompt: &PromptSpec) -> Result<Box<dyn Denoiser>> {
        let dims = (self.height, self.width, self.dim);
        Ok(match self.backend {
            BackendKind::SeededAttention => Box::new(build_seeded_denoiser(dims, &self.layer_plan(), self.backend_seed)?),
            BackendKind::SyntheticScene => {
                Box::new(build_scene_denoiser_with(prompt, dims, &self.scene, self.backend_seed)?)
            }
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Maps captured at a requested timestep.
#[derive(Clone, Debug)]
pub struct StepDump {
    pub t: usize,
    pub sa: Array2<f64>,
    pub ca: Array2<f64>,
    pub caprop: Array2<f64>,
    pub foreground: Vec<bool>,
    pub masks: Option<Array2<f64>>,
    pub class_masks: Array2<f64>,
}

/// One step's losses and the latent hashes around its update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub report: LossReport,
    pub latent_before: String,
    pub latent_after: String,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub backend: BackendKind,
    pub weight_hash: String,
    pub steps: Vec<StepRecord>,
    pub final_latent: Latent,
    pub image: Image,
    pub ground_truth: Option<SceneSpec>,
    pub dumps: Vec<StepDump>,
}

/// A failed run with the steps completed before the error.
#[derive(Debug)]
pub struct RunFailure {
    pub error: IsacError,
    pub completed: Vec<StepRecord>,
}

impl From<RunFailure> for IsacError {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Timesteps whose attention maps and masks are kept in the record.
    pub dump_timesteps: Vec<usize>,
}

/// Seed of the clustering generator at step `t`, independent of evaluation order.
pub fn step_seed(seed: u64, t: usize) -> u64 {
    let mut z = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One posterior-mean step `X_{t−1} = (X_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t z`,
/// with no noise at `t = 1`.
pub fn posterior_step(x: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule, noise: Option<&Array2<f64>>) -> Result<Latent> {
    let mut mean = (x.values() - &(eps.values() * schedule.eps_coef(t))) * schedule.scale(t);
    if t > 1 {
        if let Some(z) = noise {
            mean.scaled_add(schedule.sigma(t), z);
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(IsacError::Numerical { t, msg: "denoise step produced non-finite latent".into() });
    }
    Ok(x.with_values(mean))
}

/// Denoise `x` by one step, drawing injected noise from `rng` when `t > 1`.
pub fn denoise_step(
    x: &Latent,
    t: usize,
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    prompt: &PromptSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    let eps = backend.forward(x, t, schedule, prompt, None)?;
    let noise = if t > 1 {
        let z = Array2::from_shape_simple_fn(x.values().dim(), || StandardNormal.sample(rng));
        Some(backend.shape_noise(z))
    } else {
        None
    };
    posterior_step(x, &eps, t, schedule, noise.as_ref())
}

/// Probe forward pass at `x` with hooks attached.
pub fn capture_attention(
    x: &Latent,
    t: usize,
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    prompt: &PromptSpec,
) -> Result<AttentionCapture> {
    let mut cap = AttentionCapture::default();
    backend.forward(x, t, schedule, prompt, Some(&mut cap))?;
    Ok(cap)
}

/// `X̃_t = X_t − η ∇L_t(X_t)`; unchanged when η = 0 or the loss vanishes.
pub fn isac_step(x: &Latent, ctx: &StepContext, eta: f64, backend: &dyn Denoiser, prompt: &PromptSpec) -> Result<Latent> {
    if eta == 0.0 || ctx.loss() == 0.0 {
        return Ok(x.clone());
    }
    let g = loss_gradient(x, ctx, backend, prompt)?;
    let next = x.values() - &(g.values() * eta);
    Ok(x.with_values(next))
}

pub fn decode(x: &Latent, backend: &dyn Denoiser) -> Image {
    backend.decode(x)
}

/// Run the full loop for `config` and `seed`.
pub fn run(config: &RunConfig, seed: u64) -> Result<RunRecord> {
    run_with(config, seed, &RunOptions::default()).map_err(IsacError::from)
}

pub fn run_with(config: &RunConfig, seed: u64, options: &RunOptions) -> std::result::Result<RunRecord, RunFailure> {
    let fail = |error: IsacError, completed: &[StepRecord]| RunFailure { error, completed: completed.to_vec() };
    config.validate().map_err(|e| fail(e, &[]))?;
    let prompt = config.prompt_spec().map_err(|e| fail(e, &[]))?;
    let backend = config.build_backend(&prompt).map_err(|e| fail(e, &[]))?;
    run_on(config, seed, options, backend.as_ref(), &prompt)
}

/// The loop on an already built backend.
pub fn run_on(
    config: &RunConfig,
    seed: u64,
    options: &RunOptions,
    backend: &dyn Denoiser,
    prompt: &PromptSpec,
) -> std::result::Result<RunRecord, RunFailure> {
    let mut steps: Vec<StepRecord> = Vec::with_capacity(config.steps);
    let mut dumps = Vec::new();
    macro_rules! tryf {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(RunFailure { error, completed: steps }),
            }
        };
    }
    let total = config.steps;
    let schedule = tryf!(NoiseSchedule::standard(total));
    let (h, w, d) = backend.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Latent::gaussian(h, w, d, &mut rng);
    for t in (1..=total).rev() {
        let weights = tryf!(schedule_weights(config.schedule, t, total));
        let settings = StepSettings { weights, kind: config.loss, cluster_seed: step_seed(seed, t) };
        let cap = tryf!(capture_attention(&x, t, backend, &schedule, prompt));
        let ctx = tryf!(StepContext::build(cap, prompt, (h, w), settings, t, None));
        let x_tilde = tryf!(isac_step(&x, &ctx, config.eta, backend, prompt));
        steps.push(StepRecord {
            report: ctx.report.clone(),
            latent_before: x.content_hash(),
            latent_after: x_tilde.content_hash(),
        });
        if options.dump_timesteps.contains(&t) {
            dumps.push(StepDump {
                t,
                sa: ctx.sa.clone(),
                ca: ctx.ca.clone(),
                caprop: ctx.prop.values.clone(),
                foreground: ctx.selections.foreground.mask.clone(),
                masks: ctx.masks.as_ref().map(|m| m.values.clone()),
                class_masks: ctx.class_masks.clone(),
            });
        }
        x = tryf!(denoise_step(&x_tilde, t, backend, &schedule, prompt, &mut rng));
    }
    let image = decode(&x, backend);
    let ground_truth = backend.ground_truth(&x).ok();
    Ok(RunRecord {
        config: config.clone(),
        seed,
        backend: backend.kind(),
        weight_hash: backend.weight_hash(),
        steps,
        final_latent: x,
        image,
        ground_truth,
        dumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_step_scales_by_inverse_sqrt_alpha() {
        let sched = NoiseSchedule::standard(50).unwrap();
        let x = Latent::new(2, 2, 2, Array2::from_elem((4, 2), 1.5)).unwrap();
        let eps = Latent::zeros(2, 2, 2);
        for t in [1, 25, 50] {
            let y = posterior_step(&x, &eps, t, &sched, None).unwrap();
            let expected = 1.5 / (1.0 - sched.beta(t)).sqrt();
            assert!(y.values().iter().all(|&v| (v - expected).abs() < 1e-15));
        }
        let z = Array2::from_elem((4, 2), 1.0);
        let y = posterior_step(&x, &eps, 1, &sched, Some(&z)).unwrap();
        assert_eq!(y, posterior_step(&x, &eps, 1, &sched, None).unwrap());
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::standard(50).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(50) - 0.02).abs() < 1e-15);
        assert!(NoiseSchedule::standard(1).is_err());
    }

    #[test]
    fn step_seeds_differ_by_timestep() {
        assert_ne!(step_seed(1, 2), step_seed(1, 3));
        assert_eq!(step_seed(7, 9), step_seed(7, 9));
    }
}
