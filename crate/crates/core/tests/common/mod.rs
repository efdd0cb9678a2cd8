//! Finite-difference oracle shared by the gradient tests.

use isac_core::attn::{Latent, PromptSpec};
use isac_core::backend::{Denoiser, NoiseSchedule};
use isac_core::engine::capture_attention;
use isac_core::losses::{loss_gradient, schedule_weights, LossKind, ScheduleId, StepContext, StepSettings};
use ndarray::Array2;

pub struct Check {
    pub rel_err: f64,
    pub skipped: usize,
    pub norm: f64,
}

/// Central differences with step `h`, with the selections of the base point
/// frozen; coordinates whose stencil changes any argmax are skipped.
pub fn fd_check(
    backend: &dyn Denoiser,
    prompt: &PromptSpec,
    x: &Latent,
    t: usize,
    settings: StepSettings,
    step: f64,
) -> Check {
    let schedule = NoiseSchedule::standard(50).unwrap();
    let (h, w, _) = backend.grid();
    let ctx_at = |x: &Latent, frozen| {
        let cap = capture_attention(x, t, backend, &schedule, prompt).unwrap();
        StepContext::build(cap, prompt, (h, w), settings, t, frozen).unwrap()
    };
    let base = ctx_at(x, None);
    let g = loss_gradient(x, &base, backend, prompt).unwrap();
    let prov = base.provenance();
    let mut fd = Array2::<f64>::zeros(x.values().dim());
    let mut keep = Array2::<f64>::zeros(x.values().dim());
    let mut skipped = 0;
    for idx in ndarray::indices(x.values().dim()) {
        let mut plus = x.values().clone();
        plus[idx] += step;
        let mut minus = x.values().clone();
        minus[idx] -= step;
        let cp = ctx_at(&x.with_values(plus), Some(&base.selections));
        let cm = ctx_at(&x.with_values(minus), Some(&base.selections));
        if cp.provenance() != prov || cm.provenance() != prov {
            skipped += 1;
            continue;
        }
        keep[idx] = 1.0;
        fd[idx] = (cp.loss() - cm.loss()) / (2.0 * step);
    }
    let ga = g.values() * &keep;
    let diff = (&ga - &fd).mapv(|v| v * v).sum().sqrt();
    let norm = ga.mapv(|v| v * v).sum().sqrt().max(fd.mapv(|v| v * v).sum().sqrt());
    Check { rel_err: if norm > 0.0 { diff / norm } else { 0.0 }, skipped, norm }
}

pub fn settings(schedule: ScheduleId, kind: LossKind, t: usize) -> StepSettings {
    StepSettings { weights: schedule_weights(schedule, t, 50).unwrap(), kind, cluster_seed: 7 }
}
