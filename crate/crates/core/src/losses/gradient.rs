//! Forward intermediates of one optimization step and the adjoint pass from
//! the combined loss back to the latent.

use ndarray::Array2;

use super::{combined_loss, overlap_with_grad, LossKind, LossReport, LossWeights};
use crate::attn::{
    accumulate_raw, minmax_backward, minmax_normalize, softmax_rows_backward, Latent, MapKind, MinMax, PixelUpsampler,
    PromptSpec,
};
use crate::backend::{AttentionCapture, Denoiser, LogitGrads};
use crate::error::{IsacError, Result};
use crate::masking::{
    append_coordinates, binarize, class_masks, filter_self_attention, global_foreground, instance_masks,
    propagate_classes, Clusterer, ForegroundSelection, HardInstanceAssignment, InstanceMasks, KMeans,
    PropagatedCrossAttention,
};

#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub kind: LossKind,
    pub cluster_seed: u64,
}

/// The hard (non-differentiable) choices of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct Selections {
    pub binary: Array2<bool>,
    pub foreground: ForegroundSelection,
    pub assignment: Option<HardInstanceAssignment>,
}

/// Every argmax/argmin realized by the forward pass; if these agree between
/// two evaluations, the loss is the same smooth function at both points.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub sa_extremes: (usize, usize),
    pub ca_extremes: (usize, usize),
    pub ins: (Option<(usize, usize)>, Option<usize>),
    pub cls: (Option<(usize, usize)>, Option<usize>),
    pub zero_rows: Vec<bool>,
    /// Per-pixel `a > b` of the maximizing pairs, for losses with kinks at `a = b`.
    pub kinks: Vec<bool>,
}

pub struct StepContext {
    pub t: usize,
    pub grid: (usize, usize),
    pub settings: StepSettings,
    pub capture: AttentionCapture,
    pub sa_extremes: MinMax,
    pub ca_extremes: MinMax,
    /// Normalized accumulated self-attention (`HW × HW`).
    pub sa: Array2<f64>,
    /// Normalized accumulated cross-attention (`HW × L`).
    pub ca: Array2<f64>,
    pub prop: PropagatedCrossAttention,
    pub selections: Selections,
    pub sa_fg: Option<Array2<f64>>,
    pub masks: Option<InstanceMasks>,
    pub class_masks: Array2<f64>,
    pub class_columns: Vec<usize>,
    pub report: LossReport,
}

impl StepContext {
    /// Run the forward pipeline on captured attention. With `frozen`, the
    /// binarization, foreground and clustering are taken from it instead of
    /// being recomputed.
    pub fn build(
        capture: AttentionCapture,
        prompt: &PromptSpec,
        grid: (usize, usize),
        settings: StepSettings,
        t: usize,
        frozen: Option<&Selections>,
    ) -> Result<Self> {
        let sa_raw = accumulate_raw(&capture.self_layers, MapKind::SelfAttention, grid)?;
        let ca_raw = accumulate_raw(&capture.cross_layers, MapKind::CrossAttention, grid)?;
        let sa_extremes = MinMax::of(&sa_raw);
        let ca_extremes = MinMax::of(&ca_raw);
        let sa = minmax_normalize(&sa_raw);
        let ca = minmax_normalize(&ca_raw);
        let prop = propagate_classes(&sa, &ca)?;
        let classes = prompt.class_token_indices();
        let n = prompt.total_instances();

        let selections = match frozen {
            Some(s) => s.clone(),
            None => {
                let binary = binarize(&prop.values);
                let foreground = global_foreground(&binary, classes)?;
                let assignment = if n >= 2 && foreground.len() >= n {
                    let fg = filter_self_attention(&sa, &foreground).expect("nonempty foreground");
                    let points = append_coordinates(&fg, &foreground, grid.0, grid.1);
                    Some(KMeans::default().cluster(&points, n, settings.cluster_seed)?)
                } else {
                    None
                };
                Selections { binary, foreground, assignment }
            }
        };

        let (sa_fg, masks) = match &selections.assignment {
            Some(k) => {
                let fg = filter_self_attention(&sa, &selections.foreground).expect("nonempty foreground");
                let m = instance_masks(&fg, k)?;
                (Some(fg), Some(m))
            }
            None => (None, None),
        };
        let class_masks = class_masks(&prop.values, classes)?;
        let report = combined_loss(masks.as_ref(), &class_masks, settings.weights, settings.kind, t)?;
        Ok(Self {
            t,
            grid,
            settings,
            capture,
            sa_extremes,
            ca_extremes,
            sa,
            ca,
            prop,
            selections,
            sa_fg,
            masks,
            class_masks,
            class_columns: classes.to_vec(),
            report,
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            sa_extremes: (self.sa_extremes.argmin, self.sa_extremes.argmax),
            ca_extremes: (self.ca_extremes.argmin, self.ca_extremes.argmax),
            ins: (self.report.ins.pair, self.report.ins.pixel),
            cls: (self.report.cls.pair, self.report.cls.pixel),
            zero_rows: self.prop.zero_rows.clone(),
            kinks: self.kinks(),
        }
    }

    fn kinks(&self) -> Vec<bool> {
        if !matches!(self.settings.kind, LossKind::Mae | LossKind::Iou) {
            return Vec::new();
        }
        let mut out = Vec::new();
        if let (Some((i, j)), Some(m)) = (self.report.ins.pair, self.masks.as_ref()) {
            out.extend(m.mask(i).iter().zip(m.mask(j).iter()).map(|(a, b)| a > b));
        }
        if let Some((i, j)) = self.report.cls.pair {
            let (a, b) = (self.class_masks.column(i), self.class_masks.column(j));
            out.extend(a.iter().zip(b.iter()).map(|(a, b)| a > b));
        }
        out
    }

    pub fn loss(&self) -> f64 {
        self.report.l_total
    }

    /// Gradient of the total loss with respect to the normalized maps.
    fn map_grads(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let hw = self.sa.nrows();
        let mut d_sa = Array2::<f64>::zeros((hw, hw));
        let mut d_prop = Array2::<f64>::zeros(self.prop.values.dim());
        let w = self.settings.weights;
        let kind = self.settings.kind;

        if let (Some((i, j)), Some(masks), Some(k)) =
            (self.report.ins.pair, self.masks.as_ref(), self.selections.assignment.as_ref())
        {
            if w.lambda_ins != 0.0 {
                let (_, ga, gb) = overlap_with_grad(masks.mask(i), masks.mask(j), kind)?;
                let idx = &self.selections.foreground.indices;
                // M[:, c] = sa_fg · K[:, c] / |c|
                for (a, &pa) in idx.iter().enumerate() {
                    let (gi, gj) = (w.lambda_ins * ga[a], w.lambda_ins * gb[a]);
                    if gi == 0.0 && gj == 0.0 {
                        continue;
                    }
                    let si = gi / k.sizes[i] as f64;
                    let sj = gj / k.sizes[j] as f64;
                    for (b, &pb) in idx.iter().enumerate() {
                        let l = k.labels[b];
                        if l == i {
                            d_sa[(pa, pb)] += si;
                        } else if l == j {
                            d_sa[(pa, pb)] += sj;
                        }
                    }
                }
            }
        }

        if let Some((i, j)) = self.report.cls.pair {
            if w.lambda_cls != 0.0 {
                let (_, ga, gb) = overlap_with_grad(self.class_masks.column(i), self.class_masks.column(j), kind)?;
                let (ci, cj) = (self.class_columns[i], self.class_columns[j]);
                for p in 0..hw {
                    d_prop[(p, ci)] += w.lambda_cls * ga[p];
                    d_prop[(p, cj)] += w.lambda_cls * gb[p];
                }
            }
        }

        let mut d_ca = Array2::<f64>::zeros(self.ca.dim());
        if d_prop.iter().any(|&v| v != 0.0) {
            let rn = &self.prop.row_normalized;
            d_ca += &rn.t().dot(&d_prop);
            let d_rn = d_prop.dot(&self.ca.t());
            for p in 0..hw {
                if self.prop.zero_rows[p] {
                    continue;
                }
                let row = d_rn.row(p);
                let dot: f64 = row.iter().zip(rn.row(p).iter()).map(|(g, r)| g * r).sum();
                let s = self.prop.row_sums[p];
                let mut out = d_sa.row_mut(p);
                for (o, g) in out.iter_mut().zip(row.iter()) {
                    *o += (g - dot) / s;
                }
            }
        }
        Ok((d_sa, d_ca))
    }
}

/// Exact gradient of the step's total loss with respect to the latent, with
/// every hard selection held fixed.
pub fn loss_gradient(latent: &Latent, ctx: &StepContext, backend: &dyn Denoiser, prompt: &PromptSpec) -> Result<Latent> {
    let numerical = |msg: &str| IsacError::Numerical { t: ctx.t, msg: msg.to_string() };
    let (d_sa, d_ca) = ctx.map_grads()?;
    let d_sa_raw = minmax_backward(&ctx.sa, &ctx.sa_extremes, &d_sa);
    let d_ca_raw = minmax_backward(&ctx.ca, &ctx.ca_extremes, &d_ca);

    let heads: usize = ctx.capture.self_layers.iter().map(|l| l.maps.len()).sum();
    let scale = 1.0 / heads as f64;
    let mut grads = LogitGrads::default();
    for (sl, cl) in ctx.capture.self_layers.iter().zip(&ctx.capture.cross_layers) {
        let up = PixelUpsampler::new((sl.height, sl.width), ctx.grid)?;
        let g_self = up.adjoint(&d_sa_raw, MapKind::SelfAttention) * scale;
        let g_cross = up.adjoint(&d_ca_raw, MapKind::CrossAttention) * scale;
        grads.self_logits.push(sl.maps.iter().map(|p| softmax_rows_backward(p, &g_self)).collect());
        grads.cross_logits.push(cl.maps.iter().map(|p| softmax_rows_backward(p, &g_cross)).collect());
    }
    let dx = backend.attention_backward(latent, prompt, &grads)?;
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(numerical("non-finite loss gradient"));
    }
    Ok(latent.with_values(dx))
}
