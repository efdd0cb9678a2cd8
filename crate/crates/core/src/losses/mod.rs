//! Overlap metrics, the instance/class losses and the time schedule.

mod gradient;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, IsacError, Result};
use crate::masking::InstanceMasks;

pub use gradient::{loss_gradient, Provenance, Selections, StepContext, StepSettings};

/// Pairwise overlap score used inside the instance and class losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "MPO")]
    Mpo,
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "IoU")]
    Iou,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Mpo, LossKind::Mae, LossKind::Kl, LossKind::Iou];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mpo => "MPO",
            LossKind::Mae => "MAE",
            LossKind::Kl => "KL",
            LossKind::Iou => "IoU",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MPO" => Ok(LossKind::Mpo),
            "MAE" => Ok(LossKind::Mae),
            "KL" => Ok(LossKind::Kl),
            "IOU" => Ok(LossKind::Iou),
            other => config(format!("unknown loss kind '{other}'")),
        }
    }
}

/// Time weighting of the instance and class terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScheduleId {
    A,
    B,
    C,
    D,
    E,
}

impl ScheduleId {
    pub const ALL: [ScheduleId; 5] = [ScheduleId::A, ScheduleId::B, ScheduleId::C, ScheduleId::D, ScheduleId::E];
}

impl fmt::Display for ScheduleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScheduleId {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ScheduleId::A),
            "B" | "b" => Ok(ScheduleId::B),
            "C" | "c" => Ok(ScheduleId::C),
            "D" | "d" => Ok(ScheduleId::D),
            "E" | "e" => Ok(ScheduleId::E),
            other => config(format!("unknown schedule '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ins: f64,
    pub lambda_cls: f64,
    pub schedule: ScheduleId,
}

/// Weights at step `t` of `total`, with `t` counting down from `total` to 1.
pub fn schedule_weights(schedule: ScheduleId, t: usize, total: usize) -> Result<LossWeights> {
    if t == 0 || t > total {
        return config(format!("timestep {t} outside 1..={total}"));
    }
    let r = t as f64 / total as f64;
    let lambda_ins = match schedule {
        ScheduleId::A => 1.0,
        ScheduleId::B => 0.0,
        ScheduleId::C => 0.5,
        ScheduleId::D => 1.0 - r,
        ScheduleId::E => r,
    };
    Ok(LossWeights { lambda_ins, lambda_cls: 1.0 - lambda_ins, schedule })
}

fn same_len(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<()> {
    if a.len() != b.len() {
        return contract(format!("mask lengths differ: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// Maximum pixel-wise overlap with the realizing pixel (lowest index on ties).
pub fn mpo_argmax(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, Option<usize>)> {
    same_len(a, b)?;
    let mut best: (f64, Option<usize>) = (f64::NEG_INFINITY, None);
    for (p, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        let v = x * y;
        if v > best.0 {
            best = (v, Some(p));
        }
    }
    if best.1.is_none() {
        best.0 = 0.0;
    }
    Ok(best)
}

pub fn mpo(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    Ok(mpo_argmax(a, b)?.0)
}

const KL_EPS: f64 = 1e-12;

fn kl_normalized(a: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    let s = a.sum();
    if s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return contract("KL overlap needs masks with positive sum");
    }
    Ok((a.mapv(|v| v / s + KL_EPS), s))
}

/// The MAE / KL / IoU substitutes; larger means more overlap.
pub fn alt_overlap(a: ArrayView1<f64>, b: ArrayView1<f64>, kind: LossKind) -> Result<f64> {
    same_len(a, b)?;
    match kind {
        LossKind::Mpo => mpo(a, b),
        LossKind::Mae => {
            if a.is_empty() {
                return Ok(1.0);
            }
            let mae: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            Ok(1.0 - mae)
        }
        LossKind::Kl => {
            let (pa, _) = kl_normalized(a)?;
            let (pb, _) = kl_normalized(b)?;
            let kl: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y) * (x.ln() - y.ln())).sum();
            Ok((-kl).exp())
        }
        LossKind::Iou => {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (x, y) in a.iter().zip(b.iter()) {
                lo += x.min(*y);
                hi += x.max(*y);
            }
            Ok(if hi > 0.0 { lo / hi } else { 0.0 })
        }
    }
}

/// Overlap value and its gradient with respect to both masks.
pub fn overlap_with_grad(a: ArrayView1<f64>, b: ArrayView1<f64>, kind: LossKind) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    same_len(a, b)?;
    let n = a.len();
    let mut ga = Array1::zeros(n);
    let mut gb = Array1::zeros(n);
    let value = match kind {
        LossKind::Mpo => {
            let (v, p) = mpo_argmax(a, b)?;
            if let Some(p) = p {
                ga[p] = b[p];
                gb[p] = a[p];
            }
            v
        }
        LossKind::Mae => {
            if n == 0 {
                return Ok((1.0, ga, gb));
            }
            let mut mae = 0.0;
            for p in 0..n {
                let d = a[p] - b[p];
                mae += d.abs();
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                ga[p] = -s / n as f64;
                gb[p] = s / n as f64;
            }
            1.0 - mae / n as f64
        }
        LossKind::Kl => {
            let (pa, sa) = kl_normalized(a)?;
            let (pb, sb) = kl_normalized(b)?;
            let kl: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y) * (x.ln() - y.ln())).sum();
            let v = (-kl).exp();
            // d KL / d pa, d KL / d pb, then through the sum normalization.
            let dpa: Array1<f64> = Array1::from_shape_fn(n, |p| (pa[p].ln() - pb[p].ln()) + (pa[p] - pb[p]) / pa[p]);
            let dpb: Array1<f64> = Array1::from_shape_fn(n, |p| (pb[p].ln() - pa[p].ln()) + (pb[p] - pa[p]) / pb[p]);
            let back = |dp: &Array1<f64>, raw: ArrayView1<f64>, s: f64| {
                let dot: f64 = dp.iter().zip(raw.iter()).map(|(g, x)| g * x).sum::<f64>() / s;
                dp.mapv(|g| -v * (g - dot) / s)
            };
            ga = back(&dpa, a, sa);
            gb = back(&dpb, b, sb);
            v
        }
        LossKind::Iou => {
            let (mut lo, mut hi) = (0.0, 0.0);
            for p in 0..n {
                lo += a[p].min(b[p]);
                hi += a[p].max(b[p]);
            }
            if hi <= 0.0 {
                return Ok((0.0, ga, gb));
            }
            for p in 0..n {
                // Ties: the minimum is credited to `a`, the maximum to `b`.
                let a_is_min = a[p] <= b[p];
                let (dlo_a, dhi_a) = if a_is_min { (1.0, 0.0) } else { (0.0, 1.0) };
                ga[p] = (dlo_a * hi - lo * dhi_a) / (hi * hi);
                gb[p] = ((1.0 - dlo_a) * hi - lo * (1.0 - dhi_a)) / (hi * hi);
            }
            lo / hi
        }
    };
    Ok((value, ga, gb))
}

/// The maximum pairwise overlap over columns `i < j`, with the realizing pair
/// and (for MPO) pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairMax {
    pub value: f64,
    pub pair: Option<(usize, usize)>,
    pub pixel: Option<usize>,
}

impl PairMax {
    pub const EMPTY: PairMax = PairMax { value: 0.0, pair: None, pixel: None };
}

/// Max over column pairs; KL pairs involving a zero-sum mask are skipped.
pub fn max_pair_overlap(columns: &Array2<f64>, kind: LossKind) -> Result<PairMax> {
    let n = columns.ncols();
    let mut best = PairMax { value: f64::NEG_INFINITY, pair: None, pixel: None };
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (columns.column(i), columns.column(j));
            let (v, pixel) = match kind {
                LossKind::Mpo => mpo_argmax(a, b)?,
                LossKind::Kl if a.sum() <= 0.0 || b.sum() <= 0.0 => continue,
                _ => (alt_overlap(a, b, kind)?, None),
            };
            if v > best.value {
                best = PairMax { value: v, pair: Some((i, j)), pixel };
            }
        }
    }
    if best.pair.is_none() {
        return Ok(PairMax::EMPTY);
    }
    Ok(best)
}

/// Maximum MPO over instance pairs; zero with fewer than two masks.
pub fn instance_loss(masks: &InstanceMasks) -> f64 {
    max_pair_overlap(&masks.values, LossKind::Mpo).map(|m| m.value).unwrap_or(0.0)
}

/// Maximum MPO over class-mask pairs; zero with a single class.
pub fn class_loss(class_masks: &Array2<f64>) -> f64 {
    max_pair_overlap(class_masks, LossKind::Mpo).map(|m| m.value).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub t: usize,
    pub weights: LossWeights,
    pub l_ins: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub ins: PairMax,
    pub cls: PairMax,
}

/// Weighted sum of the instance and class terms. `masks = None` means the
/// instance term was skipped for this step.
pub fn combined_loss(
    masks: Option<&InstanceMasks>,
    class_masks: &Array2<f64>,
    weights: LossWeights,
    kind: LossKind,
    t: usize,
) -> Result<LossReport> {
    let ins = match masks {
        Some(m) => max_pair_overlap(&m.values, kind)?,
        None => PairMax::EMPTY,
    };
    let cls = max_pair_overlap(class_masks, kind)?;
    Ok(LossReport {
        t,
        weights,
        l_ins: ins.value,
        l_cls: cls.value,
        l_total: weights.lambda_ins * ins.value + weights.lambda_cls * cls.value,
        ins,
        cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn mpo_examples() {
        assert_eq!(mpo(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        let peak = array![0.9, 0.3];
        assert_abs_diff_eq!(mpo(peak.view(), peak.view()).unwrap(), 0.81, epsilon = 1e-15);
        assert_abs_diff_eq!(mpo(array![0.5, 0.2].view(), array![0.4, 0.9].view()).unwrap(), 0.2, epsilon = 1e-15);
        assert!(mpo(array![0.5].view(), array![0.4, 0.9].view()).is_err());
    }

    #[test]
    fn instance_and_class_loss_examples() {
        let single = InstanceMasks { values: array![[0.3], [0.9]] };
        assert_eq!(instance_loss(&single), 0.0);
        // Pairwise MPOs 0.1, 0.3, 0.2.
        let m = InstanceMasks { values: array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 1.0]] };
        assert_abs_diff_eq!(instance_loss(&m), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(class_loss(&array![[0.6, 0.5], [0.1, 0.8]]), 0.3, epsilon = 1e-15);
        assert_eq!(class_loss(&array![[1.0, 0.0], [0.0, 1.0]]), 0.0);
        assert_eq!(class_loss(&array![[0.4], [0.2]]), 0.0);
    }

    #[test]
    fn alt_overlap_examples() {
        let a = array![0.3, 0.7];
        assert_abs_diff_eq!(alt_overlap(a.view(), a.view(), LossKind::Iou).unwrap(), 1.0);
        assert_eq!(alt_overlap(array![1.0, 0.0].view(), array![0.0, 1.0].view(), LossKind::Iou).unwrap(), 0.0);
        let h = array![0.5, 0.5];
        assert_eq!(alt_overlap(h.view(), h.view(), LossKind::Mae).unwrap(), 1.0);
        assert_abs_diff_eq!(alt_overlap(a.view(), a.view(), LossKind::Kl).unwrap(), 1.0, epsilon = 1e-12);
        assert!(alt_overlap(array![0.0, 0.0].view(), a.view(), LossKind::Kl).is_err());
        assert_eq!(alt_overlap(array![0.0, 0.0].view(), array![0.0, 0.0].view(), LossKind::Iou).unwrap(), 0.0);
    }

    #[test]
    fn schedule_examples() {
        let e = schedule_weights(ScheduleId::E, 50, 50).unwrap();
        assert_eq!((e.lambda_ins, e.lambda_cls), (1.0, 0.0));
        let c = schedule_weights(ScheduleId::C, 17, 50).unwrap();
        assert_eq!((c.lambda_ins, c.lambda_cls), (0.5, 0.5));
        let d = schedule_weights(ScheduleId::D, 50, 50).unwrap();
        assert_eq!((d.lambda_ins, d.lambda_cls), (0.0, 1.0));
        assert!(schedule_weights(ScheduleId::A, 0, 50).is_err());
        assert!("F".parse::<ScheduleId>().is_err());
    }

    #[test]
    fn combined_examples() {
        let m = InstanceMasks { values: array![[0.6, 0.5], [0.1, 0.8]] };
        let cls = array![[0.5, 0.2], [0.1, 0.5]];
        let w = |a: f64| LossWeights { lambda_ins: a, lambda_cls: 1.0 - a, schedule: ScheduleId::C };
        let r = combined_loss(Some(&m), &cls, w(1.0), LossKind::Mpo, 3).unwrap();
        assert_eq!(r.l_total, r.l_ins);
        let r = combined_loss(Some(&m), &cls, w(0.0), LossKind::Mpo, 3).unwrap();
        assert_eq!(r.l_total, r.l_cls);
        let r = combined_loss(Some(&m), &cls, w(0.5), LossKind::Mpo, 3).unwrap();
        assert_abs_diff_eq!(r.l_total, 0.5 * (0.3 + 0.1), epsilon = 1e-15);
        assert_eq!(r.ins.pair, Some((0, 1)));
        assert_eq!(r.ins.pixel, Some(0));
    }

    #[test]
    fn overlap_gradients_match_finite_differences() {
        let a = array![0.2, 0.7, 0.4, 0.9];
        let b = array![0.5, 0.1, 0.45, 0.3];
        let h = 1e-6;
        for kind in LossKind::ALL {
            let (_, ga, gb) = overlap_with_grad(a.view(), b.view(), kind).unwrap();
            for p in 0..a.len() {
                for (which, g) in [(0, &ga), (1, &gb)] {
                    let bump = |d: f64| {
                        let (mut x, mut y) = (a.clone(), b.clone());
                        if which == 0 {
                            x[p] += d
                        } else {
                            y[p] += d
                        }
                        alt_overlap(x.view(), y.view(), kind).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert_abs_diff_eq!(g[p], fd, epsilon = 1e-6);
                }
            }
        }
    }
}
