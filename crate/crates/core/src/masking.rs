//! Class propagation, foreground selection and instance clustering.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Result};

/// `row_normalize(sa) · ca`, plus the row normalization it used.
#[derive(Clone, Debug)]
pub struct PropagatedCrossAttention {
    pub values: Array2<f64>,
    /// Row-normalized self-attention; all-zero rows replaced by uniform rows.
    pub row_normalized: Array2<f64>,
    pub row_sums: Vec<f64>,
    pub zero_rows: Vec<bool>,
}

pub fn propagate_classes(sa: &Array2<f64>, ca: &Array2<f64>) -> Result<PropagatedCrossAttention> {
    let n = sa.nrows();
    if sa.ncols() != n || ca.nrows() != n {
        return config(format!("propagation shapes disagree: sa {:?}, ca {:?}", sa.dim(), ca.dim()));
    }
    let mut rn = sa.clone();
    let mut row_sums = Vec::with_capacity(n);
    let mut zero_rows = Vec::with_capacity(n);
    for mut row in rn.rows_mut() {
        let s: f64 = row.sum();
        row_sums.push(s);
        if s > 0.0 {
            zero_rows.push(false);
            row.mapv_inplace(|v| v / s);
        } else {
            zero_rows.push(true);
            row.fill(1.0 / n as f64);
        }
    }
    let values = rn.dot(ca);
    Ok(PropagatedCrossAttention { values, row_normalized: rn, row_sums, zero_rows })
}

/// `out[i,j] = ca_prop[i,j] > mean(column j)`.
pub fn binarize(ca_prop: &Array2<f64>) -> Array2<bool> {
    let n = ca_prop.nrows().max(1) as f64;
    let means: Vec<f64> = ca_prop.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
    Array2::from_shape_fn(ca_prop.dim(), |(i, j)| ca_prop[(i, j)] > means[j])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundSelection {
    pub mask: Vec<bool>,
    /// Ascending pixel indices where the mask is set.
    pub indices: Vec<usize>,
}

impl ForegroundSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn global_foreground(ca_bin: &Array2<bool>, class_token_indices: &[usize]) -> Result<ForegroundSelection> {
    if class_token_indices.is_empty() {
        return config("no class tokens for the foreground mask");
    }
    if let Some(&c) = class_token_indices.iter().find(|&&c| c >= ca_bin.ncols()) {
        return config(format!("class token index {c} out of range"));
    }
    let mask: Vec<bool> = (0..ca_bin.nrows())
        .map(|p| class_token_indices.iter().any(|&c| ca_bin[(p, c)]))
        .collect();
    let indices = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    Ok(ForegroundSelection { mask, indices })
}

/// Gather `sa` at foreground rows and columns; `None` when the foreground is empty.
pub fn filter_self_attention(sa: &Array2<f64>, sel: &ForegroundSelection) -> Option<Array2<f64>> {
    if sel.is_empty() {
        return None;
    }
    let idx = &sel.indices;
    Some(Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| sa[(idx[i], idx[j])]))
}

/// Append normalized `(x, y)` pixel coordinates as two extra columns.
pub fn append_coordinates(sa_fg: &Array2<f64>, sel: &ForegroundSelection, height: usize, width: usize) -> Array2<f64> {
    let f = sa_fg.nrows();
    let mut out = Array2::zeros((f, sa_fg.ncols() + 2));
    out.slice_mut(ndarray::s![.., ..sa_fg.ncols()]).assign(sa_fg);
    let xc = sa_fg.ncols();
    for (i, &p) in sel.indices.iter().enumerate() {
        let (r, c) = (p / width, p % width);
        out[(i, xc)] = if width > 1 { c as f64 / (width - 1) as f64 } else { 0.0 };
        out[(i, xc + 1)] = if height > 1 { r as f64 / (height - 1) as f64 } else { 0.0 };
    }
    out
}

/// One-hot assignment of points to clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardInstanceAssignment {
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl HardInstanceAssignment {
    pub fn from_labels(labels: Vec<usize>, n: usize) -> Self {
        let mut sizes = vec![0; n];
        for &l in &labels {
            sizes[l] += 1;
        }
        Self { labels, sizes }
    }

    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut k = Array2::zeros((self.labels.len(), self.sizes.len()));
        for (i, &l) in self.labels.iter().enumerate() {
            k[(i, l)] = 1.0;
        }
        k
    }
}

/// Extension point for alternative clustering algorithms.
pub trait Clusterer: Send + Sync {
    fn cluster(&self, points: &Array2<f64>, n: usize, seed: u64) -> Result<HardInstanceAssignment>;
}

/// Lloyd's algorithm with k-means++ seeding.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeans {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6 }
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point, ties to the lowest index, with its distance.
fn assign(points: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, cent) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn means(points: &Array2<f64>, labels: &[usize], n: usize, dist: &[f64]) -> Array2<f64> {
    let mut sums = Array2::zeros((n, points.ncols()));
    let mut counts = vec![0usize; n];
    for (p, &l) in points.rows().into_iter().zip(labels) {
        sums.row_mut(l).scaled_add(1.0, &p);
        counts[l] += 1;
    }
    let mut taken: Vec<usize> = Vec::new();
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / count as f64);
        } else {
            // Reseed an empty cluster at the point farthest from its centroid.
            let far = (0..dist.len())
                .filter(|i| !taken.contains(i))
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .unwrap_or(0);
            taken.push(far);
            sums.row_mut(c).assign(&points.row(far));
        }
    }
    sums
}

impl Clusterer for KMeans {
    fn cluster(&self, points: &Array2<f64>, n: usize, seed: u64) -> Result<HardInstanceAssignment> {
        let f = points.nrows();
        if n == 0 {
            return contract("cannot form zero clusters");
        }
        if f < n {
            return contract(format!("{f} points cannot fill {n} clusters"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = Array2::zeros((n, points.ncols()));
        centroids.row_mut(0).assign(&points.row(rng.random_range(0..f)));
        let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
        for c in 1..n {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut idx = f - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if d > 0.0 && target < d {
                        idx = i;
                        break;
                    }
                    target -= d;
                }
                idx
            } else {
                rng.random_range(0..f)
            };
            centroids.row_mut(c).assign(&points.row(pick));
            for (i, p) in points.rows().into_iter().enumerate() {
                d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
            }
        }
        let (mut labels, mut dist) = assign(points, &centroids);
        for _ in 0..self.max_iter {
            let next = means(points, &labels, n, &dist);
            let shift = next
                .iter()
                .zip(centroids.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            centroids = next;
            (labels, dist) = assign(points, &centroids);
            if shift < self.tol {
                break;
            }
        }
        fill_empty(&mut labels, &dist, n);
        Ok(HardInstanceAssignment::from_labels(labels, n))
    }
}

/// Guarantee nonempty clusters when there are enough points (duplicates can
/// otherwise leave a centroid without members).
fn fill_empty(labels: &mut [usize], dist: &[f64], n: usize) {
    loop {
        let mut sizes = vec![0usize; n];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        match donor {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

pub fn kmeans_cluster(points: &Array2<f64>, n: usize, seed: u64) -> Result<HardInstanceAssignment> {
    KMeans::default().cluster(points, n, seed)
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn sse(points: &Array2<f64>, labels: &[usize], n: usize) -> f64 {
    let mut sums = Array2::<f64>::zeros((n, points.ncols()));
    let mut counts = vec![0usize; n];
    for (p, &l) in points.rows().into_iter().zip(labels) {
        sums.row_mut(l).scaled_add(1.0, &p);
        counts[l] += 1;
    }
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &l)| {
            let c = sums.row(l).mapv(|v| v / counts[l] as f64);
            sq_dist(p, c.view())
        })
        .sum()
}

/// Soft instance masks: column `i` is the mean of the filtered self-attention
/// columns belonging to cluster `i` (`F × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMasks {
    pub values: Array2<f64>,
}

impl InstanceMasks {
    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    pub fn mask(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(i)
    }
}

pub fn instance_masks(sa_fg: &Array2<f64>, k: &HardInstanceAssignment) -> Result<InstanceMasks> {
    if sa_fg.ncols() != k.labels.len() {
        return config(format!("{} assignments for {} foreground pixels", k.labels.len(), sa_fg.ncols()));
    }
    let mut values = sa_fg.dot(&k.one_hot());
    for (i, mut col) in values.columns_mut().into_iter().enumerate() {
        if k.sizes[i] > 0 {
            col.mapv_inplace(|v| v / k.sizes[i] as f64);
        }
    }
    Ok(InstanceMasks { values })
}

/// Columns of the propagated cross-attention for the class tokens, in class order.
pub fn class_masks(ca_prop: &Array2<f64>, class_token_indices: &[usize]) -> Result<Array2<f64>> {
    if let Some(&c) = class_token_indices.iter().find(|&&c| c >= ca_prop.ncols()) {
        return config(format!("class token index {c} out of range"));
    }
    Ok(ca_prop.select(Axis(1), class_token_indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn propagation_examples() {
        let sa = array![[1.0, 1.0], [0.0, 1.0]];
        let ca = array![[1.0, 0.0], [0.0, 1.0]];
        let p = propagate_classes(&sa, &ca).unwrap();
        assert_eq!(p.values, array![[0.5, 0.5], [0.0, 1.0]]);
        let eye = Array2::eye(3);
        let ca3 = array![[0.1, 0.9], [0.3, 0.2], [1.0, 0.0]];
        assert_eq!(propagate_classes(&eye, &ca3).unwrap().values, ca3);
        let zero = Array2::zeros((3, 3));
        let p = propagate_classes(&zero, &ca3).unwrap();
        assert!(p.zero_rows.iter().all(|&z| z));
        assert_abs_diff_eq!(p.values[(0, 0)], (0.1 + 0.3 + 1.0) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn binarize_examples() {
        let b = binarize(&array![[0.2], [0.4], [0.6]]);
        assert_eq!(b.column(0).to_vec(), vec![false, false, true]);
        assert!(binarize(&array![[0.5], [0.5]]).iter().all(|&v| !v));
    }

    #[test]
    fn foreground_union() {
        let bin = array![[true, true], [false, true], [true, false]];
        let sel = global_foreground(&bin, &[0, 1]).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
        let none = Array2::from_elem((3, 2), false);
        assert!(global_foreground(&none, &[0, 1]).unwrap().is_empty());
    }

    #[test]
    fn filter_gathers_corners() {
        let sa = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let sel = ForegroundSelection { mask: vec![true, false, true], indices: vec![0, 2] };
        assert_eq!(filter_self_attention(&sa, &sel).unwrap(), array![[0.0, 2.0], [6.0, 8.0]]);
        let empty = ForegroundSelection { mask: vec![false; 3], indices: vec![] };
        assert!(filter_self_attention(&sa, &empty).is_none());
    }

    #[test]
    fn coordinates_on_small_grids() {
        let sel = ForegroundSelection { mask: vec![true; 4], indices: vec![0, 1, 2, 3] };
        let pts = append_coordinates(&Array2::zeros((4, 4)), &sel, 2, 2);
        let coords: Vec<(f64, f64)> = (0..4).map(|i| (pts[(i, 4)], pts[(i, 5)])).collect();
        assert_eq!(coords, vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let sel = ForegroundSelection { mask: vec![true; 3], indices: vec![0, 1, 2] };
        let pts = append_coordinates(&Array2::zeros((3, 3)), &sel, 1, 3);
        assert!(pts.column(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let k1 = kmeans_cluster(&pts, 1, 0).unwrap();
        assert_eq!(k1.labels, vec![0, 0, 0]);
        let k3 = kmeans_cluster(&pts, 3, 0).unwrap();
        assert_eq!(k3.sizes, vec![1, 1, 1]);
        assert_eq!(sse(&pts, &k3.labels, 3), 0.0);
        assert!(kmeans_cluster(&pts, 4, 0).is_err());
    }

    #[test]
    fn kmeans_duplicates_stay_nonempty() {
        let pts = Array2::zeros((4, 2));
        let k = kmeans_cluster(&pts, 3, 9).unwrap();
        assert!(k.sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn instance_mask_examples() {
        let k = HardInstanceAssignment::from_labels(vec![0, 0, 1], 2);
        let m = instance_masks(&Array2::eye(3), &k).unwrap();
        assert_eq!(m.mask(0).to_vec(), vec![0.5, 0.5, 0.0]);
        let all = HardInstanceAssignment::from_labels(vec![0, 0], 1);
        let sa = array![[0.2, 0.4], [1.0, 0.0]];
        assert_eq!(instance_masks(&sa, &all).unwrap().mask(0).to_vec(), vec![0.30000000000000004, 0.5]);
    }

    #[test]
    fn class_mask_gather() {
        let ca = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        assert_eq!(class_masks(&ca, &[0, 2]).unwrap(), array![[0.1, 0.3], [0.4, 0.6]]);
        assert_eq!(class_masks(&ca, &[0, 1, 2]).unwrap(), ca);
    }
}
