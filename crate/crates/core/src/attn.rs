//! Per-layer attention, upsampling and accumulation into resolution-unified maps.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{config, contract, Result};

/// The optimized spatial state: an `height × width` grid of `dim`-vectors,
/// stored row-major as an `(height·width) × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    height: usize,
    width: usize,
    dim: usize,
    values: Array2<f64>,
}

impl Latent {
    pub fn new(height: usize, width: usize, dim: usize, values: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return config(format!("latent dims must be positive, got {height}x{width}x{dim}"));
        }
        if values.dim() != (height * width, dim) {
            return config(format!(
                "latent values have shape {:?}, expected ({}, {dim})",
                values.dim(),
                height * width
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return contract("latent contains non-finite values");
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self { height, width, dim, values: Array2::zeros((height * width, dim)) }
    }

    /// Standard-normal latent drawn from `rng`, in row-major pixel order.
    pub fn gaussian<R: rand::Rng>(height: usize, width: usize, dim: usize, rng: &mut R) -> Self {
        let values = Array2::from_shape_simple_fn((height * width, dim), || StandardNormal.sample(rng));
        Self { height, width, dim, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same shape, new values.
    pub fn with_values(&self, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), self.values.dim());
        Self { values, ..*self }
    }

    /// Hex SHA-256 of the little-endian f64 bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.values.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Non-overlapping average pooling to `h × w`.
    pub fn avg_pool(&self, h: usize, w: usize) -> Result<Array2<f64>> {
        let f = pool_factor((self.height, self.width), (h, w))?;
        if f == 1 {
            return Ok(self.values.clone());
        }
        let mut out = Array2::zeros((h * w, self.dim));
        let scale = 1.0 / (f * f) as f64;
        for r in 0..self.height {
            for c in 0..self.width {
                let dst = (r / f) * w + c / f;
                let src = self.values.row(r * self.width + c);
                out.row_mut(dst).scaled_add(scale, &src);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Latent::avg_pool`]: spreads a pooled gradient back to full resolution.
    pub fn pool_adjoint(&self, grad: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
        let f = pool_factor((self.height, self.width), (h, w))?;
        if f == 1 {
            return Ok(grad.clone());
        }
        let scale = 1.0 / (f * f) as f64;
        let mut out = Array2::zeros((self.pixels(), self.dim));
        for r in 0..self.height {
            for c in 0..self.width {
                let src = grad.row((r / f) * w + c / f);
                out.row_mut(r * self.width + c).scaled_add(scale, &src);
            }
        }
        Ok(out)
    }
}

/// Integer factor between a full grid and a layer grid.
pub fn pool_factor(full: (usize, usize), layer: (usize, usize)) -> Result<usize> {
    let (hh, ww) = full;
    let (h, w) = layer;
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 || hh / h != ww / w {
        return config(format!("layer resolution {h}x{w} does not divide {hh}x{ww} by one integer factor"));
    }
    Ok(hh / h)
}

/// Tokens, embeddings and the class tokens whose instances are requested.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    tokens: Vec<String>,
    embeddings: Array2<f64>,
    class_token_indices: Vec<usize>,
    instance_counts: Vec<usize>,
}

impl PromptSpec {
    pub fn new(
        tokens: Vec<String>,
        embeddings: Array2<f64>,
        class_token_indices: Vec<usize>,
        instance_counts: Vec<usize>,
    ) -> Result<Self> {
        let l = tokens.len();
        if l == 0 {
            return config("prompt has no tokens");
        }
        if embeddings.nrows() != l {
            return config(format!("{} embeddings for {l} tokens", embeddings.nrows()));
        }
        if class_token_indices.is_empty() {
            return config("prompt needs at least one class token");
        }
        if class_token_indices.len() != instance_counts.len() {
            return config("one instance count per class token is required");
        }
        for (i, &c) in class_token_indices.iter().enumerate() {
            if c >= l {
                return config(format!("class token index {c} out of range for {l} tokens"));
            }
            if class_token_indices[..i].contains(&c) {
                return config(format!("class token index {c} repeated"));
            }
        }
        if instance_counts.contains(&0) {
            return config("instance counts must be at least 1");
        }
        Ok(Self { tokens, embeddings, class_token_indices, instance_counts })
    }

    /// Whitespace tokenization of `text` (lowercased, punctuation stripped).
    /// Each entry of `classes` is located in order; its last word (or that word
    /// with a plural `s`) becomes the class token.
    pub fn from_text(text: &str, classes: &[&str], counts: &[usize], dim: usize, seed: u64) -> Result<Self> {
        let tokens = tokenize(text);
        let mut indices = Vec::with_capacity(classes.len());
        let mut start = 0;
        for class in classes {
            let words = tokenize(class);
            let Some(last) = words.last() else {
                return config("empty class name");
            };
            let plural = format!("{last}s");
            let found = (start..tokens.len()).find(|&i| {
                (tokens[i] == *last || tokens[i] == plural)
                    && i + 1 >= words.len()
                    && tokens[i + 1 - words.len()..i] == words[..words.len() - 1]
            });
            let Some(i) = found else {
                return config(format!("class '{class}' not found in prompt '{text}'"));
            };
            indices.push(i);
            start = i + 1;
        }
        let mut embeddings = Array2::zeros((tokens.len(), dim));
        for (i, tok) in tokens.iter().enumerate() {
            embeddings.row_mut(i).assign(&token_embedding(tok, dim, seed));
        }
        Self::new(tokens, embeddings, indices, counts.to_vec())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn class_token_indices(&self) -> &[usize] {
        &self.class_token_indices
    }

    pub fn instance_counts(&self) -> &[usize] {
        &self.instance_counts
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_token_indices.len()
    }

    pub fn total_instances(&self) -> usize {
        self.instance_counts.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Deterministic N(0, 1/dim) embedding for a token under `seed`.
pub fn token_embedding(token: &str, dim: usize, seed: u64) -> ndarray::Array1<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let scale = 1.0 / (dim as f64).sqrt();
    ndarray::Array1::from_shape_simple_fn(dim, || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Query/key projections of one head (`d × d_h` each).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjections {
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerConfig {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub head_dim: usize,
    pub heads: Vec<HeadProjections>,
}

impl AttentionLayerConfig {
    fn check(&self, dim: usize) -> Result<()> {
        if self.heads.is_empty() {
            return config(format!("layer {} has no heads", self.index));
        }
        for h in &self.heads {
            for w in [&h.self_q, &h.self_k, &h.cross_q, &h.cross_k] {
                if w.dim() != (dim, self.head_dim) {
                    return config(format!(
                        "layer {} projection has shape {:?}, expected ({dim}, {})",
                        self.index,
                        w.dim(),
                        self.head_dim
                    ));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return config(format!("layer {} has non-finite weights", self.index));
                }
            }
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of a row softmax: `dl = p ⊙ (dp − ⟨dp, p⟩_row)`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    for ((pr, dr), mut or) in p.rows().into_iter().zip(dp.rows()).zip(out.rows_mut()) {
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in or.iter_mut().zip(pr.iter()).zip(dr.iter()) {
            *o = pv * (dv - dot);
        }
    }
    out
}

fn scaled_logits(q: &Array2<f64>, k: &Array2<f64>, head_dim: usize) -> Array2<f64> {
    q.dot(&k.t()) / (head_dim as f64).sqrt()
}

/// Per-head self-attention of the pooled latent at the layer resolution.
pub fn compute_self_attention(latent: &Latent, cfg: &AttentionLayerConfig) -> Result<Vec<Array2<f64>>> {
    cfg.check(latent.dim())?;
    let pooled = latent.avg_pool(cfg.height, cfg.width)?;
    Ok(cfg
        .heads
        .iter()
        .map(|h| softmax_rows(&scaled_logits(&pooled.dot(&h.self_q), &pooled.dot(&h.self_k), cfg.head_dim)))
        .collect())
}

/// Per-head cross-attention from layer pixels to prompt tokens.
pub fn compute_cross_attention(
    latent: &Latent,
    prompt: &PromptSpec,
    cfg: &AttentionLayerConfig,
) -> Result<Vec<Array2<f64>>> {
    cfg.check(latent.dim())?;
    if prompt.is_empty() {
        return config("prompt has no tokens");
    }
    if prompt.dim() != latent.dim() {
        return config(format!("embedding dim {} differs from latent dim {}", prompt.dim(), latent.dim()));
    }
    let pooled = latent.avg_pool(cfg.height, cfg.width)?;
    Ok(cfg
        .heads
        .iter()
        .map(|h| {
            let q = pooled.dot(&h.cross_q);
            let k = prompt.embeddings().dot(&h.cross_k);
            softmax_rows(&scaled_logits(&q, &k, cfg.head_dim))
        })
        .collect())
}

/// Whether a map is pixel×pixel (upsampled on both axes) or pixel×token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    SelfAttention,
    CrossAttention,
}

/// Linear interpolation taps for upsampling a length-`n` axis by `factor`,
/// sampling at pixel centers and clamping at the borders.
pub fn interp_taps(n: usize, factor: usize) -> Vec<[(usize, f64); 2]> {
    (0..n * factor)
        .map(|i| {
            let x = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(n - 1);
            let w = x - x0 as f64;
            [(x0, 1.0 - w), (x1, w)]
        })
        .collect()
}

/// Bilinear map from a layer grid's pixels to the full grid's pixels.
#[derive(Clone, Debug)]
pub struct PixelUpsampler {
    factor: usize,
    source_pixels: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl PixelUpsampler {
    pub fn new(source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        let factor = pool_factor(target, source)?;
        let (h, w) = source;
        let rows = interp_taps(h, factor);
        let cols = interp_taps(w, factor);
        let mut taps = Vec::with_capacity(target.0 * target.1);
        for rt in &rows {
            for ct in &cols {
                let mut t = Vec::with_capacity(4);
                for &(r, wr) in rt {
                    for &(c, wc) in ct {
                        let wgt = wr * wc;
                        if wgt != 0.0 {
                            t.push((r * w + c, wgt));
                        }
                    }
                }
                taps.push(t);
            }
        }
        Ok(Self { factor, source_pixels: h * w, taps })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Interpolate along the row (pixel) axis of `map` (`source_pixels × m`).
    pub fn rows(&self, map: ArrayView2<f64>) -> Array2<f64> {
        if self.factor == 1 {
            return map.to_owned();
        }
        let mut out = Array2::zeros((self.taps.len(), map.ncols()));
        for (p, taps) in self.taps.iter().enumerate() {
            let mut row = out.row_mut(p);
            for &(s, w) in taps {
                row.scaled_add(w, &map.row(s));
            }
        }
        out
    }

    /// Adjoint of [`PixelUpsampler::rows`].
    pub fn rows_adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        if self.factor == 1 {
            return grad.to_owned();
        }
        let mut out = Array2::zeros((self.source_pixels, grad.ncols()));
        for (p, taps) in self.taps.iter().enumerate() {
            for &(s, w) in taps {
                out.row_mut(s).scaled_add(w, &grad.row(p));
            }
        }
        out
    }

    /// Interpolate along the column (pixel) axis of `map` (`m × source_pixels`).
    pub fn cols(&self, map: ArrayView2<f64>) -> Array2<f64> {
        if self.factor == 1 {
            return map.to_owned();
        }
        let mut out = Array2::zeros((map.nrows(), self.taps.len()));
        for (src, mut dst) in map.rows().into_iter().zip(out.rows_mut()) {
            for (q, taps) in self.taps.iter().enumerate() {
                dst[q] = taps.iter().map(|&(s, w)| w * src[s]).sum();
            }
        }
        out
    }

    /// Adjoint of [`PixelUpsampler::cols`].
    pub fn cols_adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        if self.factor == 1 {
            return grad.to_owned();
        }
        let mut out = Array2::zeros((grad.nrows(), self.source_pixels));
        for (src, mut dst) in grad.rows().into_iter().zip(out.rows_mut()) {
            for (q, taps) in self.taps.iter().enumerate() {
                for &(s, w) in taps {
                    dst[s] += w * src[q];
                }
            }
        }
        out
    }

    pub fn apply(&self, map: &Array2<f64>, kind: MapKind) -> Array2<f64> {
        match kind {
            MapKind::SelfAttention => self.cols(self.rows(map.view()).view()),
            MapKind::CrossAttention => self.rows(map.view()),
        }
    }

    pub fn adjoint(&self, grad: &Array2<f64>, kind: MapKind) -> Array2<f64> {
        match kind {
            MapKind::SelfAttention => self.rows_adjoint(self.cols_adjoint(grad.view()).view()),
            MapKind::CrossAttention => self.rows_adjoint(grad.view()),
        }
    }
}

/// Upsample a per-head map from `source` to `target` resolution.
pub fn upsample_map(
    map: &Array2<f64>,
    source: (usize, usize),
    target: (usize, usize),
    kind: MapKind,
) -> Result<Array2<f64>> {
    let up = PixelUpsampler::new(source, target)?;
    let n = source.0 * source.1;
    let ok = match kind {
        MapKind::SelfAttention => map.dim() == (n, n),
        MapKind::CrossAttention => map.nrows() == n,
    };
    if !ok {
        return config(format!("map shape {:?} does not match source resolution {source:?}", map.dim()));
    }
    Ok(up.apply(map, kind))
}

/// All heads of one layer, at the layer's resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Array2<f64>>,
}

/// Unnormalized average of every upsampled head map, summed layer by layer
/// then head by head.
pub fn accumulate_raw(layers: &[LayerMaps], kind: MapKind, target: (usize, usize)) -> Result<Array2<f64>> {
    if layers.is_empty() {
        return config("no attention layers to accumulate");
    }
    let mut sum: Option<Array2<f64>> = None;
    let mut heads = 0usize;
    for layer in layers {
        let up = PixelUpsampler::new((layer.height, layer.width), target)?;
        for m in &layer.maps {
            let u = up.apply(m, kind);
            match sum.as_mut() {
                Some(acc) if acc.dim() == u.dim() => *acc += &u,
                Some(_) => return config("accumulated maps disagree in shape"),
                None => sum = Some(u),
            }
            heads += 1;
        }
    }
    let Some(mut acc) = sum else {
        return config("attention layers carry no heads");
    };
    acc /= heads as f64;
    Ok(acc)
}

pub fn accumulate(layers: &[LayerMaps], kind: MapKind, target: (usize, usize)) -> Result<Array2<f64>> {
    Ok(minmax_normalize(&accumulate_raw(layers, kind, target)?))
}

#[derive(Clone, Debug)]
pub struct AccumulatedAttention {
    pub sa: Array2<f64>,
    pub ca: Array2<f64>,
}

/// Global extremes of a map; ties resolve to the lowest linear index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
    pub argmin: usize,
    pub argmax: usize,
}

impl MinMax {
    pub fn of(map: &Array2<f64>) -> Self {
        let mut mm = MinMax { min: f64::INFINITY, max: f64::NEG_INFINITY, argmin: 0, argmax: 0 };
        for (i, &v) in map.iter().enumerate() {
            if v < mm.min {
                mm.min = v;
                mm.argmin = i;
            }
            if v > mm.max {
                mm.max = v;
                mm.argmax = i;
            }
        }
        mm
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }
}

pub fn minmax_normalize(map: &Array2<f64>) -> Array2<f64> {
    let mm = MinMax::of(map);
    if mm.is_degenerate() {
        return Array2::zeros(map.dim());
    }
    let range = mm.max - mm.min;
    map.mapv(|v| (v - mm.min) / range)
}

/// Gradient of [`minmax_normalize`] given its output `y` and upstream `g`.
pub fn minmax_backward(y: &Array2<f64>, mm: &MinMax, g: &Array2<f64>) -> Array2<f64> {
    if mm.is_degenerate() {
        return Array2::zeros(g.dim());
    }
    let range = mm.max - mm.min;
    let mut dx = g / range;
    let mut dmin = 0.0;
    let mut dmax = 0.0;
    for (&gi, &yi) in g.iter().zip(y.iter()) {
        dmin += gi * (yi - 1.0);
        dmax -= gi * yi;
    }
    let ncols = g.ncols();
    dx[(mm.argmin / ncols, mm.argmin % ncols)] += dmin / range;
    dx[(mm.argmax / ncols, mm.argmax % ncols)] += dmax / range;
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};

    #[test]
    fn one_pixel_self_attention_is_one() {
        let lat = Latent::new(1, 1, 2, array![[0.3, -1.0]]).unwrap();
        let cfg = AttentionLayerConfig {
            index: 0,
            height: 1,
            width: 1,
            head_dim: 1,
            heads: vec![HeadProjections {
                self_q: array![[1.0], [2.0]],
                self_k: array![[0.5], [0.1]],
                cross_q: array![[1.0], [0.0]],
                cross_k: array![[1.0], [0.0]],
            }],
        };
        let maps = compute_self_attention(&lat, &cfg).unwrap();
        assert_eq!(maps[0], array![[1.0]]);
    }

    #[test]
    fn hand_logits_softmax() {
        // Logits row 0 = [0, ln 3], row 1 = [0, 0].
        let lat = Latent::new(2, 1, 2, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cfg = AttentionLayerConfig {
            index: 0,
            height: 2,
            width: 1,
            head_dim: 1,
            heads: vec![HeadProjections {
                self_q: array![[1.0], [0.0]],
                self_k: array![[0.0], [3f64.ln()]],
                cross_q: array![[1.0], [0.0]],
                cross_k: array![[1.0], [0.0]],
            }],
        };
        let m = &compute_self_attention(&lat, &cfg).unwrap()[0];
        assert_abs_diff_eq!(m[(0, 0)], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cross_attention_hand_logits() {
        // One pixel, two tokens, logits [0, ln(1/3)].
        let lat = Latent::new(1, 1, 2, array![[1.0, 0.0]]).unwrap();
        let emb = array![[0.0, 0.0], [(1.0f64 / 3.0).ln(), 0.0]];
        let prompt = PromptSpec::new(vec!["a".into(), "b".into()], emb, vec![1], vec![1]).unwrap();
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = AttentionLayerConfig {
            index: 0,
            height: 1,
            width: 1,
            head_dim: 1,
            heads: vec![HeadProjections {
                self_q: array![[1.0], [0.0]],
                self_k: array![[1.0], [0.0]],
                cross_q: array![[1.0], [0.0]],
                cross_k: eye.slice(s![.., 0..1]).to_owned(),
            }],
        };
        let m = &compute_cross_attention(&lat, &prompt, &cfg).unwrap()[0];
        assert_abs_diff_eq!(m[(0, 0)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn zero_latent_gives_uniform_rows() {
        let lat = Latent::zeros(4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((3, 2), || StandardNormal.sample(rng));
        let cfg = AttentionLayerConfig {
            index: 0,
            height: 2,
            width: 2,
            head_dim: 2,
            heads: vec![HeadProjections {
                self_q: w(&mut rng),
                self_k: w(&mut rng),
                cross_q: w(&mut rng),
                cross_k: w(&mut rng),
            }],
        };
        let m = &compute_self_attention(&lat, &cfg).unwrap()[0];
        assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let prompt = PromptSpec::from_text("a photo of a cat", &["cat"], &[1], 3, 0).unwrap();
        let c = &compute_cross_attention(&lat, &prompt, &cfg).unwrap()[0];
        assert!(c.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn weight_shape_mismatch_is_config_error() {
        let lat = Latent::zeros(2, 2, 3);
        let cfg = AttentionLayerConfig {
            index: 0,
            height: 2,
            width: 2,
            head_dim: 2,
            heads: vec![HeadProjections {
                self_q: Array2::zeros((4, 2)),
                self_k: Array2::zeros((4, 2)),
                cross_q: Array2::zeros((4, 2)),
                cross_k: Array2::zeros((4, 2)),
            }],
        };
        assert!(matches!(compute_self_attention(&lat, &cfg), Err(crate::IsacError::Config(_))));
    }

    #[test]
    fn upsample_cross_column_matches_hand_weights() {
        let col = array![[0.0], [1.0]];
        let up = upsample_map(&col, (2, 1), (4, 2), MapKind::CrossAttention).unwrap();
        // Column 0 of the 4x2 grid, rows 0..4.
        let vals: Vec<f64> = (0..4).map(|r| up[(r * 2, 0)]).collect();
        for (v, e) in vals.iter().zip([0.0, 0.25, 0.75, 1.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_constant_self_map() {
        let up = upsample_map(&array![[0.7]], (1, 1), (4, 4), MapKind::SelfAttention).unwrap();
        assert_eq!(up.dim(), (16, 16));
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_identity_and_bad_factor() {
        let m = array![[0.1, 0.9], [0.4, 0.6]];
        assert_eq!(upsample_map(&m, (1, 2), (1, 2), MapKind::SelfAttention).unwrap(), m);
        assert!(upsample_map(&m, (1, 2), (3, 3), MapKind::SelfAttention).is_err());
    }

    #[test]
    fn upsampler_adjoint_identity() {
        let up = PixelUpsampler::new((2, 3), (4, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((6, 6), || StandardNormal.sample(&mut rng));
        let y = Array2::from_shape_simple_fn((24, 24), || StandardNormal.sample(&mut rng));
        let lhs = (&up.apply(&x, MapKind::SelfAttention) * &y).sum();
        let rhs = (&x * &up.adjoint(&y, MapKind::SelfAttention)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn accumulate_examples() {
        let one = |v: f64| LayerMaps { height: 1, width: 1, maps: vec![array![[v]]] };
        let raw = accumulate_raw(
            &[LayerMaps { height: 1, width: 1, maps: vec![array![[0.2]], array![[0.6]]] }],
            MapKind::SelfAttention,
            (1, 1),
        )
        .unwrap();
        assert_abs_diff_eq!(raw[(0, 0)], 0.4, epsilon = 1e-15);
        let norm = accumulate(&[one(0.2), one(0.6)], MapKind::SelfAttention, (1, 1)).unwrap();
        assert_eq!(norm, array![[0.0]]);
        assert!(accumulate(&[], MapKind::CrossAttention, (1, 1)).is_err());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&array![[0.4, 0.8]]), array![[0.0, 1.0]]);
        assert_eq!(minmax_normalize(&array![[1.0, 2.0, 5.0]]), array![[0.0, 0.25, 1.0]]);
        assert_eq!(minmax_normalize(&array![[3.0, 3.0]]), array![[0.0, 0.0]]);
    }

    #[test]
    fn prompt_from_text_finds_class_tokens() {
        let p = PromptSpec::from_text("A photo of two cats and a dog.", &["cat", "dog"], &[2, 1], 4, 7).unwrap();
        assert_eq!(p.tokens()[p.class_token_indices()[0]], "cats");
        assert_eq!(p.tokens()[p.class_token_indices()[1]], "dog");
        assert_eq!(p.total_instances(), 3);
        let q = PromptSpec::from_text("A photo of a hot dog and a cat.", &["hot dog", "cat"], &[1, 1], 4, 7).unwrap();
        assert_eq!(q.class_token_indices(), &[5, 8]);
        assert!(PromptSpec::from_text("a photo", &["cat"], &[1], 4, 0).is_err());
    }
}
