//! Toy denoisers: a seeded random-attention network and a synthetic blob scene
//! whose attention is a smooth function of blob parameters read from the latent.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn::{
    compute_cross_attention, compute_self_attention, softmax_rows, softmax_rows_backward, AttentionLayerConfig, HeadProjections, LayerMaps,
    Latent, PixelUpsampler, PromptSpec,
};
use crate::backend::{check_latent, AttentionCapture, BackendKind, Denoiser, LayerSpec, LogitGrads, NoiseSchedule};
use crate::error::{config, Result};
use crate::image::{Color, Image};

pub const BACKGROUND: Color = [0.05, 0.05, 0.05];

/// Saturated class colors; any two differ by at least 0.25 in some channel.
pub const DEFAULT_PALETTE: [Color; 6] = [
    [0.90, 0.20, 0.15],
    [0.20, 0.80, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.90],
];

fn hash_arrays<'a>(tag: &str, arrays: impl IntoIterator<Item = &'a Array2<f64>>) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for a in arrays {
        h.update((a.nrows() as u64).to_le_bytes());
        h.update((a.ncols() as u64).to_le_bytes());
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Weight generator for `seed`, kept apart from the latent streams that share
/// the same integer seed.
fn weight_rng(tag: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

fn check_layer_plan(dims: (usize, usize, usize), plan: &[LayerSpec]) -> Result<()> {
    if plan.is_empty() {
        return config("layer plan is empty");
    }
    for l in plan {
        if l.heads == 0 {
            return config("every layer needs at least one head");
        }
        crate::attn::pool_factor((dims.0, dims.1), (l.height, l.width))?;
    }
    Ok(())
}

/// A random attention network with fixed seeded weights.
#[derive(Clone, Debug)]
pub struct SeededDenoiser {
    grid: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    layers: Vec<AttentionLayerConfig>,
    readout_self: Array2<f64>,
    readout_cross: Array2<f64>,
    decoder: Array2<f64>,
}

/// Build a seeded attention denoiser. Every weight is drawn from N(0, 1/d).
pub fn build_seeded_denoiser(dims: (usize, usize, usize), layer_plan: &[LayerSpec], seed: u64) -> Result<SeededDenoiser> {
    let (_, _, d) = dims;
    check_layer_plan(dims, layer_plan)?;
    if d == 0 {
        return config("latent dim must be positive");
    }
    let mut rng = weight_rng("seeded-attention", seed);
    let std = 1.0 / (d as f64).sqrt();
    let layers = layer_plan
        .iter()
        .enumerate()
        .map(|(index, l)| AttentionLayerConfig {
            index,
            height: l.height,
            width: l.width,
            head_dim: d,
            heads: (0..l.heads)
                .map(|_| HeadProjections {
                    self_q: gaussian(d, d, std, &mut rng),
                    self_k: gaussian(d, d, std, &mut rng),
                    cross_q: gaussian(d, d, std, &mut rng),
                    cross_k: gaussian(d, d, std, &mut rng),
                })
                .collect(),
        })
        .collect();
    Ok(SeededDenoiser {
        grid: dims,
        specs: layer_plan.to_vec(),
        layers,
        readout_self: gaussian(d, d, std, &mut rng),
        readout_cross: gaussian(d, d, std, &mut rng),
        decoder: gaussian(d, 3, std, &mut rng),
    })
}

impl SeededDenoiser {
    pub fn layer_configs(&self) -> &[AttentionLayerConfig] {
        &self.layers
    }

    /// All weights in construction order.
    pub fn weights(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            for h in &l.heads {
                out.extend([&h.self_q, &h.self_k, &h.cross_q, &h.cross_k]);
            }
        }
        out.extend([&self.readout_self, &self.readout_cross, &self.decoder]);
        out
    }
}

impl Denoiser for SeededDenoiser {
    fn kind(&self) -> BackendKind {
        BackendKind::SeededAttention
    }

    fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.specs
    }

    fn forward(
        &self,
        x: &Latent,
        _t: usize,
        _schedule: &NoiseSchedule,
        prompt: &PromptSpec,
        mut hooks: Option<&mut AttentionCapture>,
    ) -> Result<Latent> {
        check_latent(x, self.grid)?;
        let (h, w, d) = self.grid;
        let mut attended_self = Array2::<f64>::zeros((h * w, d));
        let mut attended_cross = Array2::<f64>::zeros((h * w, d));
        let mut heads = 0usize;
        for layer in &self.layers {
            let sa = compute_self_attention(x, layer)?;
            let ca = compute_cross_attention(x, prompt, layer)?;
            let pooled = x.avg_pool(layer.height, layer.width)?;
            let up = PixelUpsampler::new((layer.height, layer.width), (h, w))?;
            for (p_self, p_cross) in sa.iter().zip(&ca) {
                attended_self += &up.rows(p_self.dot(&pooled).view());
                attended_cross += &up.rows(p_cross.dot(prompt.embeddings()).view());
                heads += 1;
            }
            if let Some(cap) = hooks.as_deref_mut() {
                cap.self_layers.push(LayerMaps { height: layer.height, width: layer.width, maps: sa });
                cap.cross_layers.push(LayerMaps { height: layer.height, width: layer.width, maps: ca });
            }
        }
        let eps = (attended_self.dot(&self.readout_self) + attended_cross.dot(&self.readout_cross)) / heads as f64;
        Latent::new(h, w, d, eps)
    }

    fn attention_backward(&self, x: &Latent, prompt: &PromptSpec, grads: &LogitGrads) -> Result<Array2<f64>> {
        check_latent(x, self.grid)?;
        let mut dx = Array2::<f64>::zeros(x.values().dim());
        for (li, layer) in self.layers.iter().enumerate() {
            let pooled = x.avg_pool(layer.height, layer.width)?;
            let scale = 1.0 / (layer.head_dim as f64).sqrt();
            let mut dpooled = Array2::<f64>::zeros(pooled.dim());
            for (hi, head) in layer.heads.iter().enumerate() {
                let q = pooled.dot(&head.self_q);
                let k = pooled.dot(&head.self_k);
                let ds = &grads.self_logits[li][hi];
                let dq = ds.dot(&k) * scale;
                let dk = ds.t().dot(&q) * scale;
                dpooled += &dq.dot(&head.self_q.t());
                dpooled += &dk.dot(&head.self_k.t());
                let kc = prompt.embeddings().dot(&head.cross_k);
                let dc = &grads.cross_logits[li][hi];
                let dqc = dc.dot(&kc) * scale;
                dpooled += &dqc.dot(&head.cross_q.t());
            }
            dx += &x.pool_adjoint(&dpooled, layer.height, layer.width)?;
        }
        Ok(dx)
    }

    fn decode(&self, x: &Latent) -> Image {
        let (h, w, _) = self.grid;
        let logits = x.values().dot(&self.decoder);
        let mut img = Image::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                let l = logits.row(r * w + c);
                img.set(r, c, [0, 1, 2].map(|i| 1.0 / (1.0 + (-l[i]).exp())));
            }
        }
        img
    }

    fn weight_hash(&self) -> String {
        hash_arrays("seeded-attention", self.weights())
    }
}

/// One rendered object: a soft disc with a class mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub class_index: usize,
    pub center: [f64; 2],
    pub radius: f64,
    pub visibility: f64,
    pub class_weights: Vec<f64>,
}

impl SceneInstance {
    /// A fully visible single-class disc.
    pub fn solid(class_index: usize, center: [f64; 2], radius: f64, classes: usize) -> Self {
        let mut class_weights = vec![0.0; classes];
        class_weights[class_index] = 1.0;
        Self { class_index, center, radius, visibility: 1.0, class_weights }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub instances: Vec<SceneInstance>,
    pub palette: Vec<Color>,
    pub background: Color,
}

/// Largest per-channel difference between two colors.
pub fn channel_distance(a: Color, b: Color) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

pub fn validate_palette(palette: &[Color]) -> Result<()> {
    if palette.is_empty() {
        return config("palette is empty");
    }
    for i in 0..palette.len() {
        for j in i + 1..palette.len() {
            if channel_distance(palette[i], palette[j]) < 0.25 {
                return config(format!("palette colors {i} and {j} are closer than 0.25"));
            }
        }
    }
    Ok(())
}

pub fn default_palette(k: usize) -> Result<Vec<Color>> {
    if k > DEFAULT_PALETTE.len() {
        return config(format!("default palette has {} colors, {k} requested", DEFAULT_PALETTE.len()));
    }
    Ok(DEFAULT_PALETTE[..k].to_vec())
}

impl SceneSpec {
    pub fn new(instances: Vec<SceneInstance>, palette: Vec<Color>, background: Color) -> Result<Self> {
        validate_palette(&palette)?;
        for inst in &instances {
            if !(inst.radius > 0.0 && inst.radius <= 0.5) {
                return config(format!("radius {} outside (0, 0.5]", inst.radius));
            }
            if inst.class_weights.len() != palette.len() || inst.class_index >= palette.len() {
                return config("instance classes do not match the palette");
            }
        }
        Ok(Self { instances, palette, background })
    }
}

/// Color each pixel by the nearest covering blob (1-pixel anti-aliased edge).
pub fn render_scene(scene: &SceneSpec, height: usize, width: usize) -> Image {
    let mut img = Image::filled(height, width, scene.background);
    let px_per_unit = height.min(width) as f64;
    let bg = scene.background;
    let colors: Vec<Color> = scene
        .instances
        .iter()
        .map(|inst| {
            let col = scene.palette[inst.class_index];
            [0, 1, 2].map(|ch| bg[ch] + inst.visibility * (col[ch] - bg[ch]))
        })
        .collect();
    for r in 0..height {
        for c in 0..width {
            let (px, py) = ((c as f64 + 0.5) / width as f64, (r as f64 + 0.5) / height as f64);
            let mut best: Option<(f64, usize, f64)> = None;
            for (i, inst) in scene.instances.iter().enumerate() {
                let dist = ((px - inst.center[0]).powi(2) + (py - inst.center[1]).powi(2)).sqrt();
                let cov = ((inst.radius - dist) * px_per_unit + 0.5).clamp(0.0, 1.0);
                if cov > 0.0 && best.is_none_or(|b| dist < b.0) {
                    best = Some((dist, i, cov));
                }
            }
            if let Some((_, i, cov)) = best {
                let col = colors[i];
                img.set(r, c, [0, 1, 2].map(|ch| cov * col[ch] + (1.0 - cov) * bg[ch]));
            }
        }
    }
    img
}

/// Tunable constants of the synthetic scene denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Self-attention logit scale on squared membership distance.
    pub temperature: f64,
    /// Width of the soft membership edge, in image units.
    pub edge: f64,
    pub class_gain: f64,
    pub background_gain: f64,
    /// Scale of the fixed token-specific texture added to cross-attention logits.
    pub texture_gain: f64,
    /// Logit bonus of each blob's prompt class.
    pub class_bias: f64,
    /// Blend between per-blob class mixtures (0) and per-token shares over blobs (1)
    /// in the class-token cross logits.
    pub token_competition: f64,
    /// Gain of the latent-to-parameter read-out.
    pub readout_gain: f64,
    pub center_mid: f64,
    pub center_half: f64,
    pub radius_mid: f64,
    pub radius_half: f64,
    pub logit_half: f64,
    /// Per-step pull between blob positions and their anchors.
    pub rigidity: f64,
    pub rigidity_power: f64,
    pub radius_heal: f64,
    pub radius_target: f64,
    pub visibility_heal: f64,
    /// Radius and visibility healing scale with `(t/T)^power`.
    pub radius_heal_power: f64,
    pub visibility_heal_power: f64,
    /// Per-step decay of latent content outside the read-out.
    pub residual_decay: f64,
    pub background: Color,
    pub palette: Option<Vec<Color>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            edge: 0.03,
            class_gain: 6.0,
            background_gain: 3.0,
            texture_gain: 0.0,
            class_bias: 1.0,
            token_competition: 1.0,
            readout_gain: 30.0,
            center_mid: 0.5,
            center_half: 0.38,
            radius_mid: 0.17,
            radius_half: 0.07,
            logit_half: 2.0,
            rigidity: 0.6,
            rigidity_power: 1.0,
            radius_heal: 0.15,
            radius_target: 0.2,
            visibility_heal: 0.25,
            radius_heal_power: 1.0,
            visibility_heal_power: 0.0,
            residual_decay: 0.9,
            background: BACKGROUND,
            palette: None,
        }
    }
}

/// Read-out slots per blob: center x/y, radius, visibility, class logits, anchor x/y.
fn slots(classes: usize) -> usize {
    6 + classes
}

/// Parameters decoded from read-out coordinates `u`, kept with the phases
/// needed for the backward pass.
struct Blobs {
    u: Array1<f64>,
    cx: Vec<f64>,
    cy: Vec<f64>,
    r: Vec<f64>,
    vis: Vec<f64>,
    /// `N × k` class mixture.
    pi: Array2<f64>,
    /// `N × k` share of each class token's attention per blob (softmax over blobs).
    share: Array2<f64>,
    /// `N × k` token-to-blob affinity used by the cross logits.
    aff: Array2<f64>,
}

/// Per-layer memberships and the intermediates of their computation.
struct Memberships {
    m: Array2<f64>,
    sig: Array2<f64>,
    dist: Array2<f64>,
    px: Vec<f64>,
    py: Vec<f64>,
}

pub struct SceneDenoiser {
    grid: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    cfg: SceneConfig,
    blobs: usize,
    classes: usize,
    class_tokens: Vec<usize>,
    /// Prompt class of each blob, in instance order.
    blob_class: Vec<usize>,
    tokens: usize,
    /// Orthonormal rows (`blobs·slots × H·W·d`).
    readout: Array2<f64>,
    /// Fixed per-layer cross-attention texture (`HW_l × L`).
    texture: Vec<Array2<f64>>,
    palette: Vec<Color>,
}

/// Scene denoiser for `prompt` with the default configuration on a 16×16×8 grid.
pub fn build_scene_denoiser(prompt: &PromptSpec, seed: u64) -> Result<SceneDenoiser> {
    build_scene_denoiser_with(prompt, (16, 16, 8), &SceneConfig::default(), seed)
}

pub fn build_scene_denoiser_with(
    prompt: &PromptSpec,
    dims: (usize, usize, usize),
    cfg: &SceneConfig,
    seed: u64,
) -> Result<SceneDenoiser> {
    let (h, w, d) = dims;
    let blobs = prompt.total_instances();
    let classes = prompt.class_count();
    if blobs > 6 {
        return config(format!("scene backend supports at most 6 instances, got {blobs}"));
    }
    if classes > 4 {
        return config(format!("scene backend supports at most 4 classes, got {classes}"));
    }
    if h % 2 != 0 || w % 2 != 0 || h != w {
        return config(format!("scene grid must be square with even side, got {h}x{w}"));
    }
    let specs = vec![
        LayerSpec { height: h, width: w, heads: 1 },
        LayerSpec { height: h / 2, width: w / 2, heads: 1 },
    ];
    let palette = match &cfg.palette {
        Some(p) if p.len() >= classes => p[..classes].to_vec(),
        Some(p) => return config(format!("palette has {} colors for {classes} classes", p.len())),
        None => default_palette(classes)?,
    };
    validate_palette(&palette)?;
    let rows = blobs * slots(classes);
    let cols = h * w * d;
    if rows > cols {
        return config("latent too small for the scene read-out");
    }
    // The read-out is conditioned on the prompt tokens, so each prompt has its own layout.
    let mut rng = weight_rng(&format!("synthetic-scene {}", prompt.tokens().join(" ")), seed);
    let readout = orthonormal_rows(gaussian(rows, cols, 1.0, &mut rng));
    let texture = specs
        .iter()
        .map(|l| gaussian(l.height * l.width, prompt.len(), cfg.texture_gain, &mut rng))
        .collect();
    Ok(SceneDenoiser {
        grid: dims,
        specs,
        cfg: cfg.clone(),
        blobs,
        classes,
        class_tokens: prompt.class_token_indices().to_vec(),
        blob_class: prompt.instance_counts().iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect(),
        tokens: prompt.len(),
        readout,
        texture,
        palette,
    })
}

/// Modified Gram-Schmidt on the rows, applied twice for stability.
fn orthonormal_rows(mut a: Array2<f64>) -> Array2<f64> {
    for _ in 0..2 {
        for i in 0..a.nrows() {
            for j in 0..i {
                let dot = a.row(i).dot(&a.row(j));
                let prev = a.row(j).to_owned();
                a.row_mut(i).scaled_add(-dot, &prev);
            }
            let norm = a.row(i).dot(&a.row(i)).sqrt();
            a.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    a
}

/// The phase closest to `u` with the same sine as `base`.
fn nearest_phase(u: f64, base: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    [base, PI - base]
        .into_iter()
        .map(|b| b + ((u - b) / TAU).round() * TAU)
        .fold(f64::NAN, |best, p| if best.is_nan() || (p - u).abs() < (best - u).abs() { p } else { best })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SceneDenoiser {
    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn blob_count(&self) -> usize {
        self.blobs
    }

    fn flat(&self, x: &Latent) -> Array1<f64> {
        Array1::from_iter(x.values().iter().cloned())
    }

    /// Read-out coordinates `u = gain · R x`.
    fn readout_coords(&self, x: &Latent) -> Array1<f64> {
        self.readout.dot(&self.flat(x)) * self.cfg.readout_gain
    }

    fn blobs_from(&self, u: Array1<f64>) -> Blobs {
        let c = &self.cfg;
        let s = slots(self.classes);
        let n = self.blobs;
        let mut out = Blobs {
            cx: Vec::with_capacity(n),
            cy: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            vis: Vec::with_capacity(n),
            pi: Array2::zeros((n, self.classes)),
            share: Array2::zeros((n, self.classes)),
            aff: Array2::zeros((n, self.classes)),
            u: Array1::zeros(0),
        };
        let mut z = Array2::<f64>::zeros((n, self.classes));
        for i in 0..n {
            let b = &u.as_slice().expect("contiguous")[i * s..(i + 1) * s];
            out.cx.push(c.center_mid + c.center_half * b[0].sin());
            out.cy.push(c.center_mid + c.center_half * b[1].sin());
            out.r.push(c.radius_mid + c.radius_half * b[2].sin());
            out.vis.push(0.5 * (1.0 - b[3].cos()));
            for j in 0..self.classes {
                z[(i, j)] = c.logit_half * b[4 + j].sin();
                if j == self.blob_class[i] {
                    z[(i, j)] += c.class_bias;
                }
            }
        }
        out.pi = softmax_rows(&z);
        out.share = softmax_rows(&z.t().to_owned()).t().to_owned();
        let beta = c.token_competition;
        out.aff = &out.pi * (1.0 - beta) + &out.share * beta;
        out.u = u;
        out
    }

    fn memberships(&self, b: &Blobs, h: usize, w: usize) -> Memberships {
        let n = h * w;
        let mut mem = Memberships {
            m: Array2::zeros((n, self.blobs)),
            sig: Array2::zeros((n, self.blobs)),
            dist: Array2::zeros((n, self.blobs)),
            px: Vec::with_capacity(n),
            py: Vec::with_capacity(n),
        };
        for p in 0..n {
            let (px, py) = (((p % w) as f64 + 0.5) / w as f64, ((p / w) as f64 + 0.5) / h as f64);
            mem.px.push(px);
            mem.py.push(py);
            for i in 0..self.blobs {
                let d = ((px - b.cx[i]).powi(2) + (py - b.cy[i]).powi(2) + 1e-12).sqrt();
                let s = sigmoid((b.r[i] - d) / self.cfg.edge);
                mem.dist[(p, i)] = d;
                mem.sig[(p, i)] = s;
                mem.m[(p, i)] = b.vis[i] * s;
            }
        }
        mem
    }

    fn self_logits(&self, m: &Array2<f64>) -> Array2<f64> {
        let sq: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut g = m.dot(&m.t());
        for ((p, q), v) in g.indexed_iter_mut() {
            *v = -self.cfg.temperature * (sq[p] + sq[q] - 2.0 * *v);
        }
        g
    }

    fn cross_logits(&self, m: &Array2<f64>, aff: &Array2<f64>, layer: usize) -> Array2<f64> {
        let n = m.nrows();
        let cls = m.dot(aff) * self.cfg.class_gain;
        let mut out = Array2::zeros((n, self.tokens));
        for p in 0..n {
            let bg: f64 = m.row(p).iter().map(|v| 1.0 - v).product::<f64>() * self.cfg.background_gain;
            out.row_mut(p).fill(bg);
            for (j, &tok) in self.class_tokens.iter().enumerate() {
                out[(p, tok)] = cls[(p, j)];
            }
        }
        out + &self.texture[layer]
    }

    /// Blob parameters as a scene with the backend palette.
    pub fn scene_from(&self, x: &Latent) -> SceneSpec {
        let b = self.blobs_from(self.readout_coords(x));
        let instances = (0..self.blobs)
            .map(|i| {
                let w: Vec<f64> = b.pi.row(i).to_vec();
                let class_index = w
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > w[best] { j } else { best });
                SceneInstance {
                    class_index,
                    center: [b.cx[i], b.cy[i]],
                    radius: b.r[i],
                    visibility: b.vis[i],
                    class_weights: w,
                }
            })
            .collect();
        SceneSpec { instances, palette: self.palette.clone(), background: self.cfg.background }
    }

    /// A latent whose read-out reproduces `scene` exactly (phases on the
    /// principal branch; anchors placed at the centers).
    pub fn encode(&self, scene: &SceneSpec) -> Result<Latent> {
        if scene.instances.len() != self.blobs {
            return config(format!("scene has {} instances, backend reads {}", scene.instances.len(), self.blobs));
        }
        let c = &self.cfg;
        let s = slots(self.classes);
        let mut u = Array1::<f64>::zeros(self.blobs * s);
        let asin = |v: f64| v.clamp(-1.0, 1.0).asin();
        for (i, inst) in scene.instances.iter().enumerate() {
            let b = i * s;
            u[b] = asin((inst.center[0] - c.center_mid) / c.center_half);
            u[b + 1] = asin((inst.center[1] - c.center_mid) / c.center_half);
            u[b + 2] = asin((inst.radius - c.radius_mid) / c.radius_half);
            u[b + 3] = (1.0 - 2.0 * inst.visibility).clamp(-1.0, 1.0).acos();
            if self.classes > 1 {
                for j in 0..self.classes {
                    let target = if j == inst.class_index { 1.0 } else { -1.0 };
                    u[b + 4 + j] = asin(target);
                }
            }
            u[b + 4 + self.classes] = u[b];
            u[b + 5 + self.classes] = u[b + 1];
        }
        let flat = self.readout.t().dot(&(u / c.readout_gain));
        let (h, w, d) = self.grid;
        Latent::new(h, w, d, flat.into_shape_with_order((h * w, d)).expect("shape"))
    }

    fn drift(&self, u: &mut Array1<f64>, t: usize, total: usize) {
        let c = &self.cfg;
        let s = slots(self.classes);
        let omega = (1.0 - t as f64 / total as f64).powf(c.rigidity_power);
        let progress = t as f64 / total as f64;
        let (heal_r, heal_v) = (progress.powf(c.radius_heal_power), progress.powf(c.visibility_heal_power));
        for i in 0..self.blobs {
            let b = i * s;
            let a = b + 4 + self.classes;
            for axis in 0..2 {
                let (pos, anc) = (u[b + axis], u[a + axis]);
                u[b + axis] = pos + c.rigidity * omega * (anc - pos);
                u[a + axis] = anc + c.rigidity * (1.0 - omega) * (pos - anc);
            }
            let target = ((c.radius_target - c.radius_mid) / c.radius_half).clamp(-1.0, 1.0).asin();
            u[b + 2] += heal_r * c.radius_heal * (nearest_phase(u[b + 2], target) - u[b + 2]);
            u[b + 3] += heal_v * c.visibility_heal * u[b + 3].sin();
        }
    }
}

impl Denoiser for SceneDenoiser {
    fn kind(&self) -> BackendKind {
        BackendKind::SyntheticScene
    }

    fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.specs
    }

    fn forward(
        &self,
        x: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        _prompt: &PromptSpec,
        hooks: Option<&mut AttentionCapture>,
    ) -> Result<Latent> {
        check_latent(x, self.grid)?;
        let flat = self.flat(x);
        let v = self.readout.dot(&flat);
        let residual = &flat - &self.readout.t().dot(&v);
        let mut u = &v * self.cfg.readout_gain;
        self.drift(&mut u, t, schedule.steps());
        let mean = self.readout.t().dot(&(u / self.cfg.readout_gain)) + residual * self.cfg.residual_decay;
        // Noise whose posterior-mean step lands exactly on `mean`.
        let coef = (1.0 - schedule.alpha_bar(t)).sqrt() / schedule.beta(t);
        let eps = (&flat - &(mean * schedule.alpha(t).sqrt())) * coef;

        if let Some(cap) = hooks {
            let b = self.blobs_from(self.readout_coords(x));
            for (li, l) in self.specs.iter().enumerate() {
                let mem = self.memberships(&b, l.height, l.width);
                let sa = softmax_rows(&self.self_logits(&mem.m));
                let ca = softmax_rows(&self.cross_logits(&mem.m, &b.aff, li));
                cap.self_layers.push(LayerMaps { height: l.height, width: l.width, maps: vec![sa; l.heads] });
                cap.cross_layers.push(LayerMaps { height: l.height, width: l.width, maps: vec![ca; l.heads] });
            }
        }
        let (h, w, d) = self.grid;
        Latent::new(h, w, d, eps.into_shape_with_order((h * w, d)).expect("shape"))
    }

    fn attention_backward(&self, x: &Latent, _prompt: &PromptSpec, grads: &LogitGrads) -> Result<Array2<f64>> {
        check_latent(x, self.grid)?;
        let c = &self.cfg;
        let b = self.blobs_from(self.readout_coords(x));
        let n = self.blobs;
        let mut dcx = vec![0.0; n];
        let mut dcy = vec![0.0; n];
        let mut dr = vec![0.0; n];
        let mut dvis = vec![0.0; n];
        let mut daff = Array2::<f64>::zeros((n, self.classes));
        for (li, l) in self.specs.iter().enumerate() {
            let mem = self.memberships(&b, l.height, l.width);
            let m = &mem.m;
            let mut ds = Array2::<f64>::zeros((m.nrows(), m.nrows()));
            for g in &grads.self_logits[li] {
                ds += g;
            }
            let mut dc = Array2::<f64>::zeros((m.nrows(), self.tokens));
            for g in &grads.cross_logits[li] {
                dc += g;
            }
            // Self logits: −τ‖m_p − m_q‖².
            let rows = ds.sum_axis(Axis(1));
            let cols = ds.sum_axis(Axis(0));
            let mut dm = ds.dot(m) + ds.t().dot(m);
            for p in 0..m.nrows() {
                let s = rows[p] + cols[p];
                for i in 0..n {
                    dm[(p, i)] = -2.0 * c.temperature * (m[(p, i)] * s - dm[(p, i)]);
                }
            }
            // Cross logits: class tokens and background tokens.
            let mut is_class = vec![false; self.tokens];
            for &tok in &self.class_tokens {
                is_class[tok] = true;
            }
            for p in 0..m.nrows() {
                for (j, &tok) in self.class_tokens.iter().enumerate() {
                    let g = c.class_gain * dc[(p, tok)];
                    for i in 0..n {
                        dm[(p, i)] += g * b.aff[(i, j)];
                        daff[(i, j)] += g * m[(p, i)];
                    }
                }
                let gb: f64 = (0..self.tokens).filter(|&t| !is_class[t]).map(|t| dc[(p, t)]).sum::<f64>()
                    * c.background_gain;
                if gb != 0.0 {
                    for i in 0..n {
                        let others: f64 = (0..n).filter(|&k| k != i).map(|k| 1.0 - m[(p, k)]).product();
                        dm[(p, i)] -= gb * others;
                    }
                }
            }
            // Memberships: m = vis · σ((r − dist)/edge).
            for p in 0..m.nrows() {
                for i in 0..n {
                    let g = dm[(p, i)];
                    if g == 0.0 {
                        continue;
                    }
                    let s = mem.sig[(p, i)];
                    dvis[i] += g * s;
                    let da = g * b.vis[i] * s * (1.0 - s) / c.edge;
                    dr[i] += da;
                    let d = mem.dist[(p, i)];
                    dcx[i] -= da * (b.cx[i] - mem.px[p]) / d;
                    dcy[i] -= da * (b.cy[i] - mem.py[p]) / d;
                }
            }
        }
        let beta = c.token_competition;
        let dz = softmax_rows_backward(&b.pi, &(&daff * (1.0 - beta)))
            + softmax_rows_backward(&b.share.t().to_owned(), &(daff.t().to_owned() * beta)).t();
        let s = slots(self.classes);
        let mut du = Array1::<f64>::zeros(b.u.len());
        for i in 0..n {
            let o = i * s;
            du[o] = dcx[i] * c.center_half * b.u[o].cos();
            du[o + 1] = dcy[i] * c.center_half * b.u[o + 1].cos();
            du[o + 2] = dr[i] * c.radius_half * b.u[o + 2].cos();
            du[o + 3] = dvis[i] * 0.5 * b.u[o + 3].sin();
            for j in 0..self.classes {
                du[o + 4 + j] = dz[(i, j)] * c.logit_half * b.u[o + 4 + j].cos();
            }
        }
        let dx = self.readout.t().dot(&du) * c.readout_gain;
        let (h, w, d) = self.grid;
        Ok(dx.into_shape_with_order((h * w, d)).expect("shape"))
    }

    fn shape_noise(&self, z: Array2<f64>) -> Array2<f64> {
        let dim = z.dim();
        let flat = Array1::from_iter(z.iter().cloned());
        let proj = self.readout.t().dot(&self.readout.dot(&flat));
        (flat - proj).into_shape_with_order(dim).expect("shape")
    }

    fn decode(&self, x: &Latent) -> Image {
        render_scene(&self.scene_from(x), self.grid.0, self.grid.1)
    }

    fn ground_truth(&self, x: &Latent) -> Result<SceneSpec> {
        Ok(self.scene_from(x))
    }

    fn palette(&self) -> Option<&[Color]> {
        Some(&self.palette)
    }

    fn weight_hash(&self) -> String {
        hash_arrays("synthetic-scene", [&self.readout])
    }
}

/// Scene parameters read from a run's final latent.
pub fn extract_ground_truth(record: &crate::engine::RunRecord) -> Result<SceneSpec> {
    record.ground_truth.clone().ok_or_else(|| {
        crate::IsacError::Unsupported(format!("{} backend has no scene ground truth", record.backend))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_separated() {
        validate_palette(&DEFAULT_PALETTE).unwrap();
        assert!(validate_palette(&[[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]).is_err());
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SceneSpec::new(vec![], default_palette(2).unwrap(), BACKGROUND).unwrap();
        let img = render_scene(&scene, 8, 8);
        assert!(img.pixels().iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn encode_round_trips_through_readout() {
        let prompt = PromptSpec::from_text("A photo of a cat and a dog.", &["cat", "dog"], &[1, 1], 8, 0).unwrap();
        let be = build_scene_denoiser(&prompt, 3).unwrap();
        let scene = SceneSpec::new(
            vec![SceneInstance::solid(0, [0.3, 0.4], 0.15, 2), SceneInstance::solid(1, [0.7, 0.6], 0.2, 2)],
            default_palette(2).unwrap(),
            BACKGROUND,
        )
        .unwrap();
        let x = be.encode(&scene).unwrap();
        let back = be.ground_truth(&x).unwrap();
        for (a, b) in back.instances.iter().zip(&scene.instances) {
            assert_eq!(a.class_index, b.class_index);
            assert!((a.center[0] - b.center[0]).abs() < 1e-9);
            assert!((a.center[1] - b.center[1]).abs() < 1e-9);
            assert!((a.radius - b.radius).abs() < 1e-9);
            assert!((a.visibility - 1.0).abs() < 1e-9);
        }
    }
}
