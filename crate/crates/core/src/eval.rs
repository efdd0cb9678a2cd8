//! Benchmark prompts, oracle detectors with any-two voting, accuracies and the
//! ablation runner.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_with, PromptConfig, RunConfig, RunOptions};
use crate::error::{config, contract, Result};
use crate::image::{color_distance, Color, Image};
use crate::output::{csv_err, read_manifest, write_run_dir, RunLabels, GROUND_TRUTH_FILE, IMAGE_FILE, MANIFEST_FILE};
use crate::toybench::SceneSpec;

/// Pixel box with exclusive upper bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_index: usize,
    pub bbox: BoundingBox,
    pub detector: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorParams {
    pub min_area: usize,
    /// Largest distance to a palette color for a pixel to vote for it.
    pub color_threshold: f64,
    /// Smallest distance from the background for a pixel to be foreground.
    pub foreground_threshold: f64,
}

/// The three detector variants of the ensemble.
pub const DETECTORS: [DetectorParams; 3] = [
    DetectorParams { min_area: 4, color_threshold: 0.30, foreground_threshold: 0.3 },
    DetectorParams { min_area: 9, color_threshold: 0.25, foreground_threshold: 0.3 },
    DetectorParams { min_area: 16, color_threshold: 0.20, foreground_threshold: 0.3 },
];

pub const IOU_THRESHOLD: f64 = 0.5;

/// Connected components (4-connectivity) of non-background pixels, each
/// labeled by majority vote of nearby palette colors.
pub fn detect(
    image: &Image,
    palette: &[Color],
    background: Color,
    params: &DetectorParams,
    detector: usize,
) -> Result<Vec<Detection>> {
    if palette.is_empty() {
        return config("detector needs a nonempty palette");
    }
    let (h, w) = (image.height(), image.width());
    let fg: Vec<bool> = image.pixels().iter().map(|&p| color_distance(p, background) > params.foreground_threshold).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if members.len() < params.min_area {
            continue;
        }
        let mut votes = vec![0usize; palette.len()];
        for &p in &members {
            let px = image.pixels()[p];
            let (best, dist) = palette
                .iter()
                .enumerate()
                .map(|(i, &c)| (i, color_distance(px, c)))
                .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
            if dist <= params.color_threshold {
                votes[best] += 1;
            }
        }
        let (class_index, &top) = votes.iter().enumerate().fold((0, &0), |b, x| if x.1 > b.1 { x } else { b });
        if top * 2 <= members.len() {
            continue;
        }
        let bbox = BoundingBox {
            x0: members.iter().map(|p| p % w).min().unwrap_or(0),
            y0: members.iter().map(|p| p / w).min().unwrap_or(0),
            x1: members.iter().map(|p| p % w).max().unwrap_or(0) + 1,
            y1: members.iter().map(|p| p / w).max().unwrap_or(0) + 1,
        };
        out.push(Detection { class_index, bbox, detector });
    }
    Ok(out)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Keep detections confirmed by at least one other detector (same class,
/// box IoU ≥ threshold, greedy one-to-one matching per detector pair), one
/// per matched group.
pub fn ensemble_filter(per_detector: &[Vec<Detection>], iou_threshold: f64) -> Result<Vec<Detection>> {
    if per_detector.len() != 3 {
        return contract(format!("ensemble expects 3 detection lists, got {}", per_detector.len()));
    }
    let mut offsets = vec![0];
    for list in per_detector {
        offsets.push(offsets.last().unwrap() + list.len());
    }
    let total = *offsets.last().unwrap();
    let mut parent: Vec<usize> = (0..total).collect();
    let mut matched = vec![false; total];
    for a in 0..3 {
        for b in a + 1..3 {
            let mut cands = Vec::new();
            for (i, da) in per_detector[a].iter().enumerate() {
                for (j, db) in per_detector[b].iter().enumerate() {
                    if da.class_index != db.class_index {
                        continue;
                    }
                    let iou = da.bbox.iou(&db.bbox);
                    if iou >= iou_threshold {
                        cands.push((iou, i, j));
                    }
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_a = vec![false; per_detector[a].len()];
            let mut used_b = vec![false; per_detector[b].len()];
            for (_, i, j) in cands {
                if used_a[i] || used_b[j] {
                    continue;
                }
                used_a[i] = true;
                used_b[j] = true;
                let (u, v) = (offsets[a] + i, offsets[b] + j);
                matched[u] = true;
                matched[v] = true;
                let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                if ru != rv {
                    parent[ru.max(rv)] = ru.min(rv);
                }
            }
        }
    }
    let mut kept = Vec::new();
    for g in 0..total {
        if matched[g] && find(&mut parent, g) == g {
            let d = offsets.iter().rposition(|&o| o <= g).unwrap();
            kept.push(per_detector[d][g - offsets[d]]);
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    MultiClass,
    MultiInstance,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::MultiClass => "multi-class",
            PromptKind::MultiInstance => "multi-instance",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub id: String,
    pub kind: PromptKind,
    pub category: String,
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub text: String,
}

impl BenchmarkPrompt {
    /// `k` for multi-class prompts, `n` for multi-instance prompts.
    pub fn size_param(&self) -> usize {
        match self.kind {
            PromptKind::MultiClass => self.classes.len(),
            PromptKind::MultiInstance => self.counts[0],
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig { text: self.text.clone(), classes: self.classes.clone(), counts: self.counts.clone() }
    }

    /// Infer the benchmark kind from a run's prompt.
    pub fn from_prompt_config(id: &str, p: &PromptConfig) -> Result<Self> {
        let kind = match (p.classes.len(), p.counts.as_slice()) {
            (1, [n]) if *n >= 2 => PromptKind::MultiInstance,
            (k, counts) if k >= 2 && counts.iter().all(|&c| c == 1) => PromptKind::MultiClass,
            _ => return config(format!("prompt '{}' is neither multi-class nor multi-instance", p.text)),
        };
        Ok(Self {
            id: id.to_string(),
            kind,
            category: String::new(),
            classes: p.classes.clone(),
            counts: p.counts.clone(),
            text: p.text.clone(),
        })
    }
}

/// Percentage of requested classes with at least one kept detection.
pub fn multiclass_accuracy(kept: &[Detection], prompt: &BenchmarkPrompt) -> Result<f64> {
    if prompt.kind != PromptKind::MultiClass {
        return contract("multi-class accuracy needs a multi-class prompt");
    }
    let k = prompt.classes.len();
    let found = (0..k).filter(|&c| kept.iter().any(|d| d.class_index == c)).count();
    Ok(100.0 * found as f64 / k as f64)
}

/// Percentage of requested instances detected, capped at the requested count.
pub fn multiinstance_accuracy(kept: &[Detection], prompt: &BenchmarkPrompt) -> Result<f64> {
    if prompt.kind != PromptKind::MultiInstance {
        return contract("multi-instance accuracy needs a multi-instance prompt");
    }
    let n = prompt.counts[0];
    let found = kept.iter().filter(|d| d.class_index == 0).count().min(n);
    Ok(100.0 * found as f64 / n as f64)
}

pub fn accuracy(kept: &[Detection], prompt: &BenchmarkPrompt) -> Result<f64> {
    match prompt.kind {
        PromptKind::MultiClass => multiclass_accuracy(kept, prompt),
        PromptKind::MultiInstance => multiinstance_accuracy(kept, prompt),
    }
}

/// Run the three detectors on the 8-bit image and vote.
pub fn detect_ensemble(image: &Image, palette: &[Color], background: Color) -> Result<Vec<Detection>> {
    let q = image.quantized();
    let lists = DETECTORS
        .iter()
        .enumerate()
        .map(|(i, p)| detect(&q, palette, background, p, i))
        .collect::<Result<Vec<_>>>()?;
    ensemble_filter(&lists, IOU_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub categories: Vec<Category>,
}

impl CategoryTable {
    fn from_lists(lists: &[(&str, &[&str])]) -> Self {
        Self {
            categories: lists
                .iter()
                .map(|(name, classes)| Category {
                    name: name.to_string(),
                    classes: classes.iter().map(|c| c.to_string()).collect(),
                })
                .collect(),
        }
    }

    /// The four countable COCO categories used for the benchmark.
    pub fn coco() -> Self {
        Self::from_lists(&[
            ("animal", &["cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"]),
            ("vehicle", &["bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat"]),
            (
                "sports",
                &[
                    "skateboard",
                    "snowboard",
                    "skis",
                    "sports ball",
                    "baseball bat",
                    "baseball glove",
                    "tennis racket",
                    "surfboard",
                    "kite",
                    "frisbee",
                ],
            ),
            (
                "food",
                &["banana", "apple", "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake"],
            ),
        ])
    }

    /// One five-class category for desk-scale runs.
    pub fn toy() -> Self {
        Self::from_lists(&[("animal", &["cat", "dog", "horse", "sheep", "cow"])])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub prompts: Vec<BenchmarkPrompt>,
    pub seed: u64,
    pub fraction: f64,
    pub table: CategoryTable,
}

impl BenchmarkSuite {
    pub fn extend(&mut self, other: BenchmarkSuite) {
        self.prompts.extend(other.prompts);
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Number of combinations kept when sampling `fraction` of `count`.
pub fn sample_count(fraction: f64, count: usize) -> usize {
    (((fraction * count as f64) + 1e-9).floor() as usize).clamp(1.min(count), count)
}

const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

pub fn multiclass_text(classes: &[String]) -> String {
    let items: Vec<String> = classes.iter().map(|c| format!("a {c}")).collect();
    match items.len() {
        1 => format!("A photo of {}.", items[0]),
        2 => format!("A photo of {} and {}.", items[0], items[1]),
        n => format!("A photo of {}, and {}.", items[..n - 1].join(", "), items[n - 1]),
    }
}

pub fn multiinstance_text(class: &str, n: usize) -> String {
    let count = NUMBER_WORDS.get(n).map(|s| s.to_string()).unwrap_or_else(|| n.to_string());
    format!("A photo of {count} {class}s.")
}

/// Multi-class: sample a fraction of the `size_param`-combinations of every
/// category. Multi-instance: one prompt per class with `size_param` instances.
pub fn build_benchmark(
    table: &CategoryTable,
    kind: PromptKind,
    size_param: usize,
    fraction: f64,
    seed: u64,
) -> Result<BenchmarkSuite> {
    if table.categories.is_empty() {
        return config("category table is empty");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config(format!("fraction {fraction} outside (0, 1]"));
    }
    if !(2..=5).contains(&size_param) {
        return config(format!("size parameter {size_param} outside 2..=5"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::new();
    for cat in &table.categories {
        match kind {
            PromptKind::MultiClass => {
                if size_param > cat.classes.len() {
                    return config(format!("k = {size_param} exceeds the {} classes of '{}'", cat.classes.len(), cat.name));
                }
                let combos = combinations(cat.classes.len(), size_param);
                let m = sample_count(fraction, combos.len());
                let mut picked = rand::seq::index::sample(&mut rng, combos.len(), m).into_vec();
                picked.sort_unstable();
                for ci in picked {
                    let classes: Vec<String> = combos[ci].iter().map(|&i| cat.classes[i].clone()).collect();
                    prompts.push(BenchmarkPrompt {
                        id: format!("mc-{}-k{size_param}-{ci:03}", cat.name),
                        kind,
                        category: cat.name.clone(),
                        text: multiclass_text(&classes),
                        counts: vec![1; classes.len()],
                        classes,
                    });
                }
            }
            PromptKind::MultiInstance => {
                for class in &cat.classes {
                    prompts.push(BenchmarkPrompt {
                        id: format!("mi-{}-{}-n{size_param}", cat.name, class.replace(' ', "_")),
                        kind,
                        category: cat.name.clone(),
                        text: multiinstance_text(class, size_param),
                        classes: vec![class.clone()],
                        counts: vec![size_param],
                    });
                }
            }
        }
    }
    Ok(BenchmarkSuite { prompts, seed, fraction, table: table.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableId {
    Toy,
    Coco,
}

impl TableId {
    pub fn table(self) -> CategoryTable {
        match self {
            TableId::Toy => CategoryTable::toy(),
            TableId::Coco => CategoryTable::coco(),
        }
    }
}

/// Which prompts a suite contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteParams {
    pub table: TableId,
    /// Class counts of the multi-class prompts.
    pub multi_class_k: Vec<usize>,
    /// Instance counts of the multi-instance prompts.
    pub multi_instance_n: Vec<usize>,
    /// Fraction of multi-class combinations kept per category.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SuiteParams {
    /// The 20-prompt desk-scale suite: half of the 2- and 3-class combinations
    /// of the toy category plus every class at 2 and 3 instances.
    fn default() -> Self {
        Self { table: TableId::Toy, multi_class_k: vec![2, 3], multi_instance_n: vec![2, 3], fraction: 0.5, seed: 0 }
    }
}

pub fn build_suite(params: &SuiteParams) -> Result<BenchmarkSuite> {
    let table = params.table.table();
    let mut suite = BenchmarkSuite { prompts: Vec::new(), seed: params.seed, fraction: params.fraction, table: table.clone() };
    for (i, &k) in params.multi_class_k.iter().enumerate() {
        suite.extend(build_benchmark(&table, PromptKind::MultiClass, k, params.fraction, params.seed.wrapping_add(i as u64))?);
    }
    for &n in &params.multi_instance_n {
        suite.extend(build_benchmark(&table, PromptKind::MultiInstance, n, 1.0, params.seed)?);
    }
    if suite.prompts.is_empty() {
        return config("benchmark suite has no prompts");
    }
    Ok(suite)
}

pub fn synthetic_suite(seed: u64) -> Result<BenchmarkSuite> {
    build_suite(&SuiteParams { seed, ..SuiteParams::default() })
}

/// One named configuration of an ablation grid; its prompt is replaced per
/// suite prompt.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub id: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub config_id: String,
    pub prompt_id: String,
    pub seed: u64,
    pub kind: PromptKind,
    pub size_param: usize,
    /// `None` when the run failed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub config_id: String,
    pub kind: PromptKind,
    /// `None` aggregates over every size.
    pub size_param: Option<usize>,
    pub mean_accuracy: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<AggregateRow>,
}

type GroupKey = (usize, PromptKind, Option<usize>);

impl EvalResult {
    pub fn from_rows(rows: Vec<EvalRow>, config_order: &[String]) -> Self {
        // (config rank, kind, size) -> (accuracy sum, scored runs, failed runs)
        let mut groups: BTreeMap<GroupKey, (f64, usize, usize)> = BTreeMap::new();
        let order = |id: &str| config_order.iter().position(|c| c == id).unwrap_or(usize::MAX);
        for r in &rows {
            for size in [Some(r.size_param), None] {
                let e = groups.entry((order(&r.config_id), r.kind, size)).or_insert((0.0, 0, 0));
                match r.accuracy {
                    Some(a) => {
                        e.0 += a;
                        e.1 += 1;
                    }
                    None => e.2 += 1,
                }
            }
        }
        let aggregates = groups
            .into_iter()
            .map(|((ci, kind, size), (sum, n, failed))| AggregateRow {
                config_id: config_order.get(ci).cloned().unwrap_or_default(),
                kind,
                size_param: size,
                mean_accuracy: if n > 0 { sum / n as f64 } else { f64::NAN },
                runs: n,
                failed,
            })
            .collect();
        Self { rows, aggregates }
    }

    /// Mean accuracy of `config_id` over every size of `kind`.
    pub fn mean(&self, config_id: &str, kind: PromptKind) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.config_id == config_id && a.kind == kind && a.size_param.is_none())
            .map(|a| a.mean_accuracy)
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_id", "prompt_id", "seed", "kind", "size_param", "accuracy"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.config_id.clone(),
                r.prompt_id.clone(),
                r.seed.to_string(),
                r.kind.to_string(),
                r.size_param.to_string(),
                r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "failed".into()),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| crate::IsacError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn aggregates_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_id", "kind", "size_param", "mean_accuracy", "runs", "failed"]).map_err(csv_err)?;
        for a in &self.aggregates {
            w.write_record([
                a.config_id.clone(),
                a.kind.to_string(),
                a.size_param.map(|s| s.to_string()).unwrap_or_else(|| "all".into()),
                format!("{:.4}", a.mean_accuracy),
                a.runs.to_string(),
                a.failed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| crate::IsacError::Io(std::io::Error::other(e.to_string())))
    }
}

/// Score the run stored in `dir` from its manifest, image and ground truth.
pub fn evaluate_run_dir(dir: &Path) -> Result<EvalRow> {
    let manifest = read_manifest(dir)?;
    let image = Image::from_ppm(&std::fs::read(dir.join(IMAGE_FILE))?)?;
    let gt: SceneSpec = serde_json::from_slice(&std::fs::read(dir.join(GROUND_TRUTH_FILE))?)
        .map_err(|e| crate::IsacError::Config(format!("bad ground truth in {}: {e}", dir.display())))?;
    let prompt_id = if manifest.labels.prompt_id.is_empty() {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        manifest.labels.prompt_id.clone()
    };
    let prompt = BenchmarkPrompt::from_prompt_config(&prompt_id, &manifest.config.prompt)?;
    let kept = detect_ensemble(&image, &gt.palette, gt.background)?;
    Ok(EvalRow {
        config_id: manifest.labels.config_id.clone(),
        prompt_id,
        seed: manifest.seed,
        kind: prompt.kind,
        size_param: prompt.size_param(),
        accuracy: Some(accuracy(&kept, &prompt)?),
        error: None,
    })
}

/// Every directory under `root` (inclusive) holding a manifest, in path order.
pub fn find_run_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Rescore every stored run under `root`. Runs that cannot be scored are
/// returned as warnings instead of rows.
pub fn evaluate_runs(root: &Path) -> Result<(EvalResult, Vec<String>)> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for dir in find_run_dirs(root)? {
        match evaluate_run_dir(&dir) {
            Ok(row) => rows.push(row),
            Err(e) => warnings.push(format!("{}: {e}", dir.display())),
        }
    }
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.config_id) {
            order.push(r.config_id.clone());
        }
    }
    Ok((EvalResult::from_rows(rows, &order), warnings))
}

/// Run `config` on `prompt` and score the decoded image.
pub fn run_and_score(config: &RunConfig, prompt: &BenchmarkPrompt, seed: u64, out: Option<&Path>, labels: &RunLabels) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.prompt = prompt.prompt_config();
    let record = run_with(&cfg, seed, &RunOptions::default())?;
    if let Some(dir) = out {
        write_run_dir(dir, &record, labels)?;
    }
    let gt = record
        .ground_truth
        .as_ref()
        .ok_or_else(|| crate::IsacError::Unsupported("scoring needs a backend with a palette".into()))?;
    let kept = detect_ensemble(&record.image, &gt.palette, gt.background)?;
    accuracy(&kept, prompt)
}

/// Every `(cell, prompt, seed)` run, scored and aggregated per cell. Failed
/// runs are kept as rows and excluded from the means. With `out`, each run is
/// written to `out/<cell>/<prompt>/seed-<seed>`.
pub fn ablation_run(cells: &[AblationCell], suite: &BenchmarkSuite, seeds: &[u64], out: Option<&Path>) -> EvalResult {
    let jobs: Vec<(&AblationCell, &BenchmarkPrompt, u64)> = cells
        .iter()
        .flat_map(|c| suite.prompts.iter().flat_map(move |p| seeds.iter().map(move |&s| (c, p, s))))
        .collect();
    let rows: Vec<EvalRow> = jobs
        .par_iter()
        .map(|&(cell, prompt, seed)| {
            let labels = RunLabels { config_id: cell.id.clone(), prompt_id: prompt.id.clone() };
            let dir = out.map(|o| o.join(&cell.id).join(&prompt.id).join(format!("seed-{seed}")));
            let result = run_and_score(&cell.config, prompt, seed, dir.as_deref(), &labels);
            EvalRow {
                config_id: cell.id.clone(),
                prompt_id: prompt.id.clone(),
                seed,
                kind: prompt.kind,
                size_param: prompt.size_param(),
                accuracy: result.as_ref().ok().copied(),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect();
    let order: Vec<String> = cells.iter().map(|c| c.id.clone()).collect();
    EvalResult::from_rows(rows, &order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_counts() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(9, 3).len(), 84);
        assert_eq!(combinations(8, 4).len(), 70);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn prompt_texts() {
        let cls: Vec<String> = ["dog", "cat", "horse", "cow", "sheep"].iter().map(|s| s.to_string()).collect();
        assert_eq!(multiclass_text(&cls), "A photo of a dog, a cat, a horse, a cow, and a sheep.");
        assert_eq!(multiclass_text(&cls[..2]), "A photo of a dog and a cat.");
        assert_eq!(multiinstance_text("cat", 5), "A photo of five cats.");
    }

    #[test]
    fn iou_arithmetic() {
        let a = BoundingBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        let b = BoundingBox { x0: 2, y0: 0, x1: 6, y1: 4 };
        assert!((a.iou(&b) - 8.0 / 24.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
    }
}
