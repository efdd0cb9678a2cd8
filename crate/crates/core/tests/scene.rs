use std::f64::consts::PI;

use isac_core::attn::{Latent, PromptSpec};
use isac_core::backend::{Denoiser, LayerSpec, NoiseSchedule};
use isac_core::engine::{capture_attention, run, PromptConfig, RunConfig};
use isac_core::eval::detect_ensemble;
use isac_core::image::Image;
use isac_core::losses::{schedule_weights, LossKind, ScheduleId, StepContext, StepSettings};
use isac_core::toybench::{
    build_scene_denoiser, build_seeded_denoiser, default_palette, extract_ground_truth, render_scene, SceneDenoiser,
    SceneInstance, SceneSpec,
};

const BG: [f64; 3] = [0.05, 0.05, 0.05];

fn prompt(text: &str, classes: &[&str], counts: &[usize]) -> PromptSpec {
    PromptSpec::from_text(text, classes, counts, 8, 0).unwrap()
}

fn scene(backend: &SceneDenoiser, blobs: &[(usize, [f64; 2], f64)]) -> SceneSpec {
    let palette = backend.scene_from(&Latent::zeros(16, 16, 8)).palette;
    let k = palette.len();
    let instances = blobs.iter().map(|&(c, center, r)| SceneInstance::solid(c, center, r, k)).collect();
    SceneSpec::new(instances, palette, BG).unwrap()
}

fn step_t(backend: &SceneDenoiser, p: &PromptSpec, x: &Latent) -> StepContext {
    let schedule = NoiseSchedule::standard(50).unwrap();
    let cap = capture_attention(x, 50, backend, &schedule, p).unwrap();
    let settings =
        StepSettings { weights: schedule_weights(ScheduleId::C, 50, 50).unwrap(), kind: LossKind::Mpo, cluster_seed: 1 };
    StepContext::build(cap, p, (16, 16), settings, 50, None).unwrap()
}

fn components(img: &Image, bg: [f64; 3]) -> usize {
    let (h, w) = (img.height(), img.width());
    let fg = |r: usize, c: usize| img.get(r, c) != bg;
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || !fg(start / w, start % w) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut push = |rr: usize, cc: usize| {
                let j = rr * w + cc;
                if !seen[j] && fg(rr, cc) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < h {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < w {
                push(r, c + 1);
            }
        }
    }
    count
}

#[test]
fn far_blobs_barely_attend_to_each_other() {
    let p = prompt("A photo of two cats.", &["cat"], &[2]);
    let be = build_scene_denoiser(&p, 0).unwrap();
    let x = be.encode(&scene(&be, &[(0, [0.25, 0.25], 0.15), (0, [0.75, 0.75], 0.15)])).unwrap();
    let schedule = NoiseSchedule::standard(50).unwrap();
    let cap = capture_attention(&x, 50, &be, &schedule, &p).unwrap();
    let sa = &cap.self_layers[0].maps[0];
    // Pixel centers at (4.5, 4.5)/16 ≈ 0.28 and (11.5, 11.5)/16 ≈ 0.72.
    let (a, a2, b) = (4 * 16 + 4, 3 * 16 + 4, 11 * 16 + 11);
    assert!(sa[(a, b)] <= 0.05 * sa[(a, a2)], "{} vs {}", sa[(a, b)], sa[(a, a2)]);
}

fn two_cat_loss(be: &SceneDenoiser, p: &PromptSpec, offset: f64) -> f64 {
    let x = be.encode(&scene(be, &[(0, [0.5 - offset, 0.5], 0.15), (0, [0.5 + offset, 0.5], 0.15)])).unwrap();
    step_t(be, p, &x).report.l_ins
}

#[test]
fn coincident_blobs_overlap_at_the_first_step() {
    let p = prompt("A photo of two cats.", &["cat"], &[2]);
    let be = build_scene_denoiser(&p, 0).unwrap();
    let (same, apart) = (two_cat_loss(&be, &p, 0.0), two_cat_loss(&be, &p, 0.3));
    assert!(same > 10.0 * apart, "coincident {same}, apart {apart}");
}

#[test]
fn single_class_has_no_class_loss() {
    let p = prompt("A photo of a cat.", &["cat"], &[1]);
    let be = build_scene_denoiser(&p, 0).unwrap();
    let x = be.encode(&scene(&be, &[(0, [0.5, 0.5], 0.2)])).unwrap();
    assert_eq!(step_t(&be, &p, &x).report.l_cls, 0.0);
}

#[test]
fn instance_loss_grows_as_blobs_approach() {
    let p = prompt("A photo of two cats.", &["cat"], &[2]);
    let be = build_scene_denoiser(&p, 0).unwrap();
    // Separated through touching; once discs overlap the clustering of the
    // merged region decides the value, so only the coincident end is checked.
    let losses: Vec<f64> = [0.3, 0.22, 0.15, 0.0].iter().map(|&off| two_cat_loss(&be, &p, off)).collect();
    assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
}

#[test]
fn disc_area_matches_analytic() {
    let spec = SceneSpec::new(vec![SceneInstance::solid(0, [0.5, 0.5], 0.25, 2)], default_palette(2).unwrap(), BG).unwrap();
    let img = render_scene(&spec, 64, 64);
    let colored = img.pixels().iter().filter(|&&c| c != BG).count() as f64;
    let want = PI * (0.25f64 * 64.0).powi(2);
    assert!((colored - want).abs() <= 0.1 * want, "{colored} vs {want}");
}

#[test]
fn disjoint_blobs_form_two_components() {
    let blobs = vec![SceneInstance::solid(0, [0.25, 0.3], 0.15, 2), SceneInstance::solid(1, [0.7, 0.7], 0.2, 2)];
    let spec = SceneSpec::new(blobs, default_palette(2).unwrap(), BG).unwrap();
    assert_eq!(components(&render_scene(&spec, 32, 32), BG), 2);
}

#[test]
fn zero_latent_decodes_to_background() {
    let p = prompt("A photo of a cat and a dog.", &["cat", "dog"], &[1, 1]);
    let be = build_scene_denoiser(&p, 4).unwrap();
    let img = be.decode(&Latent::zeros(16, 16, 8));
    let bg = be.scene_from(&Latent::zeros(16, 16, 8)).background;
    assert!(img.pixels().iter().all(|&c| c == bg));
    assert_eq!(img, be.decode(&Latent::zeros(16, 16, 8)));
}

#[test]
fn separated_ground_truth_is_fully_detected() {
    let p = prompt("A photo of three cats.", &["cat"], &[3]);
    let be = build_scene_denoiser(&p, 0).unwrap();
    let spec = scene(&be, &[(0, [0.25, 0.25], 0.15), (0, [0.75, 0.3], 0.15), (0, [0.5, 0.75], 0.15)]);
    let kept = detect_ensemble(&render_scene(&spec, 16, 16), &spec.palette, spec.background).unwrap();
    assert_eq!(kept.len(), 3);
}

#[test]
fn ground_truth_has_one_entry_per_instance() {
    let mut config = RunConfig::new(PromptConfig {
        text: "A photo of a cat and two dogs.".into(),
        classes: vec!["cat".into(), "dog".into()],
        counts: vec![1, 2],
    });
    config.steps = 5;
    let record = run(&config, 0).unwrap();
    assert_eq!(extract_ground_truth(&record).unwrap().instances.len(), 3);

    config.backend = isac_core::backend::BackendKind::SeededAttention;
    let record = run(&config, 0).unwrap();
    assert!(matches!(extract_ground_truth(&record), Err(isac_core::IsacError::Unsupported(_))));
}

#[test]
fn scene_backend_caps_instances_and_classes() {
    assert!(build_scene_denoiser(&prompt("seven cats", &["cat"], &[7]), 0).is_err());
    let five = prompt("a b c d e", &["a", "b", "c", "d", "e"], &[1; 5]);
    assert!(build_scene_denoiser(&five, 0).is_err());
}

#[test]
fn seeded_weights_are_reproducible_and_centered() {
    let plan = [LayerSpec { height: 16, width: 16, heads: 4 }, LayerSpec { height: 8, width: 8, heads: 4 }];
    let a = build_seeded_denoiser((16, 16, 64), &plan, 5).unwrap();
    let b = build_seeded_denoiser((16, 16, 64), &plan, 5).unwrap();
    let c = build_seeded_denoiser((16, 16, 64), &plan, 6).unwrap();
    assert_eq!(a.weight_hash(), b.weight_hash());
    assert_ne!(a.weight_hash(), c.weight_hash());
    let w: Vec<f64> = a.weights().iter().flat_map(|m| m.iter().copied()).collect();
    let n = w.len() as f64;
    assert!(n >= 1e4);
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}
