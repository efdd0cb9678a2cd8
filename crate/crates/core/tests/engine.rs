use isac_core::attn::{Latent, PromptSpec};
use isac_core::backend::{AttentionCapture, BackendKind, NoiseSchedule};
use isac_core::engine::{run, run_with, PromptConfig, RunConfig, RunOptions};
use isac_core::output::losses_csv;
use isac_core::IsacError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(text: &str, classes: &[&str], counts: &[usize]) -> RunConfig {
    RunConfig::new(PromptConfig {
        text: text.into(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        counts: counts.to_vec(),
    })
}

fn cat_and_dogs() -> RunConfig {
    config("A photo of a cat and two dogs.", &["cat", "dog"], &[1, 2])
}

#[test]
fn same_seed_gives_identical_records() {
    for backend in [BackendKind::SyntheticScene, BackendKind::SeededAttention] {
        let mut c = cat_and_dogs();
        c.backend = backend;
        c.steps = 20;
        let (a, b) = (run(&c, 9).unwrap(), run(&c, 9).unwrap());
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.final_latent, b.final_latent);
        assert_eq!(a.image, b.image);
        assert_ne!(a.final_latent, run(&c, 10).unwrap().final_latent);
    }
}

#[test]
fn zero_learning_rate_never_moves_the_latent() {
    let mut c = cat_and_dogs();
    c.eta = 0.0;
    let record = run(&c, 1).unwrap();
    assert!(record.steps.iter().all(|s| s.latent_before == s.latent_after));
    c.eta = 0.01;
    let record = run(&c, 1).unwrap();
    assert!(record.steps.iter().any(|s| s.latent_before != s.latent_after));
}

#[test]
fn each_step_updates_once_then_denoises() {
    let record = run(&cat_and_dogs(), 2).unwrap();
    assert_eq!(record.steps.len(), 50);
    let ts: Vec<usize> = record.steps.iter().map(|s| s.report.t).collect();
    assert_eq!(ts, (1..=50).rev().collect::<Vec<_>>());
    for w in record.steps.windows(2) {
        assert_ne!(w[0].latent_after, w[1].latent_before);
    }
}

#[test]
fn hooks_do_not_change_the_forward_pass() {
    let p = PromptSpec::from_text("A photo of a cat and two dogs.", &["cat", "dog"], &[1, 2], 8, 0).unwrap();
    let c = cat_and_dogs();
    let backend = c.build_backend(&p).unwrap();
    let schedule = NoiseSchedule::standard(50).unwrap();
    let x = Latent::gaussian(16, 16, 8, &mut ChaCha8Rng::seed_from_u64(0));
    let mut cap = AttentionCapture::default();
    let with = backend.forward(&x, 30, &schedule, &p, Some(&mut cap)).unwrap();
    let without = backend.forward(&x, 30, &schedule, &p, None).unwrap();
    assert_eq!(with, without);
    assert_eq!(cap.self_layers.len(), backend.layers().len());

    let plain = run(&c, 4).unwrap();
    let dumped = run_with(&c, 4, &RunOptions { dump_timesteps: vec![50, 10] }).unwrap();
    assert_eq!(losses_csv(&plain.steps).unwrap(), losses_csv(&dumped.steps).unwrap());
    assert_eq!(dumped.dumps.iter().map(|d| d.t).collect::<Vec<_>>(), vec![50, 10]);
}

#[test]
fn optimization_lowers_final_instance_loss() {
    let final_ins = |eta: f64| {
        let mut c = config("A photo of three cats.", &["cat"], &[3]);
        c.eta = eta;
        let mut v: Vec<f64> = (0..20).map(|s| run(&c, s).unwrap().steps.last().unwrap().report.l_ins).collect();
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    let (base, isac) = (final_ins(0.0), final_ins(0.01));
    assert!(isac < base, "median final instance loss {isac} vs baseline {base}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cat_and_dogs();
    c.steps = 1;
    assert!(matches!(run(&c, 0), Err(IsacError::Config(_))));
    let mut c = cat_and_dogs();
    c.eta = -0.1;
    assert!(matches!(run(&c, 0), Err(IsacError::Config(_))));
    let mut c = cat_and_dogs();
    c.prompt.counts.pop();
    assert!(matches!(run(&c, 0), Err(IsacError::Config(_))));
}

#[test]
fn config_round_trips_through_json() {
    let c = cat_and_dogs();
    let json = serde_json::to_string(&c).unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.content_hash(), c.content_hash());
    assert!(serde_json::from_str::<RunConfig>(r#"{"stepz": 3}"#).is_err());
}
