//! Runs the schedule, loss and baseline grids on the synthetic suite and
//! prints mean accuracies. Pass a JSON scene config as the first argument to
//! override the defaults, and the seed count as the second.

use std::time::Instant;

use isac_core::engine::{PromptConfig, RunConfig};
use isac_core::eval::{ablation_run, synthetic_suite, AblationCell, PromptKind};
use isac_core::losses::{LossKind, ScheduleId};
use isac_core::toybench::SceneConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene: SceneConfig = args.get(1).map(|s| serde_json::from_str(s).expect("scene config")).unwrap_or_default();
    let n_seeds: u64 = args.get(2).map(|s| s.parse().expect("seed count")).unwrap_or(5);
    let suite = synthetic_suite(0).expect("suite");
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let cell = |id: &str, schedule, loss, eta| {
        let mut config = RunConfig::new(PromptConfig::default());
        config.scene = scene.clone();
        config.schedule = schedule;
        config.loss = loss;
        config.eta = eta;
        AblationCell { id: id.to_string(), config }
    };
    let only: Option<Vec<String>> = args.get(3).map(|s| s.split(',').map(String::from).collect());
    let verbose = std::env::var("VERBOSE").is_ok();
    let cells = vec![
        cell("baseline", ScheduleId::E, LossKind::Mpo, 0.0),
        cell("A", ScheduleId::A, LossKind::Mpo, 0.01),
        cell("B", ScheduleId::B, LossKind::Mpo, 0.01),
        cell("C", ScheduleId::C, LossKind::Mpo, 0.01),
        cell("D", ScheduleId::D, LossKind::Mpo, 0.01),
        cell("E", ScheduleId::E, LossKind::Mpo, 0.01),
        cell("E-MAE", ScheduleId::E, LossKind::Mae, 0.01),
        cell("E-KL", ScheduleId::E, LossKind::Kl, 0.01),
        cell("E-IoU", ScheduleId::E, LossKind::Iou, 0.01),
    ];
    let cells: Vec<AblationCell> = cells.into_iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))).collect();
    let start = Instant::now();
    let result = ablation_run(&cells, &suite, &seeds, None);
    println!("{:<10} {:>8} {:>8} {:>8} {:>7}", "config", "MC", "MI", "all", "failed");
    for c in &cells {
        let mc = result.mean(&c.id, PromptKind::MultiClass).unwrap_or(f64::NAN);
        let mi = result.mean(&c.id, PromptKind::MultiInstance).unwrap_or(f64::NAN);
        let failed = result.rows.iter().filter(|r| r.config_id == c.id && r.accuracy.is_none()).count();
        println!("{:<10} {:>8.2} {:>8.2} {:>8.2} {:>7}", c.id, mc, mi, (mc + mi) / 2.0, failed);
    }
    if verbose {
        for r in result.rows.iter().filter(|r| r.accuracy != Some(100.0)) {
            println!("  {} {} seed {} -> {:?}", r.config_id, r.prompt_id, r.seed, r.accuracy);
        }
    }
    if let Some(r) = result.rows.iter().find(|r| r.error.is_some()) {
        println!("first error: {}", r.error.as_deref().unwrap_or_default());
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}
