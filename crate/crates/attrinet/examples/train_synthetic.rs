//! Train a small model end to end on synthetic shapes and report test
//! metrics.
//!
//! The run is deliberately tiny (16x16 images, two classes, a few dozen
//! class visits) so it finishes in seconds; the same `train` call scales to
//! the full configuration by changing only the numbers below.

use attrinet::data::{generate_synthetic_dataset, split_dataset, SyntheticSpec};
use attrinet::eval::{evaluate_model, EvalSettings};
use attrinet::training::{train, TrainOutcome, TrainingConfig};

fn main() {
    let mut spec = SyntheticSpec::new(120, 16, 16, 2, 3);
    spec.prevalence = vec![0.5, 0.5];
    let ds = generate_synthetic_dataset::<f32>(&spec).expect("valid spec");
    let (train_ds, test_ds, val_ds) =
        split_dataset(&ds, (0.7, 0.15, 0.15), 1).expect("ratios are sane");

    let mut cfg = TrainingConfig::new(2, 16, 16, 40, 5);
    cfg.base_ch = 4;
    cfg.n_res = 1;
    cfg.critic_base_ch = 4;
    cfg.critic_depth = 2;
    cfg.gamma = 8;
    cfg.batch_size = 2;

    let (state, metrics, outcome) = train(cfg, &train_ds, &val_ds).expect("training runs");
    assert!(matches!(outcome, TrainOutcome::Completed), "tiny run should not diverge");

    let early: f64 = metrics[..8].iter().map(|m| m.loss_total).sum::<f64>() / 8.0;
    let late: f64 =
        metrics[metrics.len() - 8..].iter().map(|m| m.loss_total).sum::<f64>() / 8.0;
    println!("visits: {}", metrics.len());
    println!("mean generator objective, first 8 visits: {early:>9.2}");
    println!("mean generator objective, last 8 visits:  {late:>9.2}");

    let settings = EvalSettings { n_grids: 40, seed: 0, thresholds: Some(state.thresholds.clone()) };
    let report = evaluate_model(&state.gen, &state.head, &state.store, &test_ds, &settings)
        .expect("evaluation runs");
    println!("\nclass     auc    threshold  sensitivity");
    for c in 0..report.class_names.len() {
        println!(
            "{:<8} {:.3}   {:.3}      {:.3}",
            report.class_names[c], report.auc[c], report.youden_threshold[c], report.sensitivity[c]
        );
    }
    println!("macro    {:.3}              {:.3}", report.macro_auc, report.macro_sensitivity);
}
