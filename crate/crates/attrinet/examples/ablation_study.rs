//! Train the four loss configurations — classification only, plus the
//! adversarial term, plus regularization, plus the center loss — from the
//! same seed, and compare macro AUC and macro class sensitivity.
//!
//! The run here is miniature, so treat the numbers as plumbing proof rather
//! than a finding; at realistic scale the richer loss sets buy sensitivity
//! at roughly constant AUC.

use attrinet::data::{generate_synthetic_dataset, split_dataset, SyntheticSpec};
use attrinet::eval::run_ablation;
use attrinet::training::TrainingConfig;

fn main() {
    let mut spec = SyntheticSpec::new(120, 16, 16, 2, 3);
    spec.prevalence = vec![0.5, 0.5];
    let ds = generate_synthetic_dataset::<f32>(&spec).expect("valid spec");
    let (train_ds, test_ds, val_ds) = split_dataset(&ds, (0.7, 0.15, 0.15), 1).expect("splits");

    let mut base = TrainingConfig::new(2, 16, 16, 25, 5);
    base.base_ch = 4;
    base.n_res = 1;
    base.critic_base_ch = 4;
    base.critic_depth = 2;
    base.gamma = 8;
    base.batch_size = 2;

    let rows =
        run_ablation(&base, &train_ds, &val_ds, &test_ds, 30, 0).expect("all four runs complete");

    println!("losses        macro AUC  macro sensitivity");
    for row in &rows {
        println!("{:<13} {:.3}      {:.3}", row.losses, row.macro_auc, row.macro_sensitivity);
    }
}
