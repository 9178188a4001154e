//! Export the model's global interpretation: per-class positive and
//! negative attribution centers, and the head's weight grid rendered at map
//! resolution.
//!
//! The centers summarize what attribution maps look like for each label
//! polarity; the weight grid shows where in the image the head actually
//! looks when it scores a class. Together they describe the model's global
//! behaviour without reference to any single input.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use attrinet::data::{generate_synthetic_dataset, split_dataset, SyntheticSpec};
use attrinet::training::{train, TrainingConfig};
use attrinet::viz::{render_map, save_png, upscale};

fn main() {
    let mut spec = SyntheticSpec::new(120, 16, 16, 2, 3);
    spec.prevalence = vec![0.5, 0.5];
    let ds = generate_synthetic_dataset::<f32>(&spec).expect("valid spec");
    let (train_ds, _test_ds, val_ds) = split_dataset(&ds, (0.7, 0.15, 0.15), 1).expect("splits");

    let mut cfg = TrainingConfig::new(2, 16, 16, 40, 5);
    cfg.base_ch = 4;
    cfg.n_res = 1;
    cfg.critic_base_ch = 4;
    cfg.critic_depth = 2;
    cfg.gamma = 8;
    cfg.batch_size = 2;
    let (state, _, _) = train(cfg, &train_ds, &val_ds).expect("training runs");

    let out = Path::new("target/examples/export_global");
    let weights = state.store.value(state.head.w);
    let (ph, pw) = (state.head.pooled_h, state.head.pooled_w);

    for class in 0..2 {
        for (which, map) in [
            ("center_pos", &state.centers.pos[class]),
            ("center_neg", &state.centers.neg[class]),
        ] {
            let (img, maxabs) = render_map(map).expect("2-d center");
            let path = out.join(format!("class{class}_{which}.png"));
            save_png(&upscale(&img, 8), &path).expect("png writes");
            println!("class{class} {which:<11} max|value| {maxabs:.4}  {}", path.display());
        }

        let row: Vec<f32> = (0..ph * pw).map(|i| weights[[class, i]]).collect();
        let grid = ArrayD::from_shape_vec(IxDyn(&[ph, pw]), row).expect("weight grid");
        let (img, maxabs) = render_map(&grid).expect("2-d grid");
        let path = out.join(format!("class{class}_weights.png"));
        save_png(&upscale(&img, 8 * state.head.gamma as u32), &path).expect("png writes");
        println!("class{class} weights     max|value| {maxabs:.4}  {}", path.display());
    }
}
