//! Produce per-class explanation panels for one image: input, attribution
//! map on the diverging colormap, and the counterfactual, annotated with the
//! predicted probability and decision threshold.
//!
//! The attribution map is the explanation — the classification head sees
//! nothing else — so the panel shows exactly the evidence behind the number.

use std::path::Path;

use ndarray::{Axis, IxDyn};

use attrinet::data::{generate_synthetic_dataset, split_dataset, SyntheticSpec};
use attrinet::head::predict_all;
use attrinet::taskgen::{counterfactual, maps_for_all_classes};
use attrinet::training::{train, TrainingConfig};
use attrinet::viz::{explanation_panel, save_png};

fn main() {
    let mut spec = SyntheticSpec::new(120, 16, 16, 2, 3);
    spec.prevalence = vec![0.5, 0.5];
    let ds = generate_synthetic_dataset::<f32>(&spec).expect("valid spec");
    let (train_ds, test_ds, val_ds) = split_dataset(&ds, (0.7, 0.15, 0.15), 1).expect("splits");

    let mut cfg = TrainingConfig::new(2, 16, 16, 40, 5);
    cfg.base_ch = 4;
    cfg.n_res = 1;
    cfg.critic_base_ch = 4;
    cfg.critic_depth = 2;
    cfg.gamma = 8;
    cfg.batch_size = 2;
    let (state, _, _) = train(cfg, &train_ds, &val_ds).expect("training runs");

    // Explain the first class-0-positive test image.
    let sample = test_ds
        .samples
        .iter()
        .find(|s| s.labels[0] == 1)
        .expect("test fold has a class-0 positive");
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let batch = sample
        .image
        .clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("image reshapes");

    let maps = maps_for_all_classes(&state.gen, &state.store, &batch);
    let probs = predict_all(&state.gen, &state.head, &state.store, &batch);

    let out = Path::new("target/examples/explain_image");
    println!("sample {} (labels {:?})", sample.id, sample.labels);
    for class in 0..2 {
        let map = maps
            .index_axis(Axis(0), class)
            .to_owned()
            .into_shape_with_order(IxDyn(&[h, w]))
            .expect("map reshapes");
        let cf = counterfactual(&sample.image, &map);
        let threshold = state.thresholds[class];
        let annotation = format!("class{class} p={:.2} ({:.2})", probs[class], threshold);
        let panel =
            explanation_panel(&sample.image, &map, &cf, &annotation, 8).expect("panel renders");
        let path = out.join(format!("class{class}.png"));
        save_png(&panel, &path).expect("png writes");
        println!("  {annotation}  ->  {}", path.display());
    }
}
