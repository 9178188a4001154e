//! Throwaway: trajectory probe at 64x64 — AUC, localization, sensitivity.

use std::time::Instant;

use attrinet::data::{generate_synthetic_dataset, split_dataset, Dataset, SyntheticSpec};
use attrinet::eval::{class_scores, class_sensitivity, localization_score, roc_auc};
use attrinet::training::{train_class_visit, TrainState, TrainingConfig};
use ndarray::{ArrayD, IxDyn};

fn val_auc(state: &TrainState<f32>, ds: &Dataset<f32>, cap: usize) -> Vec<f64> {
    let subset = Dataset {
        samples: ds.samples[..ds.samples.len().min(cap)].to_vec(),
        class_names: ds.class_names.clone(),
    };
    (0..ds.num_classes())
        .map(|c| {
            let (scores, labels) =
                class_scores(&state.gen, &state.head, &state.store, &subset, c);
            roc_auc(&scores, &labels).unwrap()
        })
        .collect()
}

fn map_for(state: &TrainState<f32>, img: &ArrayD<f32>, class: usize) -> ArrayD<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let batch = img.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap();
    let maps = attrinet::taskgen::attribution_maps(&state.gen, &state.store, &batch, &[class]);
    maps.into_shape_with_order(IxDyn(&[h, w])).unwrap()
}

fn val_localization(state: &TrainState<f32>, ds: &Dataset<f32>, per_class: usize) -> Vec<f64> {
    (0..ds.num_classes())
        .map(|c| {
            let pos: Vec<_> =
                ds.samples.iter().filter(|s| s.labels[c] == 1).take(per_class).collect();
            let mut sum = 0.0;
            for s in &pos {
                let img = s.image.clone().into_dyn();
                let map = map_for(state, &img, c);
                sum += localization_score(&map, &s.masks.as_ref().unwrap()[c]).unwrap();
            }
            sum / pos.len().max(1) as f64
        })
        .collect()
}

fn val_sensitivity(state: &TrainState<f32>, ds: &Dataset<f32>, n_grids: usize) -> Vec<f64> {
    (0..ds.num_classes())
        .map(|c| {
            let mut explain = |img: &ArrayD<f32>| map_for(state, img, c);
            class_sensitivity(&mut explain, ds, c, n_grids, 0).unwrap()
        })
        .collect()
}

fn main() {
    let mut spec = SyntheticSpec::new(1200, 64, 64, 5, 42);
    spec.prevalence = vec![0.5; 5];
    let ds = generate_synthetic_dataset::<f32>(&spec).unwrap();
    let (tr, _, va) = split_dataset(&ds, (0.8, 0.1, 0.1), 0).unwrap();

    let mut cfg = TrainingConfig::new(5, 64, 64, 90, 7);
    cfg.base_ch = 10;
    cfg.critic_base_ch = 16;
    cfg.critic_depth = 5;
    cfg.gamma = 4;
    let mut state = TrainState::<f32>::new(cfg).unwrap();

    let t0 = Instant::now();
    for cycle in 0..90 {
        for class in 0..5 {
            train_class_visit(&mut state, &tr, class).unwrap();
        }
        if (cycle + 1) % 15 == 0 {
            let aucs = val_auc(&state, &va, 120);
            let locs = val_localization(&state, &va, 20);
            let sens = val_sensitivity(&state, &va, 12);
            let two = |v: &[f64]| {
                v.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
            };
            println!(
                "cycle {:3} {:5.1}m AUC {:?} min {:.2} | loc {:?} | sens {:?} mac {:.2}",
                cycle + 1,
                t0.elapsed().as_secs_f64() / 60.0,
                two(&aucs),
                aucs.iter().cloned().fold(f64::INFINITY, f64::min),
                two(&locs),
                two(&sens),
                sens.iter().sum::<f64>() / 5.0
            );
        }
    }
}
