//! The class-sensitivity benchmark on two reference explainers.
//!
//! Four images are composed into a 2x2 grid with exactly one tile positive
//! for the probed class; the score is the fraction of total absolute
//! attribution falling on that tile. A class-blind explainer lands at chance
//! (0.25), a perfectly class-specific one at 1.0 — the two explainers below
//! pin both ends of the scale.

use ndarray::ArrayD;

use attrinet::data::{class_region, generate_synthetic_dataset, SyntheticSpec};
use attrinet::eval::class_sensitivity;

fn main() {
    let mut spec = SyntheticSpec::new(160, 32, 32, 4, 11);
    spec.prevalence = vec![0.4; 4];
    let ds = generate_synthetic_dataset::<f32>(&spec).expect("valid spec");

    println!("class    constant  region-oracle");
    let mut const_macro = 0.0;
    let mut oracle_macro = 0.0;
    for class in 0..4 {
        // Class-blind: the same flat map for every input.
        let mut constant = |img: &ArrayD<f32>| ArrayD::from_elem(img.raw_dim(), 1.0f32);
        let s_const = class_sensitivity(&mut constant, &ds, class, 100, 0).expect("grids build");

        // Class-specific: find the tile whose class-`class` region is
        // brightest (only the positive tile carries this class's shape
        // there) and attribute everything to that region.
        let mut oracle = |img: &ArrayD<f32>| {
            let (gh, gw) = (img.shape()[0], img.shape()[1]);
            let (th, tw) = (gh / 2, gw / 2);
            let (y0, x0, rh, rw) = class_region(class, 4, th, tw);
            let mut best = (0usize, f32::NEG_INFINITY);
            for slot in 0..4 {
                let (oy, ox) = (th * (slot / 2), tw * (slot % 2));
                let mut sum = 0.0f32;
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        sum += img[[oy + y, ox + x]];
                    }
                }
                if sum > best.1 {
                    best = (slot, sum);
                }
            }
            let (oy, ox) = (th * (best.0 / 2), tw * (best.0 % 2));
            let mut m = ArrayD::zeros(img.raw_dim());
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m[[oy + y, ox + x]] = 1.0f32;
                }
            }
            m
        };
        let s_oracle = class_sensitivity(&mut oracle, &ds, class, 100, 0).expect("grids build");

        println!("{:<8} {:.3}     {:.3}", ds.class_names[class], s_const, s_oracle);
        const_macro += s_const / 4.0;
        oracle_macro += s_oracle / 4.0;
    }
    println!("macro    {const_macro:.3}     {oracle_macro:.3}");
    println!("\nchance level is 0.25; a trained model should sit well above it");
}
