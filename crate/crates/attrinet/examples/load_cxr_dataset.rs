//! Load a chest X-ray dataset from a CSV + image tree.
//!
//! Real corpora are too large to ship, so this example first materializes a
//! miniature tree in the standard CheXpert on-disk layout — a labels CSV
//! with per-class float columns and patient-scoped image paths — then loads
//! it through the same code path a real corpus would use.

use std::path::Path;

use image::{GrayImage, Luma};

use attrinet::data::{load_cxr_dataset, CxrLayout, LoadOptions, UncertaintyPolicy};

fn write_image(path: &Path, seed: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let img = GrayImage::from_fn(40, 40, |x, y| Luma([(x as u8) * 3 ^ (y as u8) ^ seed]));
    img.save(path).unwrap();
}

fn main() {
    let root = Path::new("target/examples/load_cxr_dataset");
    std::fs::create_dir_all(root).unwrap();

    // Three studies across two patients; one uncertain (-1) label, one blank.
    let rows = [
        ("train/patient001/study1/view1_frontal.jpg", "1.0", "0.0", 1u8),
        ("train/patient001/study2/view1_frontal.jpg", "0.0", "-1.0", 2),
        ("train/patient002/study1/view1_frontal.jpg", "", "1.0", 3),
    ];
    let mut csv = String::from("Path,Cardiomegaly,Edema\n");
    for (rel, a, b, seed) in rows {
        write_image(&root.join(rel), seed);
        csv.push_str(&format!("{rel},{a},{b}\n"));
    }
    let csv_path = root.join("labels.csv");
    std::fs::write(&csv_path, csv).unwrap();

    let opts = LoadOptions {
        layout: CxrLayout::Chexpert,
        class_names: vec!["Cardiomegaly".into(), "Edema".into()],
        uncertainty: UncertaintyPolicy::Zeros,
        h: 32,
        w: 32,
    };
    let (ds, report) = load_cxr_dataset::<f32>(&csv_path, root, &opts).expect("loads");

    println!(
        "loaded {} samples at {:?}, {} unreadable skipped, {} uncertain dropped",
        ds.len(),
        ds.geometry(),
        report.skipped_unreadable,
        report.dropped_uncertain
    );
    for s in &ds.samples {
        println!(
            "  {:<45} labels {:?} patient {}",
            s.id,
            s.labels,
            s.patient.as_deref().unwrap_or("-")
        );
    }
    println!("\nuncertain (-1) labels became 0 under UncertaintyPolicy::Zeros;");
    println!("blank labels are negative by convention");
}
