//! Datasets: synthetic multi-label shape images with ground-truth evidence
//! masks, chest-X-ray-style CSV ingestion, deterministic splitting, and the
//! class-conditional batch sampling the training schedule needs.
//!
//! The synthetic generator is the verification substrate for the whole crate:
//! each class owns a disjoint canonical region of the image and draws its own
//! shape kind there, so "where the evidence is" has an unambiguous answer that
//! attribution maps can be scored against. Labels are independent Bernoulli
//! draws per class, which multi-label training needs (classes must be able to
//! co-occur freely).
//!
//! Directory layout of a persisted synthetic dataset:
//!
//! ```text
//! root/
//!   labels.csv        Path,<class 0>,<class 1>,...   (chexpert-style columns)
//!   images/<id>.png   16-bit grayscale
//!   masks/<id>_c<c>.png   8-bit {0,255}, only for positive classes
//! ```

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grad::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("label csv {path} has no column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },
    #[error("dataset is empty")]
    Empty,
    #[error("no {polarity} samples for class {class}")]
    EmptyPool { class: usize, polarity: &'static str },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// One grayscale image with its multi-label vector and, for synthetic data,
/// per-class ground-truth evidence masks.
#[derive(Debug, Clone)]
pub struct ImageSample<F: Scalar> {
    /// `(H, W)`, every value in `[-1, 1]`.
    pub image: ArrayD<F>,
    /// One 0/1 entry per class.
    pub labels: Vec<u8>,
    /// For synthetic data: `masks[c]` marks the pixels of class `c`'s shape;
    /// non-empty exactly when `labels[c] == 1`.
    pub masks: Option<Vec<ArrayD<u8>>>,
    pub id: String,
    /// Grouping key for splits; samples of one patient never cross folds.
    pub patient: Option<String>,
}

/// An ordered, immutable collection of samples sharing geometry and classes.
#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    pub samples: Vec<ImageSample<F>>,
    pub class_names: Vec<String>,
}

impl<F: Scalar> Dataset<F> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image geometry `(h, w)` shared by every sample.
    pub fn geometry(&self) -> (usize, usize) {
        let s = self.samples.first().expect("geometry of empty dataset");
        (s.image.shape()[0], s.image.shape()[1])
    }

    /// Check every structural invariant; returns the first violation found.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::Empty);
        }
        let c = self.num_classes();
        let (h, w) = self.geometry();
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId { id: s.id.clone() });
            }
            if s.image.shape() != [h, w] {
                return Err(DataError::InvalidData(format!(
                    "sample {} has shape {:?}, expected {h}x{w}",
                    s.id,
                    s.image.shape()
                )));
            }
            if s.labels.len() != c {
                return Err(DataError::InvalidData(format!(
                    "sample {} has {} labels, expected {c}",
                    s.id,
                    s.labels.len()
                )));
            }
            if s.labels.iter().any(|&l| l > 1) {
                return Err(DataError::InvalidData(format!("sample {} has non-binary label", s.id)));
            }
            for &v in s.image.iter() {
                let v = v.to_f64();
                if !(-1.0..=1.0).contains(&v) || !v.is_finite() {
                    return Err(DataError::InvalidData(format!(
                        "sample {} has pixel {v} outside [-1, 1]",
                        s.id
                    )));
                }
            }
            if let Some(masks) = &s.masks {
                if masks.len() != c {
                    return Err(DataError::InvalidData(format!(
                        "sample {} has {} masks, expected {c}",
                        s.id,
                        masks.len()
                    )));
                }
                for (ci, m) in masks.iter().enumerate() {
                    let nonempty = m.iter().any(|&v| v != 0);
                    if nonempty != (s.labels[ci] == 1) {
                        return Err(DataError::InvalidData(format!(
                            "sample {}: mask {ci} nonempty={nonempty} but label={}",
                            s.id, s.labels[ci]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Shape drawn for a class inside its canonical region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Cross,
    Triangle,
    Diamond,
}

impl ShapeKind {
    /// Default assignment: cycle through the kinds in class order.
    pub fn for_class(c: usize) -> ShapeKind {
        use ShapeKind::*;
        [Disc, Square, Cross, Triangle, Diamond][c % 5]
    }

    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Cross => {
                (dy.abs() <= r / 3.0 && dx.abs() <= r) || (dx.abs() <= r / 3.0 && dy.abs() <= r)
            }
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
        }
    }

    /// Radius multiplier that equalizes painted area across kinds (to the
    /// disc's pi r^2), so every class is equally salient: at one radius a
    /// square covers 4r^2 but a triangle only 2r^2, and that imbalance
    /// shows up directly as unequal class difficulty.
    fn area_factor(self) -> f64 {
        match self {
            ShapeKind::Disc => 1.0,
            ShapeKind::Square => 0.8862,
            ShapeKind::Cross => 1.1893,
            ShapeKind::Triangle => 1.2533,
            ShapeKind::Diamond => 1.2533,
        }
    }
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    /// Per-class Bernoulli rate, each strictly inside (0, 1).
    pub prevalence: Vec<f64>,
    /// Per-class shape kind; must have `num_classes` entries.
    pub shapes: Vec<ShapeKind>,
    /// Standard deviation of the additive Gaussian background noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Defaults: prevalence 0.3 everywhere, cycled shapes, noise 0.05.
    pub fn new(n_samples: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_samples,
            h,
            w,
            num_classes,
            prevalence: vec![0.3; num_classes],
            shapes: (0..num_classes).map(ShapeKind::for_class).collect(),
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_samples == 0 {
            return Err(DataError::InvalidSpec("n_samples must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(DataError::InvalidSpec("need at least one class".into()));
        }
        if self.prevalence.len() != self.num_classes || self.shapes.len() != self.num_classes {
            return Err(DataError::InvalidSpec(
                "prevalence and shapes must have one entry per class".into(),
            ));
        }
        if self.prevalence.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(DataError::InvalidSpec("prevalence must be strictly inside (0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::InvalidSpec("noise_std must be nonnegative".into()));
        }
        // Canonical regions exist, are big enough to draw in, and are disjoint.
        let regions: Vec<_> = (0..self.num_classes)
            .map(|c| class_region(c, self.num_classes, self.h, self.w))
            .collect();
        for (c, &(y0, x0, rh, rw)) in regions.iter().enumerate() {
            if rh < 4 || rw < 4 {
                return Err(DataError::InvalidSpec(format!(
                    "class {c} region is {rh}x{rw}; image too small for {} classes",
                    self.num_classes
                )));
            }
            let _ = (y0, x0);
        }
        for a in 0..regions.len() {
            for b in a + 1..regions.len() {
                let (ya, xa, ha, wa) = regions[a];
                let (yb, xb, hb, wb) = regions[b];
                let overlap =
                    ya < yb + hb && yb < ya + ha && xa < xb + wb && xb < xa + wa;
                if overlap {
                    return Err(DataError::InvalidSpec(format!(
                        "class regions {a} and {b} overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Canonical region of a class: a cell of a near-square grid over the image,
/// `(y0, x0, h, w)`.
pub fn class_region(c: usize, num_classes: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let cols = (num_classes as f64).sqrt().ceil() as usize;
    let rows = num_classes.div_ceil(cols);
    let (row, col) = (c / cols, c % cols);
    let y0 = row * h / rows;
    let y1 = (row + 1) * h / rows;
    let x0 = col * w / cols;
    let x1 = (col + 1) * w / cols;
    (y0, x0, y1 - y0, x1 - x0)
}

/// Background gray level the shapes sit on.
const BACKGROUND: f64 = -0.6;

/// Generate the dataset described by `spec`; bit-deterministic in the seed.
pub fn generate_synthetic_dataset<F: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<F>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .expect("noise_std validated above");
    let (h, w, c) = (spec.h, spec.w, spec.num_classes);

    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let labels: Vec<u8> =
            (0..c).map(|ci| u8::from(rng.gen_range(0.0..1.0) < spec.prevalence[ci])).collect();

        // Paint shapes on the background, then add noise over everything.
        let mut values = vec![BACKGROUND; h * w];
        let mut masks: Vec<ArrayD<u8>> =
            (0..c).map(|_| ArrayD::zeros(IxDyn(&[h, w]))).collect();
        for ci in 0..c {
            if labels[ci] == 0 {
                continue;
            }
            let (y0, x0, rh, rw) = class_region(ci, c, h, w);
            let max_r = (rh.min(rw) as f64) / 2.0 - 1.0;
            let r = (max_r * rng.gen_range(0.5..0.78) * spec.shapes[ci].area_factor()).min(max_r);
            let jitter = (max_r - r).max(0.0);
            let cy = y0 as f64 + rh as f64 / 2.0 + rng.gen_range(-1.0..1.0) * jitter * 0.8;
            let cx = x0 as f64 + rw as f64 / 2.0 + rng.gen_range(-1.0..1.0) * jitter * 0.8;
            let intensity = rng.gen_range(0.55..0.9);

            let mut painted = 0usize;
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    if spec.shapes[ci].contains(y as f64 - cy, x as f64 - cx, r) {
                        values[y * w + x] = intensity;
                        masks[ci][[y, x]] = 1;
                        painted += 1;
                    }
                }
            }
            if painted == 0 {
                // Degenerate radius on a tiny grid: guarantee the mask invariant
                // by painting the region's center pixel.
                let (py, px) = (y0 + rh / 2, x0 + rw / 2);
                values[py * w + px] = intensity;
                masks[ci][[py, px]] = 1;
            }
        }

        let image = ArrayD::from_shape_vec(
            IxDyn(&[h, w]),
            values
                .into_iter()
                .map(|v| F::cast((v + noise.sample(&mut rng)).clamp(-1.0, 1.0)))
                .collect(),
        )
        .unwrap();

        samples.push(ImageSample {
            image,
            labels,
            masks: Some(masks),
            id: format!("syn-{idx:06}"),
            patient: None,
        });
    }

    let class_names = (0..c).map(|ci| format!("class{ci}")).collect();
    let ds = Dataset { samples, class_names };
    debug_assert!(ds.validate().is_ok());
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Splits and sampling
// ---------------------------------------------------------------------------

/// Deterministically partition into `(train, test, val)` folds.
///
/// Fold sizes follow the ratios by largest remainder, so 100 samples at
/// `(0.8, 0.1, 0.1)` come out exactly 80/10/10. Samples carrying a patient key
/// are moved as one block: a patient never spans two folds (fold sizes then
/// hold only approximately).
pub fn split_dataset<F: Scalar>(
    ds: &Dataset<F>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>, Dataset<F>), DataError> {
    if ds.samples.is_empty() {
        return Err(DataError::Empty);
    }
    let (r0, r1, r2) = ratios;
    if !((r0 + r1 + r2) - 1.0).abs().lt(&1e-9) || r0 < 0.0 || r1 < 0.0 || r2 < 0.0 {
        return Err(DataError::InvalidData(format!("ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let n = ds.samples.len();

    // Group indices: one group per patient, singletons otherwise.
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        match &s.patient {
            Some(p) => match group_of.get(p.as_str()) {
                Some(&g) => groups[g].push(i),
                None => {
                    group_of.insert(p, groups.len());
                    groups.push(vec![i]);
                }
            },
            None => groups.push(vec![i]),
        }
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit for stability across library versions.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    // Largest-remainder targets.
    let mut targets = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for (k, r) in [r0, r1, r2].into_iter().enumerate() {
        let exact = r * n as f64;
        targets[k] = exact.floor() as usize;
        fracs[k] = (exact - exact.floor(), k);
        assigned += targets[k];
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for i in 0..n - assigned {
        targets[fracs[i % 3].1] += 1;
    }

    // Fill the fold with the largest deficit first (ties: train, test, val).
    let mut folds: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for &g in &order {
        let k = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] as i64 - folds[a].len() as i64;
                let db = targets[b] as i64 - folds[b].len() as i64;
                da.cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        folds[k].extend(&groups[g]);
    }

    let build = |idx: &Vec<usize>| -> Dataset<F> {
        let mut idx = idx.clone();
        idx.sort_unstable(); // keep original sample order inside each fold
        Dataset {
            samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
            class_names: ds.class_names.clone(),
        }
    };
    Ok((build(&folds[0]), build(&folds[1]), build(&folds[2])))
}

/// Indices of samples whose class-`c` label matches the polarity.
pub fn class_pool<F: Scalar>(ds: &Dataset<F>, class: usize, positive: bool) -> Vec<usize> {
    let want = u8::from(positive);
    (0..ds.samples.len()).filter(|&i| ds.samples[i].labels[class] == want).collect()
}

/// Draw a batch of samples with `labels[class] == polarity`: without
/// replacement while the pool allows it, with replacement once it is smaller
/// than the batch.
pub fn sample_class_batch<'a, F: Scalar>(
    ds: &'a Dataset<F>,
    class: usize,
    positive: bool,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a ImageSample<F>>, DataError> {
    let pool = class_pool(ds, class, positive);
    if pool.is_empty() {
        return Err(DataError::EmptyPool {
            class,
            polarity: if positive { "positive" } else { "negative" },
        });
    }
    let mut picks = Vec::with_capacity(batch_size);
    if pool.len() >= batch_size {
        let mut pool = pool;
        for i in 0..batch_size {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            picks.push(pool[i]);
        }
    } else {
        for _ in 0..batch_size {
            picks.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    Ok(picks.into_iter().map(|i| &ds.samples[i]).collect())
}

/// Stack samples into a `(B, 1, H, W)` batch tensor.
pub fn stack_images<F: Scalar>(samples: &[&ImageSample<F>]) -> ArrayD<F> {
    assert!(!samples.is_empty());
    let (h, w) = (samples[0].image.shape()[0], samples[0].image.shape()[1]);
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), 1, h, w]));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&s.image);
    }
    out
}

/// Stack label vectors into a `(B, C)` 0/1 tensor.
pub fn stack_labels<F: Scalar>(samples: &[&ImageSample<F>]) -> ArrayD<F> {
    assert!(!samples.is_empty());
    let c = samples[0].labels.len();
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), c]));
    for (i, s) in samples.iter().enumerate() {
        for (j, &l) in s.labels.iter().enumerate() {
            out[[i, j]] = F::cast(l as f64);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn to_u16(v: f64) -> u16 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn from_u16(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

/// Write a dataset as 16-bit PNGs plus a chexpert-style labels CSV (and mask
/// PNGs when present).
pub fn save_dataset<F: Scalar>(ds: &Dataset<F>, root: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io { path: path.into(), source };
    let img_dir = root.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    let mask_dir = root.join("masks");
    let has_masks = ds.samples.iter().any(|s| s.masks.is_some());
    if has_masks {
        std::fs::create_dir_all(&mask_dir).map_err(|e| io_err(&mask_dir, e))?;
    }

    let csv_path = root.join("labels.csv");
    let mut wtr = csv::Writer::from_path(&csv_path)
        .map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?;
    let mut header = vec!["Path".to_string()];
    header.extend(ds.class_names.iter().cloned());
    wtr.write_record(&header).map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?;

    for s in &ds.samples {
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let pixels: Vec<u16> = s.image.iter().map(|&v| to_u16(v.to_f64())).collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, pixels)
            .expect("pixel count matches dimensions");
        let img_path = img_dir.join(format!("{}.png", s.id));
        buf.save(&img_path).map_err(|e| DataError::Image { path: img_path.clone(), source: e })?;

        if let Some(masks) = &s.masks {
            for (c, m) in masks.iter().enumerate() {
                if s.labels[c] == 0 {
                    continue;
                }
                let mp: Vec<u8> = m.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
                let mb = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(w as u32, h as u32, mp)
                    .expect("pixel count matches dimensions");
                let mask_path = mask_dir.join(format!("{}_c{}.png", s.id, c));
                mb.save(&mask_path)
                    .map_err(|e| DataError::Image { path: mask_path.clone(), source: e })?;
            }
        }

        let mut rec = vec![format!("images/{}.png", s.id)];
        rec.extend(s.labels.iter().map(|l| l.to_string()));
        wtr.write_record(&rec).map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?;
    }
    wtr.flush().map_err(|e| io_err(&csv_path, e))?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`], restoring masks when present.
/// Images round-trip within 16-bit quantisation (about 3e-5 per pixel).
pub fn load_synthetic_dataset<F: Scalar>(root: &Path) -> Result<Dataset<F>, DataError> {
    let csv_path = root.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&csv_path)
        .map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?;
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?
        .clone();
    if headers.get(0) != Some("Path") {
        return Err(DataError::MissingColumn { path: csv_path, column: "Path".into() });
    }
    let class_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let c = class_names.len();

    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv { path: csv_path.clone(), source: e })?;
        let rel = rec.get(0).unwrap_or_default().to_string();
        let labels: Vec<u8> = (0..c)
            .map(|i| u8::from(rec.get(1 + i).map(|v| v.trim() == "1").unwrap_or(false)))
            .collect();
        let img_path = root.join(&rel);
        let (image, h, w) = read_gray_image::<F>(&img_path, None)?;
        let id = Path::new(&rel)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| rel.clone());

        let mut masks = Vec::with_capacity(c);
        for ci in 0..c {
            if labels[ci] == 0 {
                masks.push(ArrayD::zeros(IxDyn(&[h, w])));
                continue;
            }
            let mask_path = root.join("masks").join(format!("{id}_c{ci}.png"));
            let img = image::open(&mask_path)
                .map_err(|e| DataError::Image { path: mask_path.clone(), source: e })?
                .to_luma8();
            let m = ArrayD::from_shape_vec(
                IxDyn(&[h, w]),
                img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect(),
            )
            .unwrap();
            masks.push(m);
        }

        samples.push(ImageSample { image, labels, masks: Some(masks), id, patient: None });
    }

    let ds = Dataset { samples, class_names };
    ds.validate()?;
    Ok(ds)
}

/// Decode a grayscale image to `[-1, 1]`, optionally resizing to `(h, w)`.
/// Returns the array and its final geometry.
pub fn read_gray_image<F: Scalar>(
    path: &Path,
    resize_to: Option<(usize, usize)>,
) -> Result<(ArrayD<F>, usize, usize), DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.into(), source: e })?;
    let mut gray = img.to_luma16();
    if let Some((h, w)) = resize_to {
        if (gray.height() as usize, gray.width() as usize) != (h, w) {
            gray = image::imageops::resize(
                &gray,
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            );
        }
    }
    let (h, w) = (gray.height() as usize, gray.width() as usize);
    let arr = ArrayD::from_shape_vec(
        IxDyn(&[h, w]),
        gray.into_raw().into_iter().map(|v| F::cast(from_u16(v))).collect(),
    )
    .unwrap();
    Ok((arr, h, w))
}

// ---------------------------------------------------------------------------
// CXR-style CSV ingestion
// ---------------------------------------------------------------------------

/// Label CSV dialect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CxrLayout {
    /// `Path` column plus one column per finding with values 1 / 0 / -1 / blank.
    Chexpert,
    /// `Image Index` column plus a pipe-separated `Finding Labels` column.
    ChestXray8,
    /// `image_id` column plus one 0/1 column per finding.
    VindrCxr,
}

/// What to do with uncertain (-1) labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyPolicy {
    Zeros,
    Ones,
    Drop,
}

/// Ingestion settings.
pub struct LoadOptions {
    pub layout: CxrLayout,
    pub class_names: Vec<String>,
    pub uncertainty: UncertaintyPolicy,
    /// Target geometry; images are resized with bilinear filtering.
    pub h: usize,
    pub w: usize,
}

/// Counters describing what the loader had to work around.
#[derive(Debug, Default, Clone, Copy)]
pub struct LoadReport {
    /// Rows whose image file was missing or undecodable (skipped with a warning).
    pub skipped_unreadable: usize,
    /// Rows dropped because of an uncertain label under `UncertaintyPolicy::Drop`.
    pub dropped_uncertain: usize,
}

/// Load an image/label dataset from `csv_path`, resolving image paths against
/// `images_root`.
pub fn load_cxr_dataset<F: Scalar>(
    csv_path: &Path,
    images_root: &Path,
    opts: &LoadOptions,
) -> Result<(Dataset<F>, LoadReport), DataError> {
    let mut rdr = csv::Reader::from_path(csv_path)
        .map_err(|e| DataError::Csv { path: csv_path.into(), source: e })?;
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv { path: csv_path.into(), source: e })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn {
            path: csv_path.into(),
            column: name.into(),
        })
    };

    let path_col = match opts.layout {
        CxrLayout::Chexpert => col("Path")?,
        CxrLayout::ChestXray8 => col("Image Index")?,
        CxrLayout::VindrCxr => col("image_id")?,
    };
    let finding_col = match opts.layout {
        CxrLayout::ChestXray8 => Some(col("Finding Labels")?),
        _ => None,
    };
    let class_cols: Vec<Option<usize>> = match opts.layout {
        CxrLayout::Chexpert | CxrLayout::VindrCxr => opts
            .class_names
            .iter()
            .map(|n| col(n).map(Some))
            .collect::<Result<_, _>>()?,
        CxrLayout::ChestXray8 => vec![None; opts.class_names.len()],
    };

    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    'rows: for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv { path: csv_path.into(), source: e })?;
        let key = rec.get(path_col).unwrap_or_default().trim().to_string();
        if key.is_empty() {
            continue;
        }

        let mut labels = Vec::with_capacity(opts.class_names.len());
        match opts.layout {
            CxrLayout::ChestXray8 => {
                let findings = rec.get(finding_col.unwrap()).unwrap_or_default();
                let present: HashSet<&str> = findings.split('|').map(str::trim).collect();
                for name in &opts.class_names {
                    labels.push(u8::from(present.contains(name.as_str())));
                }
            }
            CxrLayout::Chexpert | CxrLayout::VindrCxr => {
                for &ci in class_cols.iter().map(|c| c.as_ref().unwrap()) {
                    let raw = rec.get(ci).unwrap_or_default().trim();
                    let value = raw.parse::<f64>().unwrap_or(0.0);
                    if value < 0.0 {
                        match opts.uncertainty {
                            UncertaintyPolicy::Zeros => labels.push(0),
                            UncertaintyPolicy::Ones => labels.push(1),
                            UncertaintyPolicy::Drop => {
                                report.dropped_uncertain += 1;
                                continue 'rows;
                            }
                        }
                    } else {
                        labels.push(u8::from(value >= 0.5));
                    }
                }
            }
        }

        let candidates = image_path_candidates(images_root, &key, opts.layout);
        let Some(found) = candidates.iter().find(|p| p.is_file()) else {
            log::warn!("no readable image for row {key:?}; skipping");
            report.skipped_unreadable += 1;
            continue;
        };
        let image = match read_gray_image::<F>(found, Some((opts.h, opts.w))) {
            Ok((arr, _, _)) => arr,
            Err(e) => {
                log::warn!("failed to decode {}: {e}; skipping", found.display());
                report.skipped_unreadable += 1;
                continue;
            }
        };

        samples.push(ImageSample {
            image,
            labels,
            masks: None,
            id: key.clone(),
            patient: patient_key(&key, opts.layout),
        });
    }

    let ds = Dataset { samples, class_names: opts.class_names.clone() };
    if ds.samples.is_empty() {
        return Err(DataError::Empty);
    }
    ds.validate()?;
    Ok((ds, report))
}

/// Where a row's image file might live, in priority order.
fn image_path_candidates(root: &Path, key: &str, layout: CxrLayout) -> Vec<PathBuf> {
    match layout {
        CxrLayout::Chexpert => {
            let mut v = vec![root.join(key)];
            // Rows often embed the dataset directory name; retry without it.
            if let Some(rest) = key.split_once('/').map(|(_, r)| r) {
                v.push(root.join(rest));
            }
            v
        }
        CxrLayout::ChestXray8 => vec![root.join("images").join(key), root.join(key)],
        CxrLayout::VindrCxr => ["png", "jpg"]
            .iter()
            .flat_map(|ext| {
                [root.join("train").join(format!("{key}.{ext}")), root.join(format!("{key}.{ext}"))]
            })
            .collect(),
    }
}

/// Patient grouping key for split integrity, when the layout encodes one.
fn patient_key(id: &str, layout: CxrLayout) -> Option<String> {
    match layout {
        CxrLayout::Chexpert => id
            .split('/')
            .find(|seg| seg.starts_with("patient"))
            .map(str::to_string),
        // Image index 00000013_005.png: the prefix is the patient.
        CxrLayout::ChestXray8 => id.split('_').next().map(str::to_string),
        CxrLayout::VindrCxr => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn spec_16(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec::new(n, 16, 16, 2, seed)
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let spec = SyntheticSpec::new(20, 32, 32, 5, 7);
        let a: Dataset<f64> = generate_synthetic_dataset(&spec).unwrap();
        let b: Dataset<f64> = generate_synthetic_dataset(&spec).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.labels, sb.labels);
            assert_eq!(sa.masks, sb.masks);
            assert_eq!(sa.id, sb.id);
        }
    }

    #[test]
    fn all_negative_sample_is_pure_background() {
        let mut spec = SyntheticSpec::new(200, 32, 32, 3, 11);
        spec.prevalence = vec![0.2; 3];
        let ds: Dataset<f64> = generate_synthetic_dataset(&spec).unwrap();
        let neg = ds
            .samples
            .iter()
            .find(|s| s.labels.iter().all(|&l| l == 0))
            .expect("some all-negative sample at prevalence 0.2");
        // Background is -0.6 with sigma-0.05 noise: nothing near shape intensity.
        let max = neg.image.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max < -0.1, "expected only background, max pixel {max}");
        for m in neg.masks.as_ref().unwrap() {
            assert!(m.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn dataset_invariants_hold_and_masks_track_labels() {
        let ds: Dataset<f64> = generate_synthetic_dataset(&SyntheticSpec::new(50, 32, 32, 5, 3)).unwrap();
        ds.validate().unwrap();
    }

    #[test]
    fn empirical_prevalence_matches_binomial_oracle() {
        let mut spec = spec_16(10_000, 42);
        spec.prevalence = vec![0.3, 0.3];
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec).unwrap();
        for c in 0..2 {
            let count = ds.samples.iter().filter(|s| s.labels[c] == 1).count();
            let rate = count as f64 / 10_000.0;
            assert!((rate - 0.3).abs() < 0.02, "class {c} prevalence {rate}");
        }
    }

    #[test]
    fn labels_are_pairwise_independent() {
        let spec = SyntheticSpec::new(10_000, 16, 16, 3, 5);
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec).unwrap();
        let n = ds.samples.len() as f64;
        for a in 0..3 {
            for b in a + 1..3 {
                let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
                for s in &ds.samples {
                    sa += s.labels[a] as f64;
                    sb += s.labels[b] as f64;
                    sab += (s.labels[a] * s.labels[b]) as f64;
                }
                let (ma, mb) = (sa / n, sb / n);
                let cov = sab / n - ma * mb;
                let rho = cov / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
                assert!(rho.abs() < 0.05, "classes {a},{b}: rho {rho}");
            }
        }
    }

    #[test]
    fn overlapping_regions_are_rejected() {
        // A 6x6 image cannot host 5 classes with 4x4 cells.
        let spec = SyntheticSpec::new(1, 6, 6, 5, 0);
        let err = generate_synthetic_dataset::<f64>(&spec).unwrap_err();
        assert!(matches!(err, DataError::InvalidSpec(_)), "got {err}");
    }

    #[test]
    fn canonical_regions_are_disjoint() {
        for c in 1..=8 {
            let mut owner = vec![None; 64 * 64];
            for ci in 0..c {
                let (y0, x0, h, w) = class_region(ci, c, 64, 64);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        assert!(owner[y * 64 + x].replace(ci).is_none(), "pixel claimed twice");
                    }
                }
            }
        }
    }

    #[test]
    fn split_100_gives_exact_80_10_10() {
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec_16(100, 1)).unwrap();
        let (train, test, val) = split_dataset(&ds, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!((train.len(), test.len(), val.len()), (80, 10, 10));

        // Disjoint and exhaustive.
        let mut ids = HashSet::new();
        for fold in [&train, &test, &val] {
            for s in &fold.samples {
                assert!(ids.insert(s.id.clone()), "id {} in two folds", s.id);
            }
        }
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec_16(57, 2)).unwrap();
        let collect = |d: &Dataset<f32>| d.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        let (a1, a2, a3) = split_dataset(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        let (b1, b2, b3) = split_dataset(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(collect(&a1), collect(&b1));
        assert_eq!(collect(&a2), collect(&b2));
        assert_eq!(collect(&a3), collect(&b3));
        let (c1, _, _) = split_dataset(&ds, (0.8, 0.1, 0.1), 5).unwrap();
        assert_ne!(collect(&a1), collect(&c1), "different seeds should shuffle differently");
    }

    #[test]
    fn patients_never_span_folds() {
        let mut ds: Dataset<f32> = generate_synthetic_dataset(&spec_16(60, 3)).unwrap();
        for (i, s) in ds.samples.iter_mut().enumerate() {
            s.patient = Some(format!("patient{:02}", i / 3)); // 20 patients x 3 images
        }
        let (train, test, val) = split_dataset(&ds, (0.8, 0.1, 0.1), 13).unwrap();
        let mut fold_of: HashMap<String, usize> = HashMap::new();
        for (k, fold) in [&train, &test, &val].into_iter().enumerate() {
            for s in &fold.samples {
                let p = s.patient.clone().unwrap();
                if let Some(&prev) = fold_of.get(&p) {
                    assert_eq!(prev, k, "patient {p} appears in folds {prev} and {k}");
                }
                fold_of.insert(p, k);
            }
        }
        assert_eq!(train.len() + test.len() + val.len(), 60);
    }

    #[test]
    fn class_batches_honour_polarity_and_replacement() {
        let mut spec = spec_16(40, 8);
        spec.prevalence = vec![0.5, 0.08];
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec).unwrap();
        let mut rng = StdRng::seed_from_u64(1);

        let batch = sample_class_batch(&ds, 0, true, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|s| s.labels[0] == 1));

        let batch = sample_class_batch(&ds, 0, false, 4, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.labels[0] == 0));

        // Tiny pool: force with-replacement sampling.
        let pool = class_pool(&ds, 1, true);
        if pool.len() >= 1 && pool.len() < 4 {
            let batch = sample_class_batch(&ds, 1, true, 4, &mut rng).unwrap();
            assert_eq!(batch.len(), 4);
            let allowed: HashSet<&str> =
                pool.iter().map(|&i| ds.samples[i].id.as_str()).collect();
            assert!(batch.iter().all(|s| allowed.contains(s.id.as_str())));
        }
    }

    #[test]
    fn empty_pool_is_an_explicit_error() {
        let mut ds: Dataset<f32> = generate_synthetic_dataset(&spec_16(5, 4)).unwrap();
        for s in &mut ds.samples {
            s.labels[1] = 0;
            s.masks.as_mut().unwrap()[1].fill(0);
        }
        let mut rng = StdRng::seed_from_u64(2);
        let err = sample_class_batch(&ds, 1, true, 4, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("positive") && msg.contains('1'), "unhelpful message: {msg}");
    }

    #[test]
    fn save_and_reload_roundtrips_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let ds: Dataset<f32> = generate_synthetic_dataset(&SyntheticSpec::new(12, 32, 32, 3, 21)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back: Dataset<f32> = load_synthetic_dataset(dir.path()).unwrap();

        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.masks, b.masks, "masks must round-trip exactly");
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() < 3.2e-5, "pixel {x} vs {y}");
            }
        }
    }

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        let buf =
            image::ImageBuffer::<image::Luma<u8>, _>::from_raw(w, h, vec![value; (w * h) as usize])
                .unwrap();
        buf.save(path).unwrap();
    }

    #[test]
    fn chexpert_layout_loads_labels_and_patients() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("train/patient01/study1")).unwrap();
        std::fs::create_dir_all(root.join("train/patient02/study1")).unwrap();
        write_png(&root.join("train/patient01/study1/view1.png"), 12, 10, 200);
        write_png(&root.join("train/patient02/study1/view1.png"), 24, 20, 60);
        std::fs::write(
            root.join("labels.csv"),
            "Path,Cardiomegaly,Edema\n\
             train/patient01/study1/view1.png,1.0,-1.0\n\
             train/patient02/study1/view1.png,,0.0\n\
             train/missing/study1/view1.png,1.0,1.0\n",
        )
        .unwrap();

        let opts = LoadOptions {
            layout: CxrLayout::Chexpert,
            class_names: vec!["Cardiomegaly".into(), "Edema".into()],
            uncertainty: UncertaintyPolicy::Zeros,
            h: 8,
            w: 8,
        };
        let (ds, report): (Dataset<f32>, _) =
            load_cxr_dataset(&root.join("labels.csv"), root, &opts).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(report.skipped_unreadable, 1);
        assert_eq!(ds.samples[0].labels, vec![1, 0], "uncertain maps to 0 under zeros policy");
        assert_eq!(ds.samples[1].labels, vec![0, 0], "blank maps to 0");
        assert_eq!(ds.samples[0].patient.as_deref(), Some("patient01"));
        assert_eq!(ds.geometry(), (8, 8));
        ds.validate().unwrap();

        // Same CSV under ones / drop policies.
        let opts_ones = LoadOptions { uncertainty: UncertaintyPolicy::Ones, ..opts };
        let (ds1, _): (Dataset<f32>, _) =
            load_cxr_dataset(&root.join("labels.csv"), root, &opts_ones).unwrap();
        assert_eq!(ds1.samples[0].labels, vec![1, 1]);

        let opts_drop = LoadOptions { uncertainty: UncertaintyPolicy::Drop, ..opts_ones };
        let (dsd, rep): (Dataset<f32>, _) =
            load_cxr_dataset(&root.join("labels.csv"), root, &opts_drop).unwrap();
        assert_eq!(dsd.len(), 1);
        assert_eq!(rep.dropped_uncertain, 1);
    }

    #[test]
    fn missing_class_column_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "Path,Edema\nx.png,1\n").unwrap();
        let opts = LoadOptions {
            layout: CxrLayout::Chexpert,
            class_names: vec!["Cardiomegaly".into()],
            uncertainty: UncertaintyPolicy::Zeros,
            h: 8,
            w: 8,
        };
        let err =
            load_cxr_dataset::<f32>(&dir.path().join("labels.csv"), dir.path(), &opts).unwrap_err();
        assert!(err.to_string().contains("Cardiomegaly"), "got {err}");
    }

    #[test]
    fn chestxray8_layout_parses_pipe_separated_findings() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        write_png(&root.join("images/00000001_000.png"), 10, 10, 128);
        write_png(&root.join("images/00000001_001.png"), 10, 10, 128);
        write_png(&root.join("images/00000002_000.png"), 10, 10, 128);
        std::fs::write(
            root.join("entries.csv"),
            "Image Index,Finding Labels\n\
             00000001_000.png,Cardiomegaly|Effusion\n\
             00000001_001.png,No Finding\n\
             00000002_000.png,Effusion\n",
        )
        .unwrap();

        let opts = LoadOptions {
            layout: CxrLayout::ChestXray8,
            class_names: vec!["Cardiomegaly".into(), "Effusion".into()],
            uncertainty: UncertaintyPolicy::Zeros,
            h: 8,
            w: 8,
        };
        let (ds, report): (Dataset<f32>, _) =
            load_cxr_dataset(&root.join("entries.csv"), root, &opts).unwrap();
        assert_eq!(report.skipped_unreadable, 0);
        assert_eq!(ds.samples[0].labels, vec![1, 1]);
        assert_eq!(ds.samples[1].labels, vec![0, 0]);
        assert_eq!(ds.samples[2].labels, vec![0, 1]);
        assert_eq!(ds.samples[0].patient.as_deref(), Some("00000001"));
        assert_eq!(ds.samples[0].patient, ds.samples[1].patient);
    }

    #[test]
    fn vindr_layout_reads_per_class_columns() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("train")).unwrap();
        write_png(&root.join("train/abc123.png"), 10, 10, 30);
        std::fs::write(
            root.join("train.csv"),
            "image_id,Cardiomegaly,Pleural effusion\nabc123,0,1\n",
        )
        .unwrap();

        let opts = LoadOptions {
            layout: CxrLayout::VindrCxr,
            class_names: vec!["Cardiomegaly".into(), "Pleural effusion".into()],
            uncertainty: UncertaintyPolicy::Zeros,
            h: 8,
            w: 8,
        };
        let (ds, _): (Dataset<f32>, _) =
            load_cxr_dataset(&root.join("train.csv"), root, &opts).unwrap();
        assert_eq!(ds.samples[0].labels, vec![0, 1]);
        assert!(ds.samples[0].patient.is_none());
    }

    #[test]
    fn loaded_pixels_stay_inside_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 6, 6, 255);
        std::fs::write(dir.path().join("labels.csv"), "Path,K\na.png,1\n").unwrap();
        let opts = LoadOptions {
            layout: CxrLayout::Chexpert,
            class_names: vec!["K".into()],
            uncertainty: UncertaintyPolicy::Zeros,
            h: 6,
            w: 6,
        };
        let (ds, _): (Dataset<f64>, _) =
            load_cxr_dataset(&dir.path().join("labels.csv"), dir.path(), &opts).unwrap();
        let max = ds.samples[0].image.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max <= 1.0 && max > 0.99, "white should map to +1, got {max}");
    }

    #[test]
    fn stacks_have_batch_layout() {
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec_16(6, 6)).unwrap();
        let picks: Vec<&ImageSample<f32>> = ds.samples.iter().take(3).collect();
        let imgs = stack_images(&picks);
        let labels = stack_labels(&picks);
        assert_eq!(imgs.shape(), &[3, 1, 16, 16]);
        assert_eq!(labels.shape(), &[3, 2]);
        assert_eq!(imgs[[1, 0, 4, 5]], picks[1].image[[4, 5]]);
    }
}
