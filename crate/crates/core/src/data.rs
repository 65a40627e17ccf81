//! Synthetic long-tailed splits, vector augmentations and CSV I/O.
//!
//! Class `k` (0-based) receives `round(n1 · γ^(-k/(K-1)))` samples. Classes
//! are unit-covariance Gaussian blobs whose means sit on a scaled random
//! orthonormal frame, so every pair of means is `separation` apart.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Largest labeled class size.
    pub n1: usize,
    /// Largest unlabeled class size.
    pub m1: usize,
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub test_per_class: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub geometry_seed: u64,
    pub sample_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            n1: 150,
            m1: 300,
            gamma_l: 20.0,
            gamma_u: 20.0,
            test_per_class: 100,
            separation: 3.0,
            geometry_seed: 0,
            sample_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("dataset.{f}"), m));
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes");
        }
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.n1 < 1 {
            return bad("n1", "must be at least 1");
        }
        if !(self.gamma_l >= 1.0 && self.gamma_l.is_finite()) {
            return bad("gamma_l", "must be finite and >= 1");
        }
        if !(self.gamma_u >= 1.0 && self.gamma_u.is_finite()) {
            return bad("gamma_u", "must be finite and >= 1");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation", "must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    /// `None` for unlabeled samples.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplits {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplits {
    pub fn dim(&self) -> Option<usize> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.test)
            .map(|s| s.features.len())
            .next()
    }

    /// Largest class index seen in any labeled or test sample, plus one.
    pub fn num_classes(&self) -> usize {
        self.labeled
            .iter()
            .chain(&self.test)
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Output of [`generate_dataset`]. `unlabeled_truth[i]` is the hidden class of
/// `splits.unlabeled[i]` and exists only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub splits: DatasetSplits,
    pub unlabeled_truth: Vec<usize>,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub means: DenseMatrix,
}

/// Per-class sizes `round(n1 · γ^(-(k-1)/(K-1)))` for k = 1..K, rounding half
/// up, never below 1.
pub fn longtail_counts(n1: usize, gamma: f64, num_classes: usize) -> Vec<usize> {
    let k_max = num_classes.saturating_sub(1).max(1);
    (0..num_classes)
        .map(|k| {
            let x = if k == 0 {
                n1 as f64
            } else if k == k_max {
                // exact division keeps half-integer tails like 150/20 exact
                n1 as f64 / gamma
            } else {
                n1 as f64 * gamma.powf(-(k as f64) / k_max as f64)
            };
            ((x + 0.5).floor() as usize).max(1)
        })
        .collect()
}

fn class_means(spec: &DatasetSpec) -> DenseMatrix {
    let mut rng = stream(spec.geometry_seed, Stream::Geometry);
    let (k, d) = (spec.num_classes, spec.dim);
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if frame.len() < d {
            for u in &frame {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        frame.push(v);
    }
    // orthonormal vectors are sqrt(2) apart
    let scale = spec.separation / std::f64::consts::SQRT_2;
    let data = frame.into_iter().flatten().map(|a| a * scale).collect();
    DenseMatrix::new(k, d, data).expect("finite means")
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let means = class_means(spec);
    let labeled_counts = longtail_counts(spec.n1, spec.gamma_l, spec.num_classes);
    let unlabeled_counts = if spec.m1 == 0 {
        vec![0; spec.num_classes]
    } else {
        longtail_counts(spec.m1, spec.gamma_u, spec.num_classes)
    };

    let mut rng = stream(spec.sample_seed, Stream::DataSampling);
    let mut next_id = 0u64;
    let mut draw = |class: usize, rng: &mut crate::rng::StreamRng| {
        let features = means
            .row(class)
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let id = next_id;
        next_id += 1;
        (id, features)
    };

    let mut splits = DatasetSplits::default();
    for (class, &n) in labeled_counts.iter().enumerate() {
        for _ in 0..n {
            let (id, features) = draw(class, &mut rng);
            splits.labeled.push(Sample {
                id,
                features,
                label: Some(class),
            });
        }
    }
    let mut unlabeled_truth = Vec::new();
    for (class, &n) in unlabeled_counts.iter().enumerate() {
        for _ in 0..n {
            let (id, features) = draw(class, &mut rng);
            splits.unlabeled.push(Sample {
                id,
                features,
                label: None,
            });
            unlabeled_truth.push(class);
        }
    }
    for class in 0..spec.num_classes {
        for _ in 0..spec.test_per_class {
            let (id, features) = draw(class, &mut rng);
            splits.test.push(Sample {
                id,
                features,
                label: Some(class),
            });
        }
    }
    Ok(GeneratedDataset {
        splits,
        unlabeled_truth,
        labeled_counts,
        unlabeled_counts,
        means,
    })
}

/// Per-class label counts over `samples`; unlabeled samples are skipped.
pub fn class_counts(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut c = vec![0; num_classes];
    for s in samples {
        if let Some(l) = s.label {
            if l < num_classes {
                c[l] += 1;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_prob: f64,
    pub strong_scale_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.1,
            strong_noise_sigma: 0.8,
            strong_dropout_prob: 0.2,
            strong_scale_jitter: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("augment.{f}"), m));
        if !(self.weak_noise_sigma >= 0.0 && self.weak_noise_sigma.is_finite()) {
            return bad("weak_noise_sigma", "must be finite and >= 0");
        }
        if !(self.strong_noise_sigma.is_finite() && self.strong_noise_sigma > self.weak_noise_sigma)
        {
            return bad("strong_noise_sigma", "must exceed weak_noise_sigma");
        }
        if !(0.0..=1.0).contains(&self.strong_dropout_prob) {
            return bad("strong_dropout_prob", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.strong_scale_jitter) {
            return bad("strong_scale_jitter", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `x + N(0, σ_weak²)` per coordinate.
pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentationConfig, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| v + cfg.weak_noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gaussian noise, then per-coordinate dropout, then one global scale factor
/// drawn from `[1-j, 1+j]`.
pub fn strong_augment<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .map(|v| v + cfg.strong_noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for v in out.iter_mut() {
        if rng.random::<f64>() < cfg.strong_dropout_prob {
            *v = 0.0;
        }
    }
    let scale = 1.0 + cfg.strong_scale_jitter * (2.0 * rng.random::<f64>() - 1.0);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

// ---------------------------------------------------------------------------
// CSV

const SPLIT_TRAIN: &str = "train";
const SPLIT_TEST: &str = "test";

/// Writes `id,split,label,f_0,...,f_{d-1}`, labeled rows first, then
/// unlabeled (label -1), then test.
pub fn write_dataset_csv<W: Write>(splits: &DatasetSplits, out: W) -> Result<()> {
    let dim = splits.dim().unwrap_or(0);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["id".to_string(), "split".into(), "label".into()];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    let rows = splits
        .labeled
        .iter()
        .chain(&splits.unlabeled)
        .map(|s| (SPLIT_TRAIN, s))
        .chain(splits.test.iter().map(|s| (SPLIT_TEST, s)));
    for (split, s) in rows {
        if s.features.len() != dim {
            return Err(Error::Schema(format!(
                "sample {} has {} features, expected {dim}",
                s.id,
                s.features.len()
            )));
        }
        let mut rec = Vec::with_capacity(3 + dim);
        rec.push(s.id.to_string());
        rec.push(split.to_string());
        rec.push(s.label.map_or_else(|| "-1".to_string(), |l| l.to_string()));
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset_csv(splits: &DatasetSplits, path: &Path) -> Result<()> {
    write_dataset_csv(splits, BufWriter::new(File::create(path)?))
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<DatasetSplits> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(DatasetSplits::default()),
        Some(h) => h?,
    };
    if header.len() < 3 || &header[0] != "id" || &header[1] != "split" || &header[2] != "label" {
        return Err(Error::Schema(
            "header must start with id,split,label".into(),
        ));
    }
    let dim = header.len() - 3;
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("f_{j}") {
            return Err(Error::Schema(format!(
                "column {} should be f_{j}, found `{name}`",
                j + 3
            )));
        }
    }

    let mut splits = DatasetSplits::default();
    let mut seen_train = HashSet::new();
    let mut seen_test = HashSet::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |m: String| Error::Parse { line, message: m };
        if rec.len() != dim + 3 {
            return Err(Error::Schema(format!(
                "line {line}: {} fields, header declares {}",
                rec.len(),
                dim + 3
            )));
        }
        let id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad id `{}`: {e}", &rec[0])))?;
        let label: i64 = rec[2]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad label `{}`: {e}", &rec[2])))?;
        if label < -1 {
            return Err(perr(format!("label {label} below -1")));
        }
        let features = rec
            .iter()
            .skip(3)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = (label >= 0).then_some(label as usize);
        let sample = Sample {
            id,
            features,
            label,
        };
        match rec[1].trim() {
            SPLIT_TRAIN => {
                if !seen_train.insert(id) {
                    return Err(perr(format!("duplicate train id {id}")));
                }
                if label.is_some() {
                    splits.labeled.push(sample);
                } else {
                    splits.unlabeled.push(sample);
                }
            }
            SPLIT_TEST => {
                if label.is_none() {
                    return Err(perr("test rows need a label".into()));
                }
                if !seen_test.insert(id) {
                    return Err(perr(format!("duplicate test id {id}")));
                }
                splits.test.push(sample);
            }
            other => return Err(perr(format!("unknown split `{other}`"))),
        }
    }
    Ok(splits)
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplits> {
    read_dataset_csv(File::open(path)?)
}

/// Sidecar `id,label` file for the hidden unlabeled classes.
pub fn save_truth_csv(unlabeled: &[Sample], truth: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "label"])?;
    for (s, t) in unlabeled.iter().zip(truth) {
        w.write_record([s.id.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_truth_csv(path: &Path) -> Result<Vec<(u64, usize)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |i: usize| {
            rec.get(i)
                .and_then(|v| v.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: "expected id,label".into(),
                })
        };
        out.push((parse(0)?, parse(1)? as usize));
    }
    Ok(out)
}

/// Stacks sample features into a batch matrix.
pub fn to_matrix<'a, I: IntoIterator<Item = &'a [f64]>>(
    rows: I,
    dim: usize,
) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::invalid(format!(
                "row has {} features, expected {dim}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    DenseMatrix::new(n, dim, data)
}
