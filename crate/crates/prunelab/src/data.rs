//! Synthetic dataset generators, contrastive-view augmentation, and CSV
//! ingestion.
//!
//! Every generator is a pure function of its seed: calling twice with the same
//! arguments yields bit-identical datasets. Train/test splits come from
//! separate generator calls with disjoint seeds rather than shuffling.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Labeled point-cloud dataset. All feature vectors share one dimension and
/// every label is below `class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Tensor, usize)>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map(|(t, _)| t.len()).unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, l)| *l).collect()
    }

    /// Stack all features into a `[n, dim]` batch tensor.
    pub fn feature_matrix(&self) -> Tensor {
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(self.len() * dim);
        for (t, _) in &self.samples {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![self.len(), dim], data).expect("uniform feature dims")
    }
}

/// Parametric augmentation: per-view multiplicative scale plus additive
/// Gaussian jitter. Replaces image-space policies for point-cloud data.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationPolicy {
    pub noise_sigma: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    pub views_per_sample: usize,
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.noise_sigma < 0.0 {
            return Err(DataError::Parameter("noise_sigma must be >= 0".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DataError::Parameter(
                "scale range must satisfy 0 < min <= max".into(),
            ));
        }
        if self.views_per_sample < 2 {
            return Err(DataError::Parameter(
                "contrastive training needs views_per_sample >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Mix a base seed with a stream index (splitmix64). Used to give every
/// sample its own deterministic augmentation stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Gaussian clusters with unit covariance. Class means sit on coordinate
/// axes at radii that keep every pair at least `separation` apart.
pub fn make_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset, DataError> {
    if class_count == 0 || per_class == 0 {
        return Err(DataError::Parameter("counts must be positive".into()));
    }
    if dim < 1 {
        return Err(DataError::Parameter("dim must be >= 1".into()));
    }
    if separation <= 0.0 {
        return Err(DataError::Parameter("separation must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("valid sigma");
    let mut samples = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        let axis = class % dim;
        let radius = separation * (1 + class / dim) as f64;
        for _ in 0..per_class {
            let mut v = vec![0.0f32; dim];
            for (i, x) in v.iter_mut().enumerate() {
                let mean = if i == axis { radius } else { 0.0 };
                *x = (mean + normal.sample(&mut rng)) as f32;
            }
            samples.push((Tensor::vector(v), class));
        }
    }
    Ok(Dataset {
        samples,
        class_count,
        split,
    })
}

/// Concentric rings in the plane: class `c` sits at radius `c + 1` with
/// radial Gaussian noise. Not linearly separable for any noise level.
pub fn make_rings(
    class_count: usize,
    per_class: usize,
    noise_sigma: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset, DataError> {
    if class_count < 2 {
        return Err(DataError::Parameter("class_count must be >= 2".into()));
    }
    if per_class == 0 {
        return Err(DataError::Parameter("per_class must be positive".into()));
    }
    if noise_sigma < 0.0 {
        return Err(DataError::Parameter("noise_sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        let base_radius = (class + 1) as f64;
        for _ in 0..per_class {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let jitter = if noise_sigma > 0.0 {
                Normal::new(0.0, noise_sigma)
                    .expect("valid sigma")
                    .sample(&mut rng)
            } else {
                0.0
            };
            let r = base_radius + jitter;
            samples.push((
                Tensor::vector(vec![(r * angle.cos()) as f32, (r * angle.sin()) as f32]),
                class,
            ));
        }
    }
    Ok(Dataset {
        samples,
        class_count,
        split,
    })
}

/// Append `b`'s samples to `a`, shifting `b`'s labels past `a`'s classes.
pub fn concat_shifted(a: &Dataset, b: &Dataset) -> Result<Dataset, DataError> {
    if a.feature_dim() != b.feature_dim() {
        return Err(DataError::Parameter(format!(
            "feature dims differ: {} vs {}",
            a.feature_dim(),
            b.feature_dim()
        )));
    }
    if a.split != b.split {
        return Err(DataError::Parameter("cannot concat across splits".into()));
    }
    let mut samples = a.samples.clone();
    samples.extend(
        b.samples
            .iter()
            .map(|(t, l)| (t.clone(), l + a.class_count)),
    );
    Ok(Dataset {
        samples,
        class_count: a.class_count + b.class_count,
        split: a.split,
    })
}

/// Produce `views_per_sample` augmented copies of one feature vector.
///
/// `view_k = scale_k * sample + noise_k`. Deterministic in `stream_seed`;
/// derive it from the base seed and the sample index with [`derive_seed`].
pub fn augment(
    sample: &Tensor,
    policy: &AugmentationPolicy,
    stream_seed: u64,
) -> Result<Vec<Tensor>, DataError> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut views = Vec::with_capacity(policy.views_per_sample);
    for _ in 0..policy.views_per_sample {
        let scale = if policy.scale_min == policy.scale_max {
            policy.scale_min
        } else {
            rng.gen_range(policy.scale_min..policy.scale_max)
        };
        let mut v: Vec<f32> = sample.data().iter().map(|&x| scale * x).collect();
        if policy.noise_sigma > 0.0 {
            let normal = Normal::new(0.0f64, policy.noise_sigma as f64).expect("valid sigma");
            for x in &mut v {
                *x += normal.sample(&mut rng) as f32;
            }
        }
        views.push(Tensor::vector(v));
    }
    Ok(views)
}

/// Read a headerless CSV dataset: numeric feature columns, integer label last.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();
    let mut samples: Vec<(Tensor, usize)> = Vec::new();
    let mut width: Option<usize> = None;
    let mut max_label = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(DataError::Parse {
                path: display,
                line: lineno,
                message: "need at least one feature column and a label".into(),
            });
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(DataError::Parse {
                    path: display,
                    line: lineno,
                    message: format!("ragged row: expected {w} columns, got {}", cells.len()),
                })
            }
            _ => {}
        }
        let mut features = Vec::with_capacity(cells.len() - 1);
        for cell in &cells[..cells.len() - 1] {
            let v: f32 = cell.trim().parse().map_err(|_| DataError::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("non-numeric cell '{cell}'"),
            })?;
            features.push(v);
        }
        let label: usize = cells[cells.len() - 1]
            .trim()
            .parse()
            .map_err(|_| DataError::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("non-integer label '{}'", cells[cells.len() - 1]),
            })?;
        max_label = max_label.max(label);
        samples.push((Tensor::vector(features), label));
    }
    if samples.is_empty() {
        return Err(DataError::Parse {
            path: display,
            line: 1,
            message: "empty dataset".into(),
        });
    }
    Ok(Dataset {
        class_count: max_label + 1,
        samples,
        split: Split::Train,
    })
}

/// Write a dataset as headerless CSV, features then label, '\n' endings.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for (features, label) in &dataset.samples {
        for v in features.data() {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
