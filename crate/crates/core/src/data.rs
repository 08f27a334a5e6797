//! Synthetic two-domain pixel-labeling data.
//!
//! Each "image" is a Voronoi-style label map (nearest of K seeded centers)
//! with per-pixel features drawn as `class_mean + N(0, noise_std)`, then
//! pushed through the domain's affine shift. The source domain uses the
//! identity shift; the target domain's mixing matrix and offset create the
//! covariate shift that the adaptation engine has to undo.
//!
//! Every sample is generated from its own rng stream derived from
//! `(seed, split, index, purpose)`, so splits never interleave draws and
//! resizing one split cannot disturb another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine feature map `x -> M x + b` with an invertible `C x C` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineShift {
    /// Row-major mixing matrix, `matrix[i][j]` multiplying input channel `j`.
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AffineShift {
    pub fn identity(c: usize) -> Self {
        let matrix = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            matrix,
            offset: vec![0.0; c],
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.matrix.len() != c || self.matrix.iter().any(|row| row.len() != c) {
            return Err(Error::Config(format!(
                "shift matrix must be {c}x{c}"
            )));
        }
        if self.offset.len() != c {
            return Err(Error::Config(format!(
                "shift offset must have {c} entries, got {}",
                self.offset.len()
            )));
        }
        let finite = self
            .matrix
            .iter()
            .flatten()
            .chain(&self.offset)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("shift contains non-finite entries".into()));
        }
        self.inverse()?; // invertibility is part of the contract
        Ok(())
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let c = self.matrix.len();
        for i in 0..c {
            let mut acc = self.offset[i];
            let row = &self.matrix[i];
            for j in 0..c {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    }

    /// Inverse map `y -> M^{-1}(y - b)`, via Gauss-Jordan elimination with
    /// partial pivoting.
    pub fn inverse(&self) -> Result<AffineShift> {
        let c = self.matrix.len();
        let mut aug: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                let mut row = self.matrix[i].clone();
                row.extend((0..c).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..c {
            let pivot = (col..c)
                .max_by(|&a, &b| {
                    aug[a][col]
                        .abs()
                        .partial_cmp(&aug[b][col].abs())
                        .expect("finite pivots")
                })
                .expect("non-empty column");
            if aug[pivot][col].abs() < 1e-12 {
                return Err(Error::Config(
                    "shift matrix is singular (not invertible)".into(),
                ));
            }
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for row in 0..c {
                if row == col {
                    continue;
                }
                let f = aug[row][col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..2 * c {
                    aug[row][j] -= f * aug[col][j];
                }
            }
        }
        let inv_matrix: Vec<Vec<f64>> = aug.iter().map(|row| row[c..].to_vec()).collect();
        // b' = -M^{-1} b
        let mut inv_offset = vec![0.0; c];
        for i in 0..c {
            let mut acc = 0.0;
            for j in 0..c {
                acc += inv_matrix[i][j] * self.offset[j];
            }
            inv_offset[i] = -acc;
        }
        Ok(AffineShift {
            matrix: inv_matrix,
            offset: inv_offset,
        })
    }
}

/// Per-domain generative model: class-conditional feature means, isotropic
/// noise, and the domain's affine shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// `K x C` per-class feature means (pre-shift).
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub shift: AffineShift,
}

impl DomainSpec {
    pub fn validate(&self, k: usize, c: usize) -> Result<()> {
        if self.class_means.len() != k || self.class_means.iter().any(|m| m.len() != c) {
            return Err(Error::Config(format!(
                "class_means must be {k}x{c}"
            )));
        }
        if !self.class_means.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Config("class_means contain non-finite entries".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        self.shift.validate(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One synthetic image: a feature grid plus (when visible) its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    /// `None` on target training samples — those labels are withheld from
    /// the trainer and kept in [`Dataset::target_train_labels`] for post-hoc
    /// analysis only.
    pub labels: Option<Tensor>,
    pub domain: Domain,
}

/// Everything needed to regenerate a dataset deterministically.
///
/// Deserializes with per-field defaults (the frozen benchmark), so a partial
/// document overrides only what it names. Domain specs, when given, must be
/// complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c: usize,
    pub n_source_train: usize,
    pub n_target_train: usize,
    pub n_target_eval: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for DatasetConfig {
    /// The frozen toy benchmark: 32x32 images, 3 feature channels, 4
    /// classes on tetrahedral means, and a rotation-plus-scale target shift
    /// (condition number about 1.9) with a half-noise offset. The shift was
    /// calibrated once so that a source-only model degrades visibly on the
    /// target domain while adversarial alignment can still recover most of
    /// the gap, and is kept frozen.
    fn default() -> Self {
        let means = vec![
            vec![0.5, 0.5, 0.5],
            vec![0.5, -0.5, -0.5],
            vec![-0.5, 0.5, -0.5],
            vec![-0.5, -0.5, 0.5],
        ];
        let noise_std = 0.3;
        let (sin, cos) = 1.0f64.sin_cos();
        let scale = [1.3, 1.0, 0.7];
        // Rotation in the first two channels composed with a mild
        // per-channel scaling.
        let matrix = vec![
            vec![cos * scale[0], -sin * scale[1], 0.0],
            vec![sin * scale[0], cos * scale[1], 0.0],
            vec![0.0, 0.0, scale[2]],
        ];
        let offset = vec![0.5 * noise_std; 3];
        Self {
            seed: 7,
            h: 32,
            w: 32,
            k: 4,
            c: 3,
            n_source_train: 200,
            n_target_train: 200,
            n_target_eval: 50,
            source: DomainSpec {
                class_means: means.clone(),
                noise_std,
                shift: AffineShift::identity(3),
            },
            target: DomainSpec {
                class_means: means,
                noise_std,
                shift: AffineShift { matrix, offset },
            },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 16 {
            return Err(Error::Config(format!(
                "class count must lie in [1, 16], got {}",
                self.k
            )));
        }
        if self.c < 2 {
            return Err(Error::Config(format!(
                "feature channels must be >= 2, got {}",
                self.c
            )));
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.h * self.w < self.k {
            return Err(Error::Config(format!(
                "{} classes cannot fit {}x{} pixels",
                self.k, self.h, self.w
            )));
        }
        if self.n_source_train == 0 || self.n_target_train == 0 || self.n_target_eval == 0 {
            return Err(Error::Config("all split sizes must be >= 1".into()));
        }
        self.source.validate(self.k, self.c)?;
        self.target.validate(self.k, self.c)?;
        Ok(())
    }
}

/// The generated splits. `source_eval` is held-out source data (fresh
/// indices past the training range) used for in-domain evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_eval: Vec<Sample>,
    pub source_eval: Vec<Sample>,
    /// Withheld target-train labels, index-aligned with `target_train`.
    pub target_train_labels: Vec<Tensor>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a disjoint stream seed for `(seed, split, index, purpose)`.
pub fn derive_stream(seed: u64, split: u64, index: u64, purpose: u64) -> u64 {
    let mut s = splitmix64(seed);
    for v in [split, index, purpose] {
        s = splitmix64(s ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    s
}

const SPLIT_SOURCE_TRAIN: u64 = 0;
const SPLIT_TARGET_TRAIN: u64 = 1;
const SPLIT_TARGET_EVAL: u64 = 2;
const SPLIT_SOURCE_EVAL: u64 = 3;

const PURPOSE_TOPOLOGY: u64 = 0;
const PURPOSE_FEATURES: u64 = 1;

/// Piecewise-constant label map: K distinct centers are seeded uniformly and
/// each pixel takes the class of its nearest center (ties to the lowest
/// class index), giving contiguous segmentation-like regions. Every class is
/// guaranteed at least its own center pixel; the coverage check regenerates
/// on violation as a belt-and-braces measure.
pub fn gen_label_topology(seed: u64, h: usize, w: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k > 16 {
        return Err(Error::Config(format!(
            "class count must lie in [1, 16], got {k}"
        )));
    }
    if h * w < k {
        return Err(Error::Config(format!(
            "{k} classes cannot fit {h}x{w} pixels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..100 {
        let mut centers: Vec<(usize, usize)> = Vec::with_capacity(k);
        while centers.len() < k {
            let c = (rng.gen_range(0..h), rng.gen_range(0..w));
            if !centers.contains(&c) {
                centers.push(c);
            }
        }
        let mut map = Tensor::zeros(&[h, w]);
        let mut seen = vec![false; k];
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_d = u64::MAX;
                for (ci, &(cy, cx)) in centers.iter().enumerate() {
                    let dy = cy.abs_diff(y) as u64;
                    let dx = cx.abs_diff(x) as u64;
                    let d = dy * dy + dx * dx;
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                seen[best] = true;
                let idx = map.idx2(y, x);
                map.data_mut()[idx] = best as f64;
            }
        }
        if seen.iter().all(|s| *s) {
            return Ok(map);
        }
    }
    Err(Error::Data(
        "could not seed a label topology covering every class".into(),
    ))
}

/// Draws one sample on a fixed topology: per pixel, the class mean plus
/// isotropic Gaussian noise, pushed through the domain shift.
pub fn gen_sample(
    spec: &DomainSpec,
    topology: &Tensor,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let shape = topology.shape();
    if shape.len() != 2 {
        return Err(Error::Structure(format!(
            "topology must be [h, w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let k = spec.class_means.len();
    let c = spec.shift.dim();
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| {
            Error::Config(format!("bad noise std: {e}"))
        })?)
    } else {
        None
    };
    let mut features = Tensor::zeros(&[h, w, c]);
    let mut pre = vec![0.0; c];
    let mut post = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let label = topology.label_at(y, x, k)?;
            let mean = &spec.class_means[label];
            for ch in 0..c {
                pre[ch] = mean[ch]
                    + match &noise {
                        Some(dist) => dist.sample(rng),
                        None => 0.0,
                    };
            }
            spec.shift.apply(&pre, &mut post);
            let base = features.idx3(y, x, 0);
            features.data_mut()[base..base + c].copy_from_slice(&post);
        }
    }
    Ok(Sample {
        features,
        labels: Some(topology.clone()),
        domain,
    })
}

fn gen_split(
    config: &DatasetConfig,
    spec: &DomainSpec,
    domain: Domain,
    split: u64,
    start_index: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let index = start_index + i as u64;
            let topo_seed = derive_stream(config.seed, split, index, PURPOSE_TOPOLOGY);
            let topology = gen_label_topology(topo_seed, config.h, config.w, config.k)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(
                config.seed,
                split,
                index,
                PURPOSE_FEATURES,
            ));
            gen_sample(spec, &topology, domain, &mut rng)
        })
        .collect()
}

/// Generates all splits. Target-train labels are stripped from the samples
/// and parked in the side table.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let source_train = gen_split(
        config,
        &config.source,
        Domain::Source,
        SPLIT_SOURCE_TRAIN,
        0,
        config.n_source_train,
    )?;
    let mut target_train = gen_split(
        config,
        &config.target,
        Domain::Target,
        SPLIT_TARGET_TRAIN,
        0,
        config.n_target_train,
    )?;
    let target_eval = gen_split(
        config,
        &config.target,
        Domain::Target,
        SPLIT_TARGET_EVAL,
        0,
        config.n_target_eval,
    )?;
    let source_eval = gen_split(
        config,
        &config.source,
        Domain::Source,
        SPLIT_SOURCE_EVAL,
        0,
        config.n_target_eval,
    )?;
    let target_train_labels = target_train
        .iter_mut()
        .map(|s| s.labels.take().expect("generated with labels"))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        source_train,
        target_train,
        target_eval,
        source_eval,
        target_train_labels,
    })
}

/// Per-class pixel counts over a set of label maps.
pub fn label_histogram(labels: &[&Tensor], k: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; k];
    for map in labels {
        let shape = map.shape();
        for y in 0..shape[0] {
            for x in 0..shape[1] {
                hist[map.label_at(y, x, k)?] += 1;
            }
        }
    }
    Ok(hist)
}

const DATA_MAGIC: &[u8; 8] = b"ADPTDAT1";
const META_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    version: u32,
    config: DatasetConfig,
}

fn write_split(w: &mut impl Write, samples: &[Sample], labels: &[Option<&Tensor>]) -> Result<()> {
    for (sample, label) in samples.iter().zip(labels) {
        for v in sample.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        let map = label.expect("every stored sample carries labels");
        for v in map.data() {
            w.write_all(&(*v as u16).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes `meta.json` and `data.bin` under `dir`. Withheld target-train
/// labels are stored too (the file is for analysis; the loader re-strips
/// them).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        version: META_VERSION,
        config: dataset.config.clone(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(dir.join("meta.json"), meta_json.as_bytes())?;

    let mut w = BufWriter::new(File::create(dir.join("data.bin"))?);
    w.write_all(DATA_MAGIC)?;
    fn own(s: &Sample) -> &Tensor {
        s.labels.as_ref().expect("labeled split")
    }
    write_split(
        &mut w,
        &dataset.source_train,
        &dataset.source_train.iter().map(|s| Some(own(s))).collect::<Vec<_>>(),
    )?;
    write_split(
        &mut w,
        &dataset.target_train,
        &dataset.target_train_labels.iter().map(Some).collect::<Vec<_>>(),
    )?;
    write_split(
        &mut w,
        &dataset.target_eval,
        &dataset.target_eval.iter().map(|s| Some(own(s))).collect::<Vec<_>>(),
    )?;
    write_split(
        &mut w,
        &dataset.source_eval,
        &dataset.source_eval.iter().map(|s| Some(own(s))).collect::<Vec<_>>(),
    )?;
    w.flush()?;
    Ok(())
}

fn read_split(
    r: &mut impl Read,
    config: &DatasetConfig,
    domain: Domain,
    count: usize,
) -> Result<(Vec<Sample>, Vec<Tensor>)> {
    let mut samples = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let feat_len = config.h * config.w * config.c;
    let pix = config.h * config.w;
    for _ in 0..count {
        let mut features = Tensor::zeros(&[config.h, config.w, config.c]);
        let mut buf = vec![0u8; feat_len * 8];
        r.read_exact(&mut buf)?;
        for (i, v) in features.data_mut().iter_mut().enumerate() {
            *v = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
        }
        let mut lbuf = vec![0u8; pix * 2];
        r.read_exact(&mut lbuf)?;
        let mut map = Tensor::zeros(&[config.h, config.w]);
        for (i, v) in map.data_mut().iter_mut().enumerate() {
            let raw = u16::from_le_bytes([lbuf[i * 2], lbuf[i * 2 + 1]]);
            if raw as usize >= config.k {
                return Err(Error::Data(format!(
                    "stored label {raw} out of range for k={}",
                    config.k
                )));
            }
            *v = raw as f64;
        }
        if !features.all_finite() {
            return Err(Error::Data("stored features contain non-finite values".into()));
        }
        samples.push(Sample {
            features,
            labels: Some(map.clone()),
            domain,
        });
        labels.push(map);
    }
    Ok((samples, labels))
}

/// Loads a dataset written by [`save_dataset`], restoring the withheld-label
/// arrangement for target-train.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_raw = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;
    if meta.version != META_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {}",
            meta.version
        )));
    }
    let config = meta.config;
    config.validate()?;
    let mut r = BufReader::new(File::open(dir.join("data.bin"))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Data(format!("bad dataset magic {magic:?}")));
    }
    let (source_train, _) = read_split(&mut r, &config, Domain::Source, config.n_source_train)?;
    let (mut target_train, target_train_labels) =
        read_split(&mut r, &config, Domain::Target, config.n_target_train)?;
    for s in &mut target_train {
        s.labels = None;
    }
    let (target_eval, _) = read_split(&mut r, &config, Domain::Target, config.n_target_eval)?;
    let (source_eval, _) = read_split(&mut r, &config, Domain::Source, config.n_target_eval)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data("dataset file has trailing bytes".into()));
    }
    Ok(Dataset {
        config,
        source_train,
        target_train,
        target_eval,
        source_eval,
        target_train_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            h: 16,
            w: 16,
            n_source_train: 6,
            n_target_train: 5,
            n_target_eval: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn topology_is_deterministic_and_covers_every_class() {
        let a = gen_label_topology(7, 32, 32, 4).unwrap();
        let b = gen_label_topology(7, 32, 32, 4).unwrap();
        assert_eq!(a, b);
        let hist = label_histogram(&[&a], 4).unwrap();
        assert!(hist.iter().all(|&n| n >= 1), "{hist:?}");
        assert_eq!(hist.iter().sum::<u64>(), 32 * 32);

        let single = gen_label_topology(7, 8, 8, 1).unwrap();
        assert!(single.data().iter().all(|&v| v == 0.0));

        assert!(gen_label_topology(7, 4, 4, 0).is_err());
        assert!(gen_label_topology(7, 4, 4, 17).is_err());
        assert!(gen_label_topology(7, 2, 2, 5).is_err());
    }

    #[test]
    fn noiseless_identity_sample_equals_class_means() {
        let config = DatasetConfig::default();
        let spec = DomainSpec {
            class_means: config.source.class_means.clone(),
            noise_std: 0.0,
            shift: AffineShift::identity(3),
        };
        let topo = gen_label_topology(3, 8, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = gen_sample(&spec, &topo, Domain::Source, &mut rng).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let label = topo.label_at(y, x, 4).unwrap();
                for ch in 0..3 {
                    assert_eq!(sample.features.at3(y, x, ch), spec.class_means[label][ch]);
                }
            }
        }
    }

    #[test]
    fn explicit_identity_shift_matches_constructed_identity() {
        let config = DatasetConfig::default();
        let mut spec = config.source.clone();
        spec.shift = AffineShift {
            matrix: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            offset: vec![0.0; 3],
        };
        let topo = gen_label_topology(3, 8, 8, 4).unwrap();
        let a = gen_sample(&config.source, &topo, Domain::Source, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = gen_sample(&spec, &topo, Domain::Source, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_mean_classifier_is_nearly_perfect_on_separated_classes() {
        let means = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        let spec = DomainSpec {
            class_means: means.clone(),
            noise_std: 0.15,
            shift: AffineShift::identity(2),
        };
        let topo = gen_label_topology(11, 32, 32, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut correct = 0usize;
        let mut total = 0usize;
        for _ in 0..10 {
            let sample = gen_sample(&spec, &topo, Domain::Source, &mut rng).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let f = [sample.features.at3(y, x, 0), sample.features.at3(y, x, 1)];
                    let d = |m: &[f64]| (f[0] - m[0]).powi(2) + (f[1] - m[1]).powi(2);
                    let pred = if d(&means[0]) <= d(&means[1]) { 0 } else { 1 };
                    if pred == topo.label_at(y, x, 2).unwrap() {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.99, "nearest-mean accuracy {acc}");
    }

    /// Per-class empirical means across many pixels, after undoing the
    /// domain shift.
    fn unshifted_class_means(samples: &[Sample], config: &DatasetConfig, spec: &DomainSpec) -> (Vec<Vec<f64>>, Vec<usize>) {
        let inv = spec.shift.inverse().unwrap();
        let mut sums = vec![vec![0.0; config.c]; config.k];
        let mut counts = vec![0usize; config.k];
        let mut post = vec![0.0; config.c];
        for sample in samples {
            let labels = sample.labels.as_ref().unwrap();
            for y in 0..config.h {
                for x in 0..config.w {
                    let label = labels.label_at(y, x, config.k).unwrap();
                    let base = sample.features.idx3(y, x, 0);
                    inv.apply(&sample.features.data()[base..base + config.c], &mut post);
                    for ch in 0..config.c {
                        sums[label][ch] += post[ch];
                    }
                    counts[label] += 1;
                }
            }
        }
        for (row, &n) in sums.iter_mut().zip(&counts) {
            for v in row.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        (sums, counts)
    }

    #[test]
    fn empirical_means_match_the_generative_model() {
        let mut config = DatasetConfig::default();
        config.n_source_train = 20; // 20 * 1024 pixels >> 10^4
        config.n_target_train = 20;
        let dataset = make_dataset(&config).unwrap();

        let (means, counts) = unshifted_class_means(&dataset.source_train, &config, &config.source);
        for k in 0..config.k {
            assert!(counts[k] > 1000, "class {k} has only {} pixels", counts[k]);
            let tol = 3.0 * config.source.noise_std / (counts[k] as f64).sqrt();
            for ch in 0..config.c {
                let err = (means[k][ch] - config.source.class_means[k][ch]).abs();
                assert!(err < tol, "class {k} channel {ch}: err {err} vs tol {tol}");
            }
        }

        // Same statistics hold for the target after inverting its shift.
        let labeled: Vec<Sample> = dataset
            .target_train
            .iter()
            .zip(&dataset.target_train_labels)
            .map(|(s, l)| Sample {
                features: s.features.clone(),
                labels: Some(l.clone()),
                domain: Domain::Target,
            })
            .collect();
        let (means, counts) = unshifted_class_means(&labeled, &config, &config.target);
        for k in 0..config.k {
            let tol = 3.0 * config.target.noise_std / (counts[k] as f64).sqrt();
            for ch in 0..config.c {
                let err = (means[k][ch] - config.target.class_means[k][ch]).abs();
                assert!(err < tol, "target class {k} channel {ch}: err {err} vs tol {tol}");
            }
        }
    }

    #[test]
    fn affine_inverse_roundtrips() {
        let config = DatasetConfig::default();
        let shift = config.target.shift.clone();
        let inv = shift.inverse().unwrap();
        let x = [0.3, -0.7, 0.2];
        let mut y = [0.0; 3];
        let mut back = [0.0; 3];
        shift.apply(&x, &mut y);
        inv.apply(&y, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }

        let singular = AffineShift {
            matrix: vec![
                vec![1.0, 2.0, 3.0],
                vec![2.0, 4.0, 6.0],
                vec![0.0, 0.0, 1.0],
            ],
            offset: vec![0.0; 3],
        };
        assert!(singular.inverse().is_err());
        assert!(singular.validate(3).is_err());
    }

    #[test]
    fn dataset_generation_is_deterministic_and_stream_separated() {
        let config = small_config();
        let a = make_dataset(&config).unwrap();
        let b = make_dataset(&config).unwrap();
        assert_eq!(a, b);

        // Shrinking a later split leaves earlier splits untouched.
        let mut shrunk = config.clone();
        shrunk.n_target_eval = 2;
        let c = make_dataset(&shrunk).unwrap();
        assert_eq!(a.source_train, c.source_train);
        assert_eq!(a.target_train, c.target_train);
        assert_eq!(a.target_eval[..2], c.target_eval[..]);

        // And vice versa: source-train size does not leak into target splits.
        let mut grown = config.clone();
        grown.n_source_train = 9;
        let d = make_dataset(&grown).unwrap();
        assert_eq!(a.target_train, d.target_train);
        assert_eq!(a.target_eval, d.target_eval);
    }

    #[test]
    fn target_train_labels_are_withheld_but_recorded() {
        let dataset = make_dataset(&small_config()).unwrap();
        assert!(dataset.target_train.iter().all(|s| s.labels.is_none()));
        assert_eq!(dataset.target_train_labels.len(), dataset.target_train.len());
        assert!(dataset.source_train.iter().all(|s| s.labels.is_some()));
        assert!(dataset.target_eval.iter().all(|s| s.labels.is_some()));
        assert_eq!(dataset.source_eval.len(), dataset.config.n_target_eval);
    }

    #[test]
    fn dataset_files_roundtrip_byte_identically() {
        let dataset = make_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("d1");
        let d2 = dir.path().join("d2");
        save_dataset(&dataset, &d1).unwrap();
        save_dataset(&dataset, &d2).unwrap();
        assert_eq!(
            std::fs::read(d1.join("data.bin")).unwrap(),
            std::fs::read(d2.join("data.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.join("meta.json")).unwrap(),
            std::fs::read(d2.join("meta.json")).unwrap()
        );

        let loaded = load_dataset(&d1).unwrap();
        assert_eq!(loaded, dataset);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut config = small_config();
        config.k = 0;
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.c = 1;
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.n_target_eval = 0;
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.source.class_means.pop();
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.target.noise_std = -0.1;
        assert!(config.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn derived_streams_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for split in 0..4 {
            for index in 0..50 {
                for purpose in 0..2 {
                    assert!(seen.insert(derive_stream(7, split, index, purpose)));
                }
            }
        }
    }
}
