//! The experiment configuration document.
//!
//! A single JSON file drives every command. Each field falls back to the
//! frozen benchmark default, unknown keys are rejected, and the fully
//! resolved document is echoed into the output directory so a run can be
//! reproduced from its artifacts alone.

use std::f64::consts::E;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use adaptlab_core::data::DatasetConfig;
use adaptlab_core::engine::{ModelConfig, TrainSchedule, Variant};
use adaptlab_core::error::{Error, Result};
use adaptlab_core::loss::LossSpec;

/// Raw loss selection as written in JSON. Parameters left out take the
/// frozen defaults for their kind; parameters that do not belong to the
/// kind are rejected rather than silently dropped, since an echoed config
/// must never carry settings that had no effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp: Option<(f64, f64)>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: "cross_entropy".into(),
            a: None,
            lambda: None,
            alpha_t: None,
            gamma: None,
            lambda1: None,
            lambda2: None,
            alpha: None,
            beta: None,
            clamp: None,
        }
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self::default()
    }

    pub fn conservative(a: f64, lambda: f64) -> Self {
        Self {
            kind: "conservative".into(),
            a: Some(a),
            lambda: Some(lambda),
            ..Self::default()
        }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn named(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    /// Which of the optional parameter slots the kind consumes.
    fn relevant(&self) -> &'static [&'static str] {
        match self.kind.as_str() {
            "cross_entropy" => &[],
            "focal" => &["alpha_t", "gamma"],
            "conservative" => &["a", "lambda"],
            "cubic1" => &["lambda1"],
            "cubic2" => &["lambda2"],
            "cubic3" => &["alpha", "beta"],
            _ => &[],
        }
    }

    pub fn to_spec(&self) -> Result<LossSpec> {
        let slots: [(&str, Option<f64>); 8] = [
            ("a", self.a),
            ("lambda", self.lambda),
            ("alpha_t", self.alpha_t),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        let relevant = self.relevant();
        for (name, value) in &slots {
            if value.is_some() && !relevant.contains(name) {
                return Err(Error::Config(format!(
                    "loss kind '{}' does not take parameter '{name}'",
                    self.kind
                )));
            }
        }
        let spec = match self.kind.as_str() {
            "cross_entropy" => LossSpec::cross_entropy(),
            "focal" => LossSpec::focal(self.alpha_t.unwrap_or(5.0), self.gamma.unwrap_or(2.0)),
            "conservative" => {
                LossSpec::conservative(self.a.unwrap_or(E), self.lambda.unwrap_or(5.0))
            }
            "cubic1" => LossSpec::cubic1(self.lambda1.unwrap_or(25.0)),
            "cubic2" => LossSpec::cubic2(self.lambda2.unwrap_or(25.0)),
            "cubic3" => LossSpec::cubic3(self.alpha.unwrap_or(15.0), self.beta.unwrap_or(35.0)),
            other => {
                return Err(Error::Config(format!(
                    "unknown loss kind '{other}' (expected one of cross_entropy, focal, \
                     conservative, cubic1, cubic2, cubic3)"
                )))
            }
        };
        let spec = match self.clamp {
            Some((lo, hi)) => spec.with_clamp(lo, hi),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Writes the kind's defaults back into the unset slots so the echoed
    /// document states every value that the run actually used.
    fn materialize(&mut self) -> Result<()> {
        let spec = self.to_spec()?;
        use adaptlab_core::loss::LossKind::*;
        match spec.kind {
            CrossEntropy => {}
            Focal { alpha_t, gamma } => {
                self.alpha_t = Some(alpha_t);
                self.gamma = Some(gamma);
            }
            Conservative { a, lambda } => {
                self.a = Some(a);
                self.lambda = Some(lambda);
            }
            Cubic1 { lambda1 } => self.lambda1 = Some(lambda1),
            Cubic2 { lambda2 } => self.lambda2 = Some(lambda2),
            Cubic3 { alpha, beta } => {
                self.alpha = Some(alpha);
                self.beta = Some(beta);
            }
        }
        Ok(())
    }
}

/// Raw training schedule. `warm_start_steps` and `eval_every` may be left
/// null, in which case they resolve to half the run and a twentieth of the
/// run respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub warm_start_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seg_loss_warm: LossConfig,
    pub seg_loss_main: LossConfig,
    pub recon_weight: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let base = TrainSchedule::default();
        Self {
            total_steps: base.total_steps,
            warm_start_steps: None,
            eval_every: None,
            lr: base.lr,
            beta1: base.beta1,
            beta2: base.beta2,
            seg_loss_warm: LossConfig::cross_entropy(),
            seg_loss_main: LossConfig::conservative(E, 5.0),
            recon_weight: base.recon_weight,
            seed: base.seed,
        }
    }
}

impl ScheduleConfig {
    pub fn to_schedule(&self) -> Result<TrainSchedule> {
        let schedule = TrainSchedule {
            total_steps: self.total_steps,
            warm_start_steps: self.warm_start_steps.unwrap_or(self.total_steps / 2),
            eval_every: self.eval_every.unwrap_or((self.total_steps / 20).max(1)),
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            seg_loss_warm: self.seg_loss_warm.to_spec()?,
            seg_loss_main: self.seg_loss_main.to_spec()?,
            recon_weight: self.recon_weight,
            seed: self.seed,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    fn materialize(&mut self) -> Result<()> {
        let resolved = self.to_schedule()?;
        self.warm_start_steps = Some(resolved.warm_start_steps);
        self.eval_every = Some(resolved.eval_every);
        self.seg_loss_warm.materialize()?;
        self.seg_loss_main.materialize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantConfig {
    SegOnly,
    SegPlusGan,
}

impl VariantConfig {
    pub fn to_variant(self) -> Variant {
        match self {
            VariantConfig::SegOnly => Variant::SegOnly,
            VariantConfig::SegPlusGan => Variant::SegPlusGan,
        }
    }
}

/// Settings for `plot-loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Log bases for the conservative-loss chart; each must exceed 1.
    pub bases: Vec<f64>,
    pub lambda: f64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            bases: vec![2.0, E, 3.0, 4.0],
            lambda: 1.0,
        }
    }
}

/// The ablation battery: every roster entry is trained once per seed and
/// the per-row identical configurations are executed only once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
    pub rows: Vec<String>,
}

/// Full roster mirroring the ablation tables: loss family members, the
/// adversarial component on/off, warm vs cold start, and the base/weight
/// sweeps of the conservative loss.
pub const BATTERY_ROWS: [&str; 16] = [
    "seg_only_ce",
    "gan_ce",
    "gan_fl",
    "gan_cl_warm",
    "gan_cl_cold",
    "gan_cubic1",
    "gan_cubic2",
    "gan_cubic3",
    "gan_cl_a2",
    "gan_cl_a_e",
    "gan_cl_a3",
    "gan_cl_a4",
    "gan_cl_lambda1",
    "gan_cl_lambda5",
    "gan_cl_lambda10",
    "gan_cl_lambda20",
];

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            rows: BATTERY_ROWS.iter().map(|r| r.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Keep every `pixel_stride`-th pixel in each direction.
    pub pixel_stride: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { pixel_stride: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub variant: VariantConfig,
    pub plot: PlotConfig,
    pub compare: CompareConfig,
    pub export: ExportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            variant: VariantConfig::SegPlusGan,
            plot: PlotConfig::default(),
            compare: CompareConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config document, or the built-in defaults when no path is
    /// given. Parse failures carry the serde line/column diagnostic.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validates every section and writes resolved defaults back into the
    /// optional slots, so the echo states exactly what ran.
    pub fn resolve(&mut self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.schedule.materialize()?;
        for &base in &self.plot.bases {
            if !(base > 1.0 && base.is_finite()) {
                return Err(Error::Config(format!(
                    "plot bases must be finite and > 1, got {base}"
                )));
            }
        }
        if self.plot.bases.is_empty() {
            return Err(Error::Config("plot bases must not be empty".into()));
        }
        if !(self.plot.lambda > 0.0) {
            return Err(Error::Config(format!(
                "plot lambda must be > 0, got {}",
                self.plot.lambda
            )));
        }
        if self.compare.seeds.is_empty() {
            return Err(Error::Config("compare seeds must not be empty".into()));
        }
        for row in &self.compare.rows {
            if !BATTERY_ROWS.contains(&row.as_str()) {
                return Err(Error::Config(format!(
                    "unknown compare row '{row}' (known rows: {})",
                    BATTERY_ROWS.join(", ")
                )));
            }
        }
        if self.export.pixel_stride == 0 {
            return Err(Error::Config("export pixel_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        self.schedule.to_schedule()
    }

    pub fn variant(&self) -> Variant {
        self.variant.to_variant()
    }

    /// The canonical echo document; also the hashing pre-image.
    pub fn echo_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Short content hash identifying a resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.echo_json()?.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(hex[..12].to_string())
    }
}
