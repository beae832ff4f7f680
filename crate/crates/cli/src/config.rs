//! Run configuration: one TOML file, strict schema, documented defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use asuka_core::align::{AlignConfig, AlignTrainConfig};
use asuka_core::dataset::BenchmarkConfig;
use asuka_core::decoder::{DecoderTrainConfig, PairConfig};
use asuka_core::inject::{InjectConfig, InjectTrainConfig};
use asuka_core::judge::JudgeConfig;
use asuka_core::mask::MaskRecipe;
use asuka_core::models::denoiser::{DenoiserConfig, DenoiserTrainConfig};
use asuka_core::models::mae::{MaeConfig, MaeTrainConfig};
use asuka_core::models::vae::{VaeConfig, VaeTrainConfig};
use asuka_core::schedule::{Family, NoiseSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Parent directory of new run directories.
    pub runs_dir: PathBuf,
    pub data: DataConfig,
    pub mask: MaskRecipe,
    pub schedule: ScheduleConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub mae: MaeConfig,
    pub mae_train: MaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub base_train: DenoiserTrainConfig,
    pub align: AlignConfig,
    pub align_train: AlignTrainConfig,
    pub inject: InjectConfig,
    pub inject_train: InjectTrainConfig,
    pub augment: AugmentConfig,
    pub pairs: PairConfig,
    pub decoder_train: DecoderTrainConfig,
    pub eval: EvalConfig,
    pub judge: JudgeConfig,
    pub dataset: BenchmarkConfig,
    pub demo: DemoConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            runs_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            mask: MaskRecipe::default(),
            schedule: ScheduleConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            mae: MaeConfig::default(),
            mae_train: MaeTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            base_train: DenoiserTrainConfig::default(),
            align: AlignConfig::default(),
            align_train: AlignTrainConfig::default(),
            inject: InjectConfig::default(),
            inject_train: InjectTrainConfig::default(),
            augment: AugmentConfig::default(),
            pairs: PairConfig::default(),
            decoder_train: DecoderTrainConfig::default(),
            eval: EvalConfig::default(),
            judge: JudgeConfig::default(),
            dataset: BenchmarkConfig::default(),
            demo: DemoConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square training resolution.
    pub side: usize,
    /// Size of the synthetic training corpus when no `--images` is given.
    pub train_images: usize,
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { side: 64, train_images: 64, workers: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub family: Family,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { family: Family::RectifiedFlow, steps: 1000 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> NoiseSchedule {
        NoiseSchedule { family: self.family, steps: self.steps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub apply_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { apply_prob: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Items in the synthetic color-shift set.
    pub items: usize,
    pub band_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { items: 200, band_width: 2 }
    }
}

/// Sizes for `demo-inpaint`, which trains every missing model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub images: usize,
    pub train_images: usize,
    pub sample_steps: usize,
    pub vae_steps: usize,
    pub mae_steps: usize,
    pub base_steps: usize,
    pub align_steps: usize,
    pub inject_steps: usize,
    pub decoder_steps: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            images: 4,
            train_images: 24,
            sample_steps: 8,
            vae_steps: 300,
            mae_steps: 200,
            base_steps: 100,
            align_steps: 40,
            inject_steps: 40,
            decoder_steps: 200,
        }
    }
}

/// One schema problem, addressed by dotted field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every violation found in a config, for exit status 2.
#[derive(Debug)]
pub struct ValidationError(pub Vec<Violation>);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem{}):", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for v in &self.0 {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

fn violation(path: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation { path: path.into(), message: message.into() }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Unknown keys and type mismatches, checked against the default layout.
fn walk(path: &str, given: &Value, reference: &Value, out: &mut Vec<Violation>) {
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match (given, reference) {
        (Value::Table(g), Value::Table(r)) => {
            for (k, v) in g {
                match r.get(k) {
                    Some(rv) => walk(&join(k), v, rv, out),
                    None => out.push(violation(join(k), "unknown key")),
                }
            }
        }
        (Value::Array(g), Value::Array(r)) => {
            if let Some(first) = r.first() {
                for (i, v) in g.iter().enumerate() {
                    walk(&format!("{path}[{i}]"), v, first, out);
                }
            }
        }
        (Value::Integer(_), Value::Float(_)) => {}
        (g, r) if std::mem::discriminant(g) != std::mem::discriminant(r) => {
            out.push(violation(path, format!("expected {}, found {}", type_name(r), type_name(g))));
        }
        _ => {}
    }
}

fn prefixed(prefix: &str, list: Vec<(String, String)>, out: &mut Vec<Violation>) {
    out.extend(list.into_iter().map(|(f, m)| violation(format!("{prefix}.{f}"), m)));
}

fn check_prob(path: &str, p: f64, out: &mut Vec<Violation>) {
    if !(0.0..=1.0).contains(&p) {
        out.push(violation(path, format!("probability {p} outside [0, 1]")));
    }
}

fn check_positive(path: &str, v: f64, out: &mut Vec<Violation>) {
    if !(v > 0.0 && v.is_finite()) {
        out.push(violation(path, format!("must be positive, got {v}")));
    }
}

fn check_nonzero(path: &str, v: usize, out: &mut Vec<Violation>) {
    if v == 0 {
        out.push(violation(path, "must be at least 1"));
    }
}

impl Config {
    /// Range and cross-field checks on an already typed config.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        prefixed("mask", self.mask.violations(), &mut out);
        prefixed("pairs.recipe", self.pairs.recipe.violations(), &mut out);
        prefixed("pairs.jitter", self.pairs.jitter.violations(), &mut out);
        prefixed("dataset.recipe", self.dataset.recipe.violations(), &mut out);

        let side = self.data.side;
        if side < 16 {
            out.push(violation("data.side", format!("must be at least 16, got {side}")));
        }
        for (path, div) in [("mae.patch", self.mae.patch), ("vae.factor", self.vae.factor)] {
            if div == 0 || side % div != 0 {
                out.push(violation(path, format!("must divide data.side = {side}")));
            }
        }
        check_nonzero("data.train_images", self.data.train_images, &mut out);
        check_nonzero("data.workers", self.data.workers, &mut out);
        if self.schedule.steps < 2 {
            out.push(violation("schedule.steps", "need at least 2 timesteps"));
        }
        if self.align.in_dim != self.mae.dim {
            out.push(violation("align.in_dim", format!("must equal mae.dim = {}", self.mae.dim)));
        }
        if self.align.out_dim != self.denoiser.width {
            out.push(violation("align.out_dim", format!("must equal denoiser.width = {}", self.denoiser.width)));
        }
        if self.denoiser.latent_channels != self.vae.latent_channels {
            out.push(violation("denoiser.latent_channels", "must equal vae.latent_channels"));
        }
        if self.mae.patch > 0 && side % self.mae.patch == 0 {
            let n_m = (side / self.mae.patch).pow(2);
            if self.denoiser.ctx_tokens != n_m {
                out.push(violation("denoiser.ctx_tokens", format!("must equal the MAE token count {n_m}")));
            }
        }
        for (path, width, heads) in [
            ("denoiser.heads", self.denoiser.width, self.denoiser.heads),
            ("mae.heads", self.mae.dim, self.mae.heads),
            ("align.heads", self.align.out_dim, self.align.heads),
        ] {
            if heads == 0 || width % heads != 0 {
                out.push(violation(path, format!("must divide the token width {width}")));
            }
        }
        if self.denoiser.width % 4 != 0 {
            out.push(violation("denoiser.width", "must be a multiple of 4 for 2-D positional embeddings"));
        }
        if self.mae.dim % 4 != 0 {
            out.push(violation("mae.dim", "must be a multiple of 4 for 2-D positional embeddings"));
        }
        check_nonzero("inject.rank", self.inject.rank, &mut out);

        for (path, lr) in [
            ("vae_train.lr", self.vae_train.lr),
            ("mae_train.lr", self.mae_train.lr),
            ("base_train.lr", self.base_train.lr),
            ("align_train.lr", self.align_train.lr),
            ("inject_train.lr", self.inject_train.lr),
            ("decoder_train.lr", self.decoder_train.lr),
        ] {
            check_positive(path, lr, &mut out);
        }
        for (path, b) in [
            ("vae_train.batch", self.vae_train.batch),
            ("mae_train.batch", self.mae_train.batch),
            ("base_train.batch", self.base_train.batch),
            ("align_train.batch", self.align_train.batch),
            ("align_train.reference_batch", self.align_train.reference_batch),
            ("inject_train.batch", self.inject_train.batch),
            ("decoder_train.batch", self.decoder_train.batch),
        ] {
            check_nonzero(path, b, &mut out);
        }
        for (prefix, prior) in [("align_train.prior", &self.align_train.prior), ("inject_train.prior", &self.inject_train.prior)] {
            check_prob(&format!("{prefix}.p0"), prior.p0, &mut out);
            check_prob(&format!("{prefix}.p_final"), prior.p_final, &mut out);
            check_nonzero(&format!("{prefix}.decay_steps"), prior.decay_steps, &mut out);
        }
        check_prob("mae_train.mask_ratio", self.mae_train.mask_ratio, &mut out);
        check_prob("align_train.mae_mask_ratio", self.align_train.mae_mask_ratio, &mut out);
        check_prob("inject_train.mae_mask_ratio", self.inject_train.mae_mask_ratio, &mut out);
        check_prob("base_train.p_unmasked", self.base_train.p_unmasked, &mut out);
        check_prob("augment.apply_prob", self.augment.apply_prob, &mut out);
        check_prob("pairs.p_latent", self.pairs.p_latent, &mut out);
        check_prob("pairs.jagged_fraction", self.pairs.jagged_fraction, &mut out);
        if self.pairs.jagged_factor < 2 {
            out.push(violation("pairs.jagged_factor", "must be at least 2"));
        }
        if self.decoder_train.boundary_weight < 0.0 {
            out.push(violation("decoder_train.boundary_weight", "must be >= 0"));
        }
        check_nonzero("decoder_train.band_width", self.decoder_train.band_width, &mut out);
        check_nonzero("eval.items", self.eval.items, &mut out);
        check_nonzero("eval.band_width", self.eval.band_width, &mut out);
        check_nonzero("judge.in_flight", self.judge.in_flight, &mut out);
        if self.judge.token_env.is_empty() {
            out.push(violation("judge.token_env", "must name an environment variable"));
        }
        check_nonzero("dataset.clusters_per_dataset", self.dataset.clusters_per_dataset, &mut out);
        check_nonzero("dataset.inner_iters", self.dataset.inner_iters, &mut out);
        if self.dataset.side < 16 {
            out.push(violation("dataset.side", "must be at least 16"));
        }
        check_nonzero("demo.images", self.demo.images, &mut out);
        check_nonzero("demo.train_images", self.demo.train_images, &mut out);
        check_nonzero("demo.sample_steps", self.demo.sample_steps, &mut out);
        out
    }

    /// Canonical TOML text of the normalized config.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of [`Config::snapshot`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Validates a parsed TOML document and fills defaults.
pub fn validate(raw: &Value) -> Result<Config, ValidationError> {
    let reference = Value::try_from(Config::default()).expect("defaults serialize");
    let mut out = Vec::new();
    walk("", raw, &reference, &mut out);
    if !out.is_empty() {
        return Err(ValidationError(out));
    }
    let cfg: Config = raw.clone().try_into().map_err(|e: toml::de::Error| ValidationError(vec![violation("<root>", e.message())]))?;
    let out = cfg.violations();
    if out.is_empty() {
        Ok(cfg)
    } else {
        Err(ValidationError(out))
    }
}

pub fn parse_document(text: &str) -> Result<Value, ValidationError> {
    text.parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| ValidationError(vec![violation("<syntax>", e.to_string().trim().to_string())]))
}

/// Applies `key.path=value`. The value is read as a TOML literal, or as a
/// bare string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ValidationError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ValidationError(vec![violation(assignment, "override must look like key=value")]))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ValidationError(vec![violation(key, "empty path segment")]));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Table(table) = node else {
            return Err(ValidationError(vec![violation(parts[..i].join("."), "is not a table")]));
        };
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    unreachable!("path has at least one segment")
}

/// Reads `path` (or an empty document), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Config> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
            parse_document(&text)?
        }
        None => Value::Table(toml::Table::new()),
    };
    let mut errs = Vec::new();
    for o in overrides {
        if let Err(ValidationError(v)) = apply_override(&mut doc, o) {
            errs.extend(v);
        }
    }
    if !errs.is_empty() {
        return Err(ValidationError(errs).into());
    }
    Ok(validate(&doc)?)
}
