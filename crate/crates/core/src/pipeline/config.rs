//! Flat `key = value` run configuration.
//!
//! ```text
//! seed = 42
//! out = runs/example
//! dataset.kind = blobs
//! dataset.n = 800
//! dataset.classes = 4
//! train.epochs = 30
//! target.t = d64-d64
//! surrogate.s1 = d32 width=0.5 subsample=0.3 epochs=10
//! probe.size = 200
//! similarity.kernel = linear
//! similarity.scope = diag_band:0.25
//! selection.r1 = 0.7
//! attack.pgd = pgd eps=0.1 alpha=0.01 steps=20 random_start=false
//! regression.link = logit
//! bootstrap.trials = 1000
//! ```
//!
//! Lines starting with `#` are comments. Model lines take an architecture
//! (`d<width>` dense blocks, optionally preceded by `c<channels>k<kernel>`
//! convolution blocks, joined by `-`) followed by optional `width=`,
//! `epochs=`, `lr=`, `batch_size=` and `subsample=` overrides.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::{attacks, AttackConfig};
use crate::error::{Error, Result};
use crate::riskeval::{link_from_str, Link};
use crate::selection::ThresholdPolicy;
use crate::similarity::{aggregator_from_str, kernel_from_str, Estimator, Kernel, LayerAggregator, SimilarityMethod};
use crate::zoo::{dataset_generators, DatasetSpec, Hyperparams, NetworkDescriptor};

/// Seed for one stage and entity:
/// the first 8 bytes, little-endian, of
/// `SHA-256(master as u64 LE || stage || 0x00 || entity)`.
pub fn stage_seed(master: u64, stage: &str, entity: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(entity.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// `(out_channels, kernel)` per convolution block.
    pub convs: Vec<(usize, usize)>,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn scaled(&self, width: f64) -> Self {
        let s = |n: usize| ((n as f64 * width).round() as usize).max(1);
        Self {
            convs: self.convs.iter().map(|&(c, k)| (s(c), k)).collect(),
            hidden: self.hidden.iter().map(|&h| s(h)).collect(),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad architecture '{s}'"));
        let (mut convs, mut hidden) = (Vec::new(), Vec::new());
        for block in s.split('-') {
            if let Some(rest) = block.strip_prefix('d') {
                hidden.push(rest.parse().map_err(|_| bad())?);
            } else if let Some(rest) = block.strip_prefix('c') {
                if !hidden.is_empty() {
                    return Err(bad());
                }
                let (c, k) = rest.split_once('k').ok_or_else(bad)?;
                convs.push((c.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?));
            } else {
                return Err(bad());
            }
        }
        if convs.is_empty() && hidden.is_empty() {
            return Err(bad());
        }
        if hidden.contains(&0) || convs.iter().any(|&(c, k)| c == 0 || k == 0) {
            return Err(bad());
        }
        Ok(Self { convs, hidden })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<String> = self
            .convs
            .iter()
            .map(|(c, k)| format!("c{c}k{k}"))
            .chain(self.hidden.iter().map(|h| format!("d{h}")))
            .collect();
        f.write_str(&blocks.join("-"))
    }
}

/// One zoo member. Unset training fields fall back to the `train.*` defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub arch: Architecture,
    pub width: f64,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub subsample: Option<f64>,
}

impl ModelSpec {
    fn parse(id: &str, value: &str) -> Result<Self> {
        let mut tokens = value.split_whitespace();
        let arch = tokens
            .next()
            .ok_or_else(|| Error::Config(format!("model '{id}' has no architecture")))?
            .parse()?;
        let mut spec = Self {
            id: id.to_string(),
            arch,
            width: 1.0,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            subsample: None,
        };
        for t in tokens {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model '{id}': expected key=value, got '{t}'")))?;
            match k {
                "width" => spec.width = parse_value(k, v)?,
                "epochs" => spec.epochs = Some(parse_value(k, v)?),
                "lr" => spec.learning_rate = Some(parse_value(k, v)?),
                "batch_size" => spec.batch_size = Some(parse_value(k, v)?),
                "subsample" => spec.subsample = Some(parse_value(k, v)?),
                _ => return Err(Error::Config(format!("model '{id}': unknown option '{k}'"))),
            }
        }
        if !(spec.width > 0.0 && spec.width.is_finite()) {
            return Err(Error::Config(format!("model '{id}': width must be > 0")));
        }
        Ok(spec)
    }

    fn to_value(&self) -> String {
        let mut s = self.arch.to_string();
        if self.width != 1.0 {
            let _ = write!(s, " width={}", self.width);
        }
        if let Some(v) = self.epochs {
            let _ = write!(s, " epochs={v}");
        }
        if let Some(v) = self.learning_rate {
            let _ = write!(s, " lr={v}");
        }
        if let Some(v) = self.batch_size {
            let _ = write!(s, " batch_size={v}");
        }
        if let Some(v) = self.subsample {
            let _ = write!(s, " subsample={v}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedAttack {
    pub name: String,
    pub config: AttackConfig,
}

fn parse_attack(name: &str, value: &str) -> Result<AttackConfig> {
    let mut tokens = value.split_whitespace();
    let kind = tokens
        .next()
        .ok_or_else(|| Error::Config(format!("attack '{name}' has no kind")))?;
    let mut cfg = match kind {
        "pgd" => AttackConfig::pgd(0.1, 0.01, 20, false, 0),
        _ => AttackConfig {
            kind: kind.to_string(),
            ..AttackConfig::fgsm(0.1)
        },
    };
    let mut alpha_set = false;
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("attack '{name}': expected key=value, got '{t}'")))?;
        match k {
            "eps" => cfg.epsilon = parse_value(k, v)?,
            "alpha" => {
                cfg.alpha = parse_value(k, v)?;
                alpha_set = true;
            }
            "steps" => cfg.steps = parse_value(k, v)?,
            "random_start" => cfg.random_start = parse_value(k, v)?,
            _ => return Err(Error::Config(format!("attack '{name}': unknown option '{k}'"))),
        }
    }
    if cfg.kind != "pgd" && !alpha_set {
        cfg.alpha = cfg.epsilon;
    }
    Ok(cfg)
}

fn attack_value(cfg: &AttackConfig) -> String {
    if cfg.kind == "pgd" {
        format!(
            "pgd eps={} alpha={} steps={} random_start={}",
            cfg.epsilon, cfg.alpha, cfg.steps, cfg.random_start
        )
    } else {
        format!("{} eps={}", cfg.kind, cfg.epsilon)
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out: PathBuf,
    pub dataset_kind: String,
    pub dataset_n: usize,
    pub dataset_classes: usize,
    pub dataset_dim: Option<usize>,
    pub dataset_noise: Option<f64>,
    pub train: Hyperparams,
    pub target: Option<ModelSpec>,
    pub surrogates: Vec<ModelSpec>,
    pub probe_size: usize,
    pub kernel: String,
    pub scope: String,
    pub estimator: Estimator,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub min_m1: usize,
    pub min_m2: usize,
    pub min_total: usize,
    pub recommended_total: usize,
    pub attacks: Vec<NamedAttack>,
    pub link: String,
    pub bootstrap_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let policy = ThresholdPolicy::default();
        Self {
            master_seed: 42,
            out: PathBuf::from("out"),
            dataset_kind: "blobs".into(),
            dataset_n: 800,
            dataset_classes: 4,
            dataset_dim: None,
            dataset_noise: None,
            train: Hyperparams::default(),
            target: None,
            surrogates: Vec::new(),
            probe_size: 200,
            kernel: "linear".into(),
            scope: "diag_band:0.25".into(),
            estimator: Estimator::Biased,
            r1: None,
            r2: None,
            min_m1: policy.min_m1,
            min_m2: policy.min_m2,
            min_total: policy.min_total,
            recommended_total: policy.recommended_total,
            attacks: Vec::new(),
            link: "logit".into(),
            bootstrap_trials: 1000,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.root())))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies one setting. `target.<id>`, `surrogate.<id>` and
    /// `attack.<name>` add or replace entries.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(id) = key.strip_prefix("target.") {
            self.target = Some(ModelSpec::parse(id, value)?);
            return Ok(());
        }
        if let Some(id) = key.strip_prefix("surrogate.") {
            let spec = ModelSpec::parse(id, value)?;
            match self.surrogates.iter_mut().find(|s| s.id == id) {
                Some(s) => *s = spec,
                None => self.surrogates.push(spec),
            }
            return Ok(());
        }
        if let Some(name) = key.strip_prefix("attack.") {
            let config = parse_attack(name, value)?;
            match self.attacks.iter_mut().find(|a| a.name == name) {
                Some(a) => a.config = config,
                None => self.attacks.push(NamedAttack {
                    name: name.to_string(),
                    config,
                }),
            }
            return Ok(());
        }
        match key {
            "seed" => self.master_seed = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "dataset.kind" => self.dataset_kind = value.to_string(),
            "dataset.n" => self.dataset_n = parse_value(key, value)?,
            "dataset.classes" => self.dataset_classes = parse_value(key, value)?,
            "dataset.dim" => self.dataset_dim = Some(parse_value(key, value)?),
            "dataset.noise" => self.dataset_noise = Some(parse_value(key, value)?),
            "train.epochs" => self.train.epochs = parse_value(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.subsample" => self.train.subsample = parse_value(key, value)?,
            "probe.size" => self.probe_size = parse_value(key, value)?,
            "similarity.kernel" => self.kernel = value.to_string(),
            "similarity.scope" => self.scope = value.to_string(),
            "similarity.estimator" => self.estimator = value.parse()?,
            "selection.r1" => self.r1 = Some(parse_value(key, value)?),
            "selection.r2" => self.r2 = Some(parse_value(key, value)?),
            "selection.min_m1" => self.min_m1 = parse_value(key, value)?,
            "selection.min_m2" => self.min_m2 = parse_value(key, value)?,
            "selection.min_total" => self.min_total = parse_value(key, value)?,
            "selection.recommended_total" => self.recommended_total = parse_value(key, value)?,
            "regression.link" => self.link = value.to_string(),
            "bootstrap.trials" => self.bootstrap_trials = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text form. The output directory is left out, so parsing it
    /// yields an equal config apart from `out`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.master_seed.to_string());
        kv("dataset.kind", self.dataset_kind.clone());
        kv("dataset.n", self.dataset_n.to_string());
        kv("dataset.classes", self.dataset_classes.to_string());
        if let Some(d) = self.dataset_dim {
            kv("dataset.dim", d.to_string());
        }
        if let Some(n) = self.dataset_noise {
            kv("dataset.noise", n.to_string());
        }
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.learning_rate", self.train.learning_rate.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.subsample", self.train.subsample.to_string());
        if let Some(t) = &self.target {
            kv(&format!("target.{}", t.id), t.to_value());
        }
        for m in &self.surrogates {
            kv(&format!("surrogate.{}", m.id), m.to_value());
        }
        kv("probe.size", self.probe_size.to_string());
        kv("similarity.kernel", self.kernel.clone());
        kv("similarity.scope", self.scope.clone());
        kv("similarity.estimator", self.estimator.as_str().to_string());
        if let Some(r) = self.r1 {
            kv("selection.r1", r.to_string());
        }
        if let Some(r) = self.r2 {
            kv("selection.r2", r.to_string());
        }
        kv("selection.min_m1", self.min_m1.to_string());
        kv("selection.min_m2", self.min_m2.to_string());
        kv("selection.min_total", self.min_total.to_string());
        kv("selection.recommended_total", self.recommended_total.to_string());
        for a in &self.attacks {
            kv(&format!("attack.{}", a.name), attack_value(&a.config));
        }
        kv("regression.link", self.link.clone());
        kv("bootstrap.trials", self.bootstrap_trials.to_string());
        s
    }

    pub fn kernel(&self) -> Result<std::sync::Arc<dyn Kernel>> {
        kernel_from_str(&self.kernel)
    }

    pub fn aggregator(&self) -> Result<std::sync::Arc<dyn LayerAggregator>> {
        aggregator_from_str(&self.scope)
    }

    pub fn link(&self) -> Result<std::sync::Arc<dyn Link>> {
        link_from_str(&self.link)
    }

    /// Method tag of the whole-model scores used for selection.
    pub fn method(&self) -> Result<SimilarityMethod> {
        Ok(self.aggregator()?.method(self.kernel()?.method()))
    }

    /// Thresholds default to the values for [`Self::method`].
    pub fn policy(&self) -> Result<ThresholdPolicy> {
        let base = ThresholdPolicy::for_method(self.method()?);
        let policy = ThresholdPolicy {
            r1: self.r1.unwrap_or(base.r1),
            r2: self.r2.unwrap_or(base.r2),
            min_m1: self.min_m1,
            min_m2: self.min_m2,
            min_total: self.min_total,
            recommended_total: self.recommended_total,
            ..base
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset_kind.clone(),
            n: self.dataset_n,
            classes: self.dataset_classes,
            dim: self.dataset_dim,
            noise: self.dataset_noise,
            seed: stage_seed(self.master_seed, "dataset", &self.dataset_kind),
        }
    }

    pub fn target(&self) -> Result<&ModelSpec> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::Config("no target model configured (target.<id> = ...)".into()))
    }

    /// Target first, then surrogates in configuration order.
    pub fn models(&self) -> Result<Vec<&ModelSpec>> {
        Ok(std::iter::once(self.target()?).chain(&self.surrogates).collect())
    }

    pub fn surrogate(&self, id: &str) -> Result<&ModelSpec> {
        self.surrogates
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("'{id}' is not a configured surrogate")))
    }

    pub fn descriptor(&self, spec: &ModelSpec) -> Result<NetworkDescriptor> {
        let input = dataset_generators()
            .get(&self.dataset_kind)?
            .input_shape(&self.dataset_spec())?;
        let arch = spec.arch.scaled(spec.width);
        NetworkDescriptor::cnn(
            &spec.id,
            input,
            &arch.convs,
            &arch.hidden,
            self.dataset_classes,
            stage_seed(self.master_seed, "init", &spec.id),
        )
    }

    pub fn hyperparams(&self, spec: &ModelSpec) -> Hyperparams {
        Hyperparams {
            epochs: spec.epochs.unwrap_or(self.train.epochs),
            learning_rate: spec.learning_rate.unwrap_or(self.train.learning_rate),
            batch_size: spec.batch_size.unwrap_or(self.train.batch_size),
            subsample: spec.subsample.unwrap_or(self.train.subsample),
            seed: stage_seed(self.master_seed, "train", &spec.id),
        }
    }

    pub fn probe_seed(&self) -> u64 {
        stage_seed(self.master_seed, "probe", "")
    }

    pub fn bootstrap_seed(&self) -> u64 {
        stage_seed(self.master_seed, "bootstrap", "")
    }

    /// Attack config for one surrogate with its own random-start seed.
    pub fn attack_for(&self, attack: &NamedAttack, surrogate: &str) -> AttackConfig {
        AttackConfig {
            seed: stage_seed(self.master_seed, "attack", &format!("{surrogate}/{}", attack.name)),
            ..attack.config.clone()
        }
    }

    /// Checks everything that can be checked before training.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.policy()?;
        let mut warnings = Vec::new();
        let models = self.models()?;
        if self.surrogates.is_empty() {
            return Err(Error::Config("no surrogates configured (surrogate.<id> = ...)".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &models {
            if !ids.insert(m.id.as_str()) {
                return Err(Error::Config(format!("model id '{}' used twice", m.id)));
            }
            self.descriptor(m)?;
            let h = self.hyperparams(m);
            if !(h.learning_rate > 0.0 && h.batch_size > 0 && h.subsample > 0.0 && h.subsample <= 1.0) {
                return Err(Error::Config(format!(
                    "model '{}': need lr > 0, batch_size > 0 and subsample in (0, 1]",
                    m.id
                )));
            }
        }
        self.kernel()?;
        self.link()?;
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks configured (attack.<name> = ...)".into()));
        }
        let registry = attacks();
        for a in &self.attacks {
            if !registry.contains(&a.config.kind) {
                return Err(Error::Config(format!("attack '{}': unknown kind '{}'", a.name, a.config.kind)));
            }
            if a.name.is_empty() || a.name.contains(['/', '\\', ' ']) {
                return Err(Error::Config(format!("attack name '{}' is not a plain word", a.name)));
            }
            warnings.extend(a.config.validate()?);
        }
        if self.probe_size < crate::activations::MIN_PROBES {
            return Err(Error::Config(format!(
                "probe.size must be at least {}",
                crate::activations::MIN_PROBES
            )));
        }
        if self.bootstrap_trials < crate::riskeval::regression::MIN_TRIALS {
            return Err(Error::Config(format!(
                "bootstrap.trials must be at least {}",
                crate::riskeval::regression::MIN_TRIALS
            )));
        }
        Ok(warnings)
    }
}
