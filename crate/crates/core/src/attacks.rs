//! Untargeted L-infinity evasion attacks (FGSM, PGD) on surrogate models.
//!
//! Inputs live in `[0, 1]` and the budget `epsilon` is in the same units.
//! Coordinates with a zero gradient are left untouched (`sign(0) = 0`).

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::activations::{csv_error, load_amat, save_amat, ActivationMatrix};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, RngStream};
use crate::registry::{Named, Registry};
use crate::zoo::TrainedModel;

/// Allowed numerical overshoot of the epsilon ball.
pub const BALL_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: String,
    pub epsilon: f64,
    /// PGD step size.
    pub alpha: f64,
    /// PGD iterations.
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: "fgsm".into(),
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, random_start: bool, seed: u64) -> Self {
        Self {
            kind: "pgd".into(),
            epsilon,
            alpha,
            steps,
            random_start,
            seed,
        }
    }

    /// Checks the invariants and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        let mut warnings = Vec::new();
        if self.kind == "pgd" {
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return Err(Error::Config(format!("pgd step size must be > 0, got {}", self.alpha)));
            }
            if self.steps == 0 {
                return Err(Error::Config("pgd needs at least one step".into()));
            }
            if self.alpha > self.epsilon {
                warnings.push(format!(
                    "pgd step size {} exceeds epsilon {}",
                    self.alpha, self.epsilon
                ));
            }
        }
        Ok(warnings)
    }
}

impl fmt::Display for AttackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind.as_str() {
            "pgd" => write!(
                f,
                "pgd(eps={}, alpha={}, steps={}, random_start={})",
                self.epsilon, self.alpha, self.steps, self.random_start
            ),
            k => write!(f, "{k}(eps={})", self.epsilon),
        }
    }
}

pub trait Attack: Named + Send + Sync {
    /// Adversarial rows for `(x, labels)` against `model`.
    fn perturb(&self, model: &TrainedModel, x: &Matrix, labels: &[usize], config: &AttackConfig) -> Result<Matrix>;
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size `epsilon`, clipped to `[0, 1]`.
pub struct Fgsm;

impl Named for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }
}

impl Attack for Fgsm {
    fn perturb(&self, model: &TrainedModel, x: &Matrix, labels: &[usize], config: &AttackConfig) -> Result<Matrix> {
        let g = model.input_gradient(x, labels)?;
        let mut adv = x.clone();
        for (a, gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a = (*a + config.epsilon * sign(*gv)).clamp(0.0, 1.0);
        }
        Ok(adv)
    }
}

/// Iterated signed-gradient steps, each projected onto the epsilon ball
/// around the original and onto `[0, 1]`.
pub struct Pgd;

impl Named for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }
}

impl Attack for Pgd {
    fn perturb(&self, model: &TrainedModel, x: &Matrix, labels: &[usize], config: &AttackConfig) -> Result<Matrix> {
        let eps = config.epsilon;
        let project = |adv: &mut Matrix| {
            for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
                *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
            }
        };
        let mut adv = x.clone();
        if config.random_start {
            let mut rng = RngStream::new(config.seed);
            for a in adv.data_mut() {
                *a += rng.uniform_range(-eps, eps);
            }
            project(&mut adv);
        }
        for step in 0..config.steps {
            let g = model.input_gradient(&adv, labels)?;
            for (a, gv) in adv.data_mut().iter_mut().zip(g.data()) {
                *a += config.alpha * sign(*gv);
            }
            project(&mut adv);
            assert!(
                within_ball(x, &adv, eps),
                "pgd iterate {step} left the epsilon ball"
            );
        }
        Ok(adv)
    }
}

fn within_ball(orig: &Matrix, adv: &Matrix, eps: f64) -> bool {
    orig.data()
        .iter()
        .zip(adv.data())
        .all(|(o, a)| (a - o).abs() <= eps + BALL_SLACK && (0.0..=1.0).contains(a))
}

pub fn attacks() -> Registry<dyn Attack> {
    Registry::<dyn Attack>::new("attack").with(Arc::new(Fgsm)).with(Arc::new(Pgd))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Matrix,
    pub adversarials: Matrix,
    pub labels: Vec<usize>,
    pub source_model: String,
    pub probe_set_id: String,
    pub config: AttackConfig,
}

impl AdversarialBatch {
    /// Checks the epsilon-ball and `[0, 1]` constraints for every entry.
    pub fn verify(&self) -> Result<()> {
        if self.originals.shape() != self.adversarials.shape() || self.labels.len() != self.originals.rows() {
            return Err(Error::Shape("adversarial batch parts disagree in shape".into()));
        }
        for i in 0..self.originals.rows() {
            let linf = self
                .originals
                .row(i)
                .iter()
                .zip(self.adversarials.row(i))
                .map(|(o, a)| (a - o).abs())
                .fold(0.0, f64::max);
            if linf > self.config.epsilon + BALL_SLACK {
                return Err(Error::Numerical(format!(
                    "example {i}: perturbation {linf} exceeds epsilon {}",
                    self.config.epsilon
                )));
            }
            if self.adversarials.row(i).iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Numerical(format!("example {i} leaves [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs the attack named by `config.kind` from `registry` and verifies the
/// result.
pub fn run_attack(
    registry: &Registry<dyn Attack>,
    model: &TrainedModel,
    x: &Matrix,
    labels: &[usize],
    probe_set_id: &str,
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    config.validate()?;
    let attack = registry.get(&config.kind)?;
    let adversarials = attack.perturb(model, x, labels, config)?;
    let batch = AdversarialBatch {
        originals: x.clone(),
        adversarials,
        labels: labels.to_vec(),
        source_model: model.id().to_string(),
        probe_set_id: probe_set_id.to_string(),
        config: config.clone(),
    };
    batch.verify()?;
    Ok(batch)
}

pub fn fgsm(model: &TrainedModel, x: &Matrix, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    let config = AttackConfig {
        kind: "fgsm".into(),
        ..config.clone()
    };
    run_attack(&attacks(), model, x, labels, "", &config)
}

pub fn pgd(model: &TrainedModel, x: &Matrix, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    let config = AttackConfig {
        kind: "pgd".into(),
        ..config.clone()
    };
    run_attack(&attacks(), model, x, labels, "", &config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessRates {
    /// Flip rate among originals the model classified correctly.
    pub restricted: f64,
    /// Misclassification rate over all adversarials.
    pub unrestricted: f64,
    pub n: usize,
    pub n_correct: usize,
}

/// Misclassification rate of `model` over every adversarial example.
pub fn unrestricted_success(model: &TrainedModel, batch: &AdversarialBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty adversarial batch".into()));
    }
    let adv = model.predict(&batch.adversarials)?;
    let wrong = adv.iter().zip(&batch.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / batch.len() as f64)
}

pub fn attack_success(model: &TrainedModel, batch: &AdversarialBatch) -> Result<SuccessRates> {
    let unrestricted = unrestricted_success(model, batch)?;
    let orig = model.predict(&batch.originals)?;
    let adv = model.predict(&batch.adversarials)?;
    let mut n_correct = 0;
    let mut flipped = 0;
    for ((o, a), y) in orig.iter().zip(&adv).zip(&batch.labels) {
        if o == y {
            n_correct += 1;
            if a != y {
                flipped += 1;
            }
        }
    }
    if n_correct == 0 {
        return Err(Error::Degenerate(format!(
            "{} classifies none of the {} originals correctly",
            model.id(),
            batch.len()
        )));
    }
    Ok(SuccessRates {
        restricted: flipped as f64 / n_correct as f64,
        unrestricted,
        n: batch.len(),
        n_correct,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    index: usize,
    label: usize,
    pred_orig: usize,
    pred_adv: usize,
}

/// Writes `<stem>_orig.amat`, `<stem>_adv.amat` and `<stem>_manifest.csv`
/// (labels with the source model's predictions).
pub fn export_batch(batch: &AdversarialBatch, model: &TrainedModel, dir: &Path, stem: &str) -> Result<()> {
    let orig = ActivationMatrix::new(&batch.source_model, 0, &batch.probe_set_id, batch.originals.clone())?;
    let adv = ActivationMatrix::new(&batch.source_model, 1, &batch.probe_set_id, batch.adversarials.clone())?;
    save_amat(&orig, dir.join(format!("{stem}_orig.amat")))?;
    save_amat(&adv, dir.join(format!("{stem}_adv.amat")))?;
    let po = model.predict(&batch.originals)?;
    let pa = model.predict(&batch.adversarials)?;
    let path = dir.join(format!("{stem}_manifest.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for i in 0..batch.len() {
        w.serialize(ManifestRow {
            index: i,
            label: batch.labels[i],
            pred_orig: po[i],
            pred_adv: pa[i],
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reloads an exported batch. Values come back as stored (`f32`).
pub fn import_batch(dir: &Path, stem: &str, config: &AttackConfig) -> Result<AdversarialBatch> {
    let orig = load_amat(dir.join(format!("{stem}_orig.amat")))?;
    let adv = load_amat(dir.join(format!("{stem}_adv.amat")))?;
    let path = dir.join(format!("{stem}_manifest.csv"));
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let labels = r
        .deserialize::<ManifestRow>()
        .map(|row| row.map(|row| row.label).map_err(|e| csv_error(&path, e)))
        .collect::<Result<Vec<_>>>()?;
    let batch = AdversarialBatch {
        originals: orig.data().clone(),
        adversarials: adv.data().clone(),
        labels,
        source_model: orig.model_id.clone(),
        probe_set_id: orig.probe_set_id.clone(),
        config: config.clone(),
    };
    batch.verify()?;
    Ok(batch)
}
