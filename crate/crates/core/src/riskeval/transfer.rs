use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::csv_error;
use crate::attacks::{attack_success, attacks, run_attack, AdversarialBatch, AttackConfig};
use crate::error::{Error, Result};
use crate::matcore::{dot, Matrix};
use crate::zoo::TrainedModel;

/// Outcome of attacking a target with examples crafted on one surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub surrogate: String,
    pub target: String,
    pub attack: AttackConfig,
    pub n: usize,
    /// White-box restricted success on the surrogate itself.
    pub surrogate_success: f64,
    pub transfer_restricted: f64,
    pub transfer_unrestricted: f64,
    /// Similarity score the surrogate was selected with.
    pub similarity: f64,
    /// Mean input-gradient cosine between surrogate and target, if measured.
    pub alignment: Option<f64>,
}

impl TransferRecord {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.surrogate_success, self.transfer_restricted, self.transfer_unrestricted];
        if self.n == 0 || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "transfer record for '{}' has n = {} or a rate outside [0, 1]",
                self.surrogate, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::Config(format!("similarity {} outside [0, 1]", self.similarity)));
        }
        Ok(())
    }
}

/// Crafts adversarials on `surrogate` and measures how often they fool
/// `target`.
pub fn transfer_eval(
    surrogate: &TrainedModel,
    target: &TrainedModel,
    x: &Matrix,
    labels: &[usize],
    probe_set_id: &str,
    config: &AttackConfig,
    similarity: f64,
) -> Result<TransferRecord> {
    if surrogate.id() == target.id() {
        return Err(Error::Config(format!("surrogate and target are both '{}'", target.id())));
    }
    if surrogate.descriptor().input_shape() != target.descriptor().input_shape() {
        return Err(Error::Shape(format!(
            "surrogate input {} differs from target input {}",
            surrogate.descriptor().input_shape(),
            target.descriptor().input_shape()
        )));
    }
    let batch = run_attack(&attacks(), surrogate, x, labels, probe_set_id, config)?;
    transfer_from_batch(surrogate, target, &batch, similarity)
}

/// Scores an already crafted batch on its source surrogate and on `target`.
pub fn transfer_from_batch(
    surrogate: &TrainedModel,
    target: &TrainedModel,
    batch: &AdversarialBatch,
    similarity: f64,
) -> Result<TransferRecord> {
    batch.verify()?;
    let own = attack_success(surrogate, batch)?;
    let transfer = attack_success(target, batch)?;
    let record = TransferRecord {
        surrogate: surrogate.id().to_string(),
        target: target.id().to_string(),
        attack: batch.config.clone(),
        n: batch.len(),
        surrogate_success: own.restricted,
        transfer_restricted: transfer.restricted,
        transfer_unrestricted: transfer.unrestricted,
        similarity,
        alignment: None,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub mean_cosine: f64,
    pub used: usize,
    /// Examples where either gradient was exactly zero.
    pub skipped: usize,
}

/// Mean cosine between the two models' per-example input gradients.
pub fn gradient_alignment(a: &TrainedModel, b: &TrainedModel, x: &Matrix, labels: &[usize]) -> Result<Alignment> {
    if a.descriptor().input_shape() != b.descriptor().input_shape() {
        return Err(Error::Shape("models disagree on input shape".into()));
    }
    let ga = a.input_gradient(x, labels)?;
    let gb = b.input_gradient(x, labels)?;
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..x.rows() {
        let (u, v) = (ga.row(i), gb.row(i));
        let norms = dot(u, u).sqrt() * dot(v, v).sqrt();
        if norms == 0.0 {
            continue;
        }
        total += (dot(u, v) / norms).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("every input gradient is zero".into()));
    }
    Ok(Alignment {
        mean_cosine: total / used as f64,
        used,
        skipped: x.rows() - used,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferRow {
    target: String,
    surrogate: String,
    similarity: f64,
    attack: String,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    random_start: bool,
    attack_seed: u64,
    n: usize,
    surrogate_success: f64,
    transfer_restricted: f64,
    transfer_unrestricted: f64,
    alignment: Option<f64>,
}

pub fn write_transfer_csv(path: impl AsRef<Path>, records: &[TransferRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(TransferRow {
            target: r.target.clone(),
            surrogate: r.surrogate.clone(),
            similarity: r.similarity,
            attack: r.attack.kind.clone(),
            epsilon: r.attack.epsilon,
            alpha: r.attack.alpha,
            steps: r.attack.steps,
            random_start: r.attack.random_start,
            attack_seed: r.attack.seed,
            n: r.n,
            surrogate_success: r.surrogate_success,
            transfer_restricted: r.transfer_restricted,
            transfer_unrestricted: r.transfer_unrestricted,
            alignment: r.alignment,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_transfer_csv(path: impl AsRef<Path>) -> Result<Vec<TransferRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<TransferRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            let record = TransferRecord {
                surrogate: row.surrogate,
                target: row.target,
                attack: AttackConfig {
                    kind: row.attack,
                    epsilon: row.epsilon,
                    alpha: row.alpha,
                    steps: row.steps,
                    random_start: row.random_start,
                    seed: row.attack_seed,
                },
                n: row.n,
                surrogate_success: row.surrogate_success,
                transfer_restricted: row.transfer_restricted,
                transfer_unrestricted: row.transfer_unrestricted,
                similarity: row.similarity,
                alignment: row.alignment,
            };
            record.validate()?;
            Ok(record)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::RngStream;
    use crate::zoo::{NetworkDescriptor, TrainingMeta};

    fn random_model(id: &str, seed: u64) -> TrainedModel {
        TrainedModel::initialized(NetworkDescriptor::mlp(id, 4, &[6], 2, seed).unwrap())
    }

    fn probe(seed: u64, n: usize) -> (Matrix, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let x = Matrix::from_fn(n, 4, |_, _| rng.uniform()).unwrap();
        let y = (0..n).map(|i| i % 2).collect();
        (x, y)
    }

    #[test]
    fn alignment_self_is_one_and_symmetric() {
        let a = random_model("a", 1);
        let b = random_model("b", 2);
        let (x, y) = probe(3, 20);
        let s = gradient_alignment(&a, &a, &x, &y).unwrap();
        assert!((s.mean_cosine - 1.0).abs() <= 1e-9);
        let ab = gradient_alignment(&a, &b, &x, &y).unwrap();
        let ba = gradient_alignment(&b, &a, &x, &y).unwrap();
        assert!((ab.mean_cosine - ba.mean_cosine).abs() <= 1e-10);
        assert!((-1.0..=1.0).contains(&ab.mean_cosine));

        // Naive recomputation.
        let (ga, gb) = (a.input_gradient(&x, &y).unwrap(), b.input_gradient(&x, &y).unwrap());
        let mut sum = 0.0;
        for i in 0..x.rows() {
            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
            for j in 0..x.cols() {
                uv += ga.get(i, j) * gb.get(i, j);
                uu += ga.get(i, j) * ga.get(i, j);
                vv += gb.get(i, j) * gb.get(i, j);
            }
            sum += uv / (uu.sqrt() * vv.sqrt());
        }
        assert!((ab.mean_cosine - sum / x.rows() as f64).abs() <= 1e-10);
    }

    #[test]
    fn negated_head_gives_minus_one() {
        let a = random_model("a", 7);
        let mut params = a.params().to_vec();
        let last = params.iter_mut().rev().find_map(|p| p.as_mut()).unwrap();
        last.weight = last.weight.scale(-1.0);
        last.bias.iter_mut().for_each(|b| *b = -*b);
        let neg = TrainedModel::from_parts(a.descriptor().renamed("neg", 7).unwrap(), params, TrainingMeta::default())
            .unwrap();
        let (x, y) = probe(8, 16);
        let s = gradient_alignment(&a, &neg, &x, &y).unwrap();
        assert!((s.mean_cosine + 1.0).abs() <= 1e-6, "{}", s.mean_cosine);
    }

    #[test]
    fn all_zero_gradients_are_degenerate() {
        let a = random_model("a", 1);
        let mut params = a.params().to_vec();
        for p in params.iter_mut().flatten() {
            p.weight = p.weight.scale(0.0);
        }
        let flat = TrainedModel::from_parts(a.descriptor().clone(), params, TrainingMeta::default()).unwrap();
        let (x, y) = probe(3, 5);
        assert!(matches!(gradient_alignment(&flat, &a, &x, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identical_copy_reproduces_white_box_rate() {
        let t = random_model("t", 11);
        let copy = t.with_id("copy").unwrap();
        let (x, _) = probe(4, 40);
        let y = t.predict(&x).unwrap();
        let cfg = AttackConfig::pgd(0.2, 0.05, 10, false, 0);
        let r = transfer_eval(&copy, &t, &x, &y, "p", &cfg, 1.0).unwrap();
        let batch = run_attack(&attacks(), &t, &x, &y, "p", &cfg).unwrap();
        let white = attack_success(&t, &batch).unwrap();
        assert_eq!(r.transfer_restricted, white.restricted);
        assert_eq!(r.transfer_unrestricted, white.unrestricted);
        assert_eq!(r.surrogate_success, white.restricted);

        let zero = transfer_eval(&copy, &t, &x, &y, "p", &AttackConfig::fgsm(0.0), 1.0).unwrap();
        assert_eq!(zero.transfer_restricted, 0.0);
        assert!(matches!(
            transfer_eval(&t, &t, &x, &y, "p", &cfg, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let rec = TransferRecord {
            surrogate: "s".into(),
            target: "t".into(),
            attack: AttackConfig::pgd(0.1, 0.01, 20, true, 77),
            n: 64,
            surrogate_success: 0.9,
            transfer_restricted: 0.4,
            transfer_unrestricted: 0.45,
            similarity: 0.62,
            alignment: Some(0.3),
        };
        let other = TransferRecord { alignment: None, ..rec.clone() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_transfer_csv(&path, &[rec.clone(), other.clone()]).unwrap();
        assert_eq!(read_transfer_csv(&path).unwrap(), vec![rec, other]);
    }
}
