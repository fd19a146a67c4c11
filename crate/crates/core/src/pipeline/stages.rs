//! Pipeline stages. Each stage reads its inputs from and writes its outputs
//! to the run directory, so any suffix of the pipeline can be rerun alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{capture, csv_error, load_amat, save_amat, ActivationMatrix, ProbeSet};
use crate::attacks::{attacks, export_batch, import_batch, run_attack};
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::riskeval::{
    build_report, gradient_alignment, read_transfer_csv, transfer_from_batch, write_transfer_csv, ReportConfig,
    RiskReport, TransferRecord,
};
use crate::selection::{pools_text, read_pools_csv, select_pools, write_pools_csv, SurrogatePools};
use crate::similarity::{aggregate_score, layer_matrix_with, read_similarity_csv, write_similarity_csv, LayerScope};
use crate::zoo::{generate_dataset, load_model, save_model, train, TrainedModel};

pub const STAGES: [&str; 7] = ["train-zoo", "capture", "similarity", "select", "attack", "evaluate", "report"];

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn zoo_csv(&self) -> PathBuf {
        self.root.join("zoo.csv")
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.trmz"))
    }

    pub fn probes(&self) -> PathBuf {
        self.root.join("probes.amat")
    }

    pub fn probe_labels(&self) -> PathBuf {
        self.root.join("probe_labels.csv")
    }

    pub fn activation(&self, model: &str, layer: usize) -> PathBuf {
        self.root.join("activations").join(format!("{model}_L{layer}.amat"))
    }

    pub fn similarity(&self) -> PathBuf {
        self.root.join("similarity.csv")
    }

    pub fn pools_csv(&self) -> PathBuf {
        self.root.join("pools.csv")
    }

    pub fn pools_txt(&self) -> PathBuf {
        self.root.join("pools.txt")
    }

    pub fn adversarial_dir(&self) -> PathBuf {
        self.root.join("adversarial")
    }

    pub fn adversarial_stem(surrogate: &str, attack: &str) -> String {
        format!("{surrogate}__{attack}")
    }

    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn curve(&self) -> PathBuf {
        self.root.join("curve.csv")
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.csv")
    }
}

fn hint(stage: &str, e: &Error) -> String {
    match e.root() {
        Error::MissingDependency(_) => {
            let prev = STAGES
                .iter()
                .position(|s| *s == stage)
                .and_then(|i| i.checked_sub(1))
                .map(|i| STAGES[i]);
            match prev {
                Some(p) => format!("run the earlier stages first (at least '{p}') with the same config"),
                None => "check that the input files exist".into(),
            }
        }
        Error::Policy(_) => "choose thresholds with 0 < r2 < r1 < 1 and a minimum total above 2".into(),
        Error::InsufficientPool { .. } | Error::InsufficientTotal { .. } => {
            "adjust --r1/--r2 using the nearest misses, or add more varied surrogates".into()
        }
        Error::Training { .. } => "lower the learning rate or the number of epochs".into(),
        Error::Config(_) | Error::Shape(_) => "check the configuration file".into(),
        Error::Degenerate(_) | Error::RankDeficient(_) | Error::InsufficientData(_) | Error::Instability { .. } => {
            "the zoo is too uniform or too small; vary the surrogates or enlarge the probe set".into()
        }
        Error::Numerical(_) => "this indicates a bug; rerun with the same seed and report it".into(),
        _ => "see the error above".into(),
    }
}

fn staged<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            hint: hint(stage, &e),
            source: Box::new(e),
        },
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ZooRow {
    id: String,
    role: String,
    descriptor: String,
    epochs: usize,
    learning_rate: f64,
    subsample: f64,
    train_accuracy: f64,
    test_accuracy: f64,
}

/// Trains the target and every surrogate and saves them under `models/`.
pub fn train_zoo(cfg: &RunConfig) -> Result<Vec<TrainedModel>> {
    staged("train-zoo", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        create_dir(&layout.root.join("models"))?;
        write(&layout.config(), &cfg.to_text())?;
        let dataset = generate_dataset(&cfg.dataset_spec())?;
        let specs = cfg.models()?;
        let models = specs
            .par_iter()
            .map(|spec| train(&cfg.descriptor(spec)?, &dataset, &cfg.hyperparams(spec)))
            .collect::<Result<Vec<_>>>()?;
        let path = layout.zoo_csv();
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for (i, m) in models.iter().enumerate() {
            save_model(m, layout.model(m.id()))?;
            let meta = m.meta();
            w.serialize(ZooRow {
                id: m.id().to_string(),
                role: if i == 0 { "target" } else { "surrogate" }.into(),
                descriptor: m.descriptor().to_text().replace('\n', "; "),
                epochs: meta.epochs,
                learning_rate: meta.learning_rate,
                subsample: meta.subsample,
                train_accuracy: meta.train_accuracy,
                test_accuracy: meta.test_accuracy,
            })
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(models)
    })
}

fn load_probes(layout: &Layout) -> Result<ProbeSet> {
    let inputs = load_amat(layout.probes())?;
    let path = layout.probe_labels();
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let labels = r
        .deserialize::<(usize, usize)>()
        .map(|row| row.map(|(_, y)| y).map_err(|e| csv_error(&path, e)))
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != inputs.n_probes() {
        return Err(Error::Shape(format!(
            "{} probe labels for {} probes",
            labels.len(),
            inputs.n_probes()
        )));
    }
    Ok(ProbeSet {
        id: inputs.probe_set_id.clone(),
        inputs: inputs.data().clone(),
        labels,
        seed: 0,
    })
}

fn load_zoo_model(layout: &Layout, id: &str) -> Result<TrainedModel> {
    let m = load_model(layout.model(id))?;
    if m.id() != id {
        return Err(Error::Config(format!("{} holds model '{}'", layout.model(id).display(), m.id())));
    }
    Ok(m)
}

/// Draws the probe set and stores every model's activations on it.
pub fn capture_stage(cfg: &RunConfig) -> Result<()> {
    staged("capture", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        create_dir(&layout.root.join("activations"))?;
        let dataset = generate_dataset(&cfg.dataset_spec())?;
        let probes = ProbeSet::draw(&dataset, cfg.probe_size, cfg.probe_seed())?;
        save_amat(&probes.as_activation()?, layout.probes())?;
        let path = layout.probe_labels();
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["index", "label"]).map_err(|e| csv_error(&path, e))?;
        for (i, y) in probes.labels.iter().enumerate() {
            w.write_record([i.to_string(), y.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let probes = load_probes(&layout)?;
        cfg.models()?.par_iter().try_for_each(|spec| {
            let model = load_zoo_model(&layout, &spec.id)?;
            for act in capture(&model, &probes)? {
                save_amat(&act, layout.activation(&spec.id, act.layer_index))?;
            }
            Ok(())
        })
    })
}

fn load_activations(cfg: &RunConfig, layout: &Layout, id: &str) -> Result<Vec<ActivationMatrix>> {
    let spec = cfg.models()?.into_iter().find(|m| m.id == id).expect("configured model");
    cfg.descriptor(spec)?
        .capturable_layers()
        .into_iter()
        .map(|layer| load_amat(layout.activation(id, layer)))
        .collect()
}

/// Layer-pair grids and whole-model scores of every surrogate against the
/// target.
pub fn similarity_stage(cfg: &RunConfig) -> Result<()> {
    staged("similarity", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        let kernel = cfg.kernel()?;
        let aggregator = cfg.aggregator()?;
        let target = cfg.target()?;
        let acts_t = load_activations(cfg, &layout, &target.id)?;
        let per_surrogate = cfg
            .surrogates
            .par_iter()
            .map(|s| {
                let acts_s = load_activations(cfg, &layout, &s.id)?;
                let lm = layer_matrix_with(&acts_t, &acts_s, kernel.as_ref(), cfg.estimator)?;
                let mut records = lm.records();
                records.push(aggregate_score(&lm, aggregator.as_ref())?);
                Ok(records)
            })
            .collect::<Result<Vec<_>>>()?;
        write_similarity_csv(layout.similarity(), &per_surrogate.concat())
    })
}

/// Splits surrogates into M1 and M2 from the stored whole-model scores.
pub fn select_stage(cfg: &RunConfig) -> Result<SurrogatePools> {
    staged("select", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        let policy = cfg.policy()?;
        let target = &cfg.target()?.id;
        let records: Vec<_> = read_similarity_csv(layout.similarity())?
            .into_iter()
            .filter(|r| r.scope == LayerScope::Aggregate && r.method == policy.method && &r.model_a == target)
            .collect();
        for s in &cfg.surrogates {
            if !records.iter().any(|r| r.model_b == s.id) {
                return Err(Error::Config(format!(
                    "{} has no {} score for '{}'",
                    layout.similarity().display(),
                    policy.method,
                    s.id
                )));
            }
        }
        let pools = select_pools(&records, &policy)?;
        write_pools_csv(layout.pools_csv(), &pools)?;
        write(&layout.pools_txt(), &pools_text(&pools))?;
        Ok(pools)
    })
}

fn load_pools(cfg: &RunConfig, layout: &Layout) -> Result<SurrogatePools> {
    let pools = read_pools_csv(layout.pools_csv(), &cfg.policy()?)?;
    for m in pools.tested() {
        cfg.surrogate(&m.id)?;
    }
    Ok(pools)
}

/// Crafts adversarial probe batches on every M1 and M2 surrogate.
pub fn attack_stage(cfg: &RunConfig) -> Result<()> {
    staged("attack", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        let pools = load_pools(cfg, &layout)?;
        let probes = load_probes(&layout)?;
        let dir = layout.adversarial_dir();
        create_dir(&dir)?;
        let registry = attacks();
        let jobs: Vec<_> = pools
            .tested()
            .flat_map(|m| cfg.attacks.iter().map(move |a| (m.id.clone(), a)))
            .collect();
        jobs.par_iter().try_for_each(|(sid, attack)| {
            let model = load_zoo_model(&layout, sid)?;
            let config = cfg.attack_for(attack, sid);
            let batch = run_attack(&registry, &model, &probes.inputs, &probes.labels, &probes.id, &config)?;
            export_batch(&batch, &model, &dir, &Layout::adversarial_stem(sid, &attack.name))
        })
    })
}

/// Scores the stored batches on the target and writes `transfer.csv`.
pub fn evaluate_stage(cfg: &RunConfig) -> Result<Vec<TransferRecord>> {
    staged("evaluate", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        let pools = load_pools(cfg, &layout)?;
        let probes = load_probes(&layout)?;
        let target = load_zoo_model(&layout, &cfg.target()?.id)?;
        let jobs: Vec<_> = pools
            .tested()
            .flat_map(|m| cfg.attacks.iter().map(move |a| (m, a)))
            .collect();
        let records = jobs
            .par_iter()
            .map(|(member, attack)| {
                let surrogate = load_zoo_model(&layout, &member.id)?;
                let config = cfg.attack_for(attack, &member.id);
                let stem = Layout::adversarial_stem(&member.id, &attack.name);
                let batch = import_batch(&layout.adversarial_dir(), &stem, &config)?;
                let mut record = transfer_from_batch(&surrogate, &target, &batch, member.score)?;
                record.alignment = match gradient_alignment(&surrogate, &target, &probes.inputs, &probes.labels) {
                    Ok(a) => Some(a.mean_cosine),
                    Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()?;
        write_transfer_csv(layout.transfer(), &records)?;
        Ok(records)
    })
}

fn metadata(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert("master_seed".into(), cfg.master_seed.to_string());
    m.insert(
        "seed_rule".into(),
        "first 8 bytes LE of sha256(master_seed u64 LE || stage || 0x00 || entity)".into(),
    );
    let ds = cfg.dataset_spec();
    m.insert(
        "dataset".into(),
        format!("{} n={} classes={} seed={}", ds.kind, ds.n, ds.classes, ds.seed),
    );
    for spec in cfg.models()? {
        let role = if spec.id == cfg.target()?.id { "target" } else { "surrogate" };
        let h = cfg.hyperparams(spec);
        m.insert(
            format!("zoo.{}", spec.id),
            format!(
                "{role} {} width={} epochs={} lr={} subsample={}",
                spec.arch, spec.width, h.epochs, h.learning_rate, h.subsample
            ),
        );
    }
    m.insert("probe_size".into(), cfg.probe_size.to_string());
    m.insert("similarity.kernel".into(), cfg.kernel.clone());
    m.insert("similarity.scope".into(), cfg.scope.clone());
    m.insert("similarity.estimator".into(), cfg.estimator.as_str().into());
    m.insert("transfer_rate".into(), "restricted".into());
    for a in &cfg.attacks {
        m.insert(format!("attack.{}", a.name), a.config.to_string());
    }
    Ok(m)
}

/// Fits the risk curve, writes the report files and returns the report
/// (without a timestamp).
pub fn report_stage(cfg: &RunConfig) -> Result<RiskReport> {
    staged("report", || {
        cfg.validate()?;
        let layout = Layout::new(&cfg.out);
        let pools = load_pools(cfg, &layout)?;
        let records = read_transfer_csv(layout.transfer())?;
        let report_cfg = ReportConfig {
            attacks: cfg.attacks.iter().map(|a| a.config.clone()).collect(),
            link: cfg.link()?,
            bootstrap_trials: cfg.bootstrap_trials,
            bootstrap_seed: cfg.bootstrap_seed(),
            metadata: metadata(cfg)?,
        };
        let report = build_report(&pools, &records, &report_cfg)?;
        let stamped = report
            .clone()
            .with_timestamp(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        stamped.write_json(layout.report_json())?;
        write(
            &layout.report_txt(),
            &format!("{}\n{}", pools_text(&pools), report.summary_text()),
        )?;
        report.write_curve_csv(layout.curve())?;
        write_transfer_csv(layout.records(), &report.records)?;
        Ok(report)
    })
}

/// Runs every stage in order.
pub fn run(cfg: &RunConfig) -> Result<RiskReport> {
    staged("validate", || cfg.validate().map(|_| ()))?;
    train_zoo(cfg)?;
    capture_stage(cfg)?;
    similarity_stage(cfg)?;
    select_stage(cfg)?;
    attack_stage(cfg)?;
    evaluate_stage(cfg)?;
    report_stage(cfg)
}
