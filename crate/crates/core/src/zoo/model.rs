use crate::error::{Error, Result};
use crate::matcore::{Matrix, RngStream};
use crate::zoo::dataset::{Dataset, Split};
use crate::zoo::network::{
    self, backward, check_params, cross_entropy, cross_entropy_grad, forward_cached, LayerParams,
    NetworkDescriptor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each class's training examples actually used.
    pub subsample: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            subsample: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub subsample: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training loss before the first epoch and after each epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    descriptor: NetworkDescriptor,
    params: Vec<Option<LayerParams>>,
    meta: TrainingMeta,
}

/// Logits plus the captured post-nonlinearity activations, keyed by layer
/// position in the descriptor.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub activations: Vec<(usize, Matrix)>,
}

impl TrainedModel {
    pub fn from_parts(
        descriptor: NetworkDescriptor,
        params: Vec<Option<LayerParams>>,
        meta: TrainingMeta,
    ) -> Result<Self> {
        check_params(&descriptor, &params)?;
        Ok(Self {
            descriptor,
            params,
            meta,
        })
    }

    /// Untrained model at its seeded initialization.
    pub fn initialized(descriptor: NetworkDescriptor) -> Self {
        let params = network::initialize(&descriptor);
        Self {
            descriptor,
            params,
            meta: TrainingMeta::default(),
        }
    }

    pub fn id(&self) -> &str {
        self.descriptor.id()
    }

    pub fn descriptor(&self) -> &NetworkDescriptor {
        &self.descriptor
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    /// Copy under a new id (same parameters).
    pub fn with_id(&self, id: &str) -> Result<Self> {
        let descriptor = self.descriptor.renamed(id, self.descriptor.init_seed())?;
        Ok(Self {
            descriptor,
            params: self.params.clone(),
            meta: self.meta.clone(),
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        let cache = forward_cached(&self.descriptor, &self.params, x)?;
        let activations = self
            .descriptor
            .capturable_layers()
            .into_iter()
            .map(|i| (i, cache.inputs[i + 1].clone()))
            .collect();
        Ok(ForwardOutput {
            logits: cache.logits().clone(),
            activations,
        })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(forward_cached(&self.descriptor, &self.params, x)?.logits().clone())
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Per-example cross-entropy.
    pub fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        self.check_labels(x, labels)?;
        Ok(cross_entropy(&self.logits(x)?, labels))
    }

    /// Gradient of each example's cross-entropy w.r.t. its own input row.
    pub fn input_gradient(&self, x: &Matrix, labels: &[usize]) -> Result<Matrix> {
        self.check_labels(x, labels)?;
        let cache = forward_cached(&self.descriptor, &self.params, x)?;
        let g = cross_entropy_grad(cache.logits(), labels);
        let (_, gx) = backward(&self.descriptor, &self.params, &cache, g, false);
        Ok(gx)
    }

    fn check_labels(&self, x: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != x.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.descriptor.classes()) {
            return Err(Error::Shape(format!("label {bad} out of range")));
        }
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class seeded subsample of the train split, at least one per class.
fn training_indices(dataset: &Dataset, fraction: f64, rng: &mut RngStream) -> Vec<usize> {
    let train = dataset.indices(Split::Train);
    if fraction >= 1.0 {
        return train;
    }
    let mut picked = Vec::new();
    for c in 0..dataset.classes() {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| dataset.labels()[i] == c).collect();
        rng.shuffle(&mut members);
        let keep = ((members.len() as f64 * fraction).ceil() as usize).clamp(1, members.len());
        picked.extend_from_slice(&members[..keep]);
    }
    picked.sort_unstable();
    picked
}

/// Minibatch SGD on mean softmax cross-entropy.
///
/// Given the descriptor seed and `hyper.seed`, the result is bit-reproducible.
/// Final parameters are rounded to `f32` so that saved models reload exactly.
pub fn train(descriptor: &NetworkDescriptor, dataset: &Dataset, hyper: &Hyperparams) -> Result<TrainedModel> {
    if dataset.input_shape() != descriptor.input_shape() {
        return Err(Error::Shape(format!(
            "{} expects input {}, dataset has {}",
            descriptor.id(),
            descriptor.input_shape(),
            dataset.input_shape()
        )));
    }
    if dataset.classes() != descriptor.classes() {
        return Err(Error::Shape(format!(
            "{} has {} classes, dataset has {}",
            descriptor.id(),
            descriptor.classes(),
            dataset.classes()
        )));
    }
    if hyper.batch_size == 0 || hyper.learning_rate <= 0.0 || !(hyper.subsample > 0.0 && hyper.subsample <= 1.0) {
        return Err(Error::Config(format!("invalid hyperparameters {hyper:?}")));
    }

    let mut rng = RngStream::new(hyper.seed);
    let mut indices = training_indices(dataset, hyper.subsample, &mut rng);
    let x_all = dataset.inputs().select_rows(&indices)?;
    let y_all: Vec<usize> = indices.iter().map(|&i| dataset.labels()[i]).collect();

    let mut params = network::initialize(descriptor);
    let mean_loss = |params: &[Option<LayerParams>]| -> Result<f64> {
        let cache = forward_cached(descriptor, params, &x_all)?;
        let l = cross_entropy(cache.logits(), &y_all);
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let mut loss_history = vec![mean_loss(&params)?];

    for epoch in 1..=hyper.epochs {
        rng.shuffle(&mut indices);
        for batch in indices.chunks(hyper.batch_size) {
            let xb = dataset.inputs().select_rows(batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let cache = forward_cached(descriptor, &params, &xb)?;
            let g = cross_entropy_grad(cache.logits(), &yb).scale(1.0 / batch.len() as f64);
            let (grads, _) = backward(descriptor, &params, &cache, g, true);
            for (p, gp) in params.iter_mut().zip(grads) {
                if let (Some(p), Some(gp)) = (p.as_mut(), gp) {
                    for (w, dw) in p.weight.data_mut().iter_mut().zip(gp.weight.data()) {
                        *w -= hyper.learning_rate * dw;
                    }
                    for (b, db) in p.bias.iter_mut().zip(&gp.bias) {
                        *b -= hyper.learning_rate * db;
                    }
                }
            }
        }
        let finite = params
            .iter()
            .flatten()
            .all(|p| p.weight.data().iter().chain(&p.bias).all(|v| v.is_finite()));
        let loss = if finite { mean_loss(&params).ok() } else { None };
        match loss {
            Some(l) if l.is_finite() => loss_history.push(l),
            _ => {
                return Err(Error::Training {
                    epoch,
                    message: "loss is not finite".into(),
                })
            }
        }
    }

    for p in params.iter_mut().flatten() {
        p.weight = p.weight.quantized();
        p.bias.iter_mut().for_each(|b| *b = *b as f32 as f64);
    }
    let mut model = TrainedModel {
        descriptor: descriptor.clone(),
        params,
        meta: TrainingMeta {
            epochs: hyper.epochs,
            learning_rate: hyper.learning_rate,
            batch_size: hyper.batch_size,
            subsample: hyper.subsample,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            loss_history,
        },
    };
    model.meta.train_accuracy = model.accuracy(&x_all, &y_all)?;
    let (xt, yt) = dataset.subset(Split::Test);
    model.meta.test_accuracy = model.accuracy(&xt, &yt)?;
    Ok(model)
}
