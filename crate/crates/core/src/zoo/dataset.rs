//! Procedurally generated classification datasets with inputs in `[0, 1]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matcore::{Matrix, RngStream};
use crate::registry::{Named, Registry};
use crate::zoo::network::TensorShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// What to generate. `dim` and `noise` fall back to per-kind defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: String,
    pub n: usize,
    pub classes: usize,
    pub dim: Option<usize>,
    pub noise: Option<f64>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: impl Into<String>, n: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: kind.into(),
            n,
            classes,
            dim: None,
            noise: None,
            seed,
        }
    }
}

/// A family of synthetic inputs. Labels are fixed by the caller; the
/// generator only draws inputs for them.
pub trait DatasetGenerator: Named + Send + Sync {
    fn input_shape(&self, spec: &DatasetSpec) -> Result<TensorShape>;

    /// One input row per label. Values outside `[0, 1]` are clipped afterwards.
    fn draw(&self, spec: &DatasetSpec, labels: &[usize], rng: &mut RngStream) -> Result<Vec<Vec<f64>>>;
}

/// Isotropic Gaussian clusters around uniformly placed centers.
pub struct Blobs;

impl Blobs {
    pub const DEFAULT_DIM: usize = 16;
    pub const DEFAULT_NOISE: f64 = 0.12;
}

impl Named for Blobs {
    fn name(&self) -> &'static str {
        "blobs"
    }
}

impl DatasetGenerator for Blobs {
    fn input_shape(&self, spec: &DatasetSpec) -> Result<TensorShape> {
        match spec.dim.unwrap_or(Self::DEFAULT_DIM) {
            0 => Err(Error::Config("blobs dimension must be positive".into())),
            d => Ok(TensorShape::Flat(d)),
        }
    }

    fn draw(&self, spec: &DatasetSpec, labels: &[usize], rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        let dim = self.input_shape(spec)?.len();
        let noise = spec.noise.unwrap_or(Self::DEFAULT_NOISE);
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| (0..dim).map(|_| rng.uniform_range(0.2, 0.8)).collect())
            .collect();
        Ok(labels
            .iter()
            .map(|&y| centers[y].iter().map(|c| c + noise * rng.normal()).collect())
            .collect())
    }
}

/// Two interleaved half circles.
pub struct Moons;

impl Named for Moons {
    fn name(&self) -> &'static str {
        "moons"
    }
}

impl DatasetGenerator for Moons {
    fn input_shape(&self, spec: &DatasetSpec) -> Result<TensorShape> {
        if spec.classes != 2 {
            return Err(Error::Config("moons supports exactly 2 classes".into()));
        }
        match spec.dim {
            None | Some(2) => Ok(TensorShape::Flat(2)),
            Some(d) => Err(Error::Config(format!("moons is 2-dimensional, got dim={d}"))),
        }
    }

    fn draw(&self, spec: &DatasetSpec, labels: &[usize], rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        self.input_shape(spec)?;
        let noise = spec.noise.unwrap_or(0.1);
        Ok(labels
            .iter()
            .map(|&y| {
                let t = rng.uniform() * std::f64::consts::PI;
                let (x0, x1) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x0 = x0 + noise * rng.normal();
                let x1 = x1 + noise * rng.normal();
                vec![(x0 + 1.2) / 3.4, (x1 + 0.8) / 2.3]
            })
            .collect())
    }
}

/// Noisy, jittered 8x8 renderings of the ten digit glyphs.
pub struct Digits8x8;

const GLYPHS: [[&str; 8]; 10] = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"],
    ["..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.", "........"],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..", "........"],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", "........"],
    [".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###...", "........"],
];

impl Named for Digits8x8 {
    fn name(&self) -> &'static str {
        "digits8x8"
    }
}

impl DatasetGenerator for Digits8x8 {
    fn input_shape(&self, spec: &DatasetSpec) -> Result<TensorShape> {
        if spec.classes > GLYPHS.len() {
            return Err(Error::Config(format!("digits8x8 supports at most 10 classes, got {}", spec.classes)));
        }
        match spec.dim {
            None | Some(64) => Ok(TensorShape::Image {
                channels: 1,
                height: 8,
                width: 8,
            }),
            Some(d) => Err(Error::Config(format!("digits8x8 is 64-dimensional, got dim={d}"))),
        }
    }

    fn draw(&self, spec: &DatasetSpec, labels: &[usize], rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        self.input_shape(spec)?;
        let noise = spec.noise.unwrap_or(0.15);
        Ok(labels
            .iter()
            .map(|&y| {
                let dy = rng.index(3) as isize - 1;
                let dx = rng.index(3) as isize - 1;
                let ink = rng.uniform_range(0.6, 1.0);
                let mut img = vec![0.0; 64];
                for (r, row) in GLYPHS[y].iter().enumerate() {
                    for (c, ch) in row.bytes().enumerate() {
                        let (rr, cc) = (r as isize + dy, c as isize + dx);
                        if ch == b'#' && (0..8).contains(&rr) && (0..8).contains(&cc) {
                            img[(rr * 8 + cc) as usize] = ink;
                        }
                    }
                }
                img.iter_mut().for_each(|v| *v += noise * rng.normal());
                img
            })
            .collect())
    }
}

pub fn dataset_generators() -> Registry<dyn DatasetGenerator> {
    Registry::<dyn DatasetGenerator>::new("dataset kind")
        .with(Arc::new(Blobs))
        .with(Arc::new(Moons))
        .with(Arc::new(Digits8x8))
}

/// Fraction of each class assigned to the train split (rounded up).
const TRAIN_FRACTION_TENTHS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    input_shape: TensorShape,
    inputs: Matrix,
    labels: Vec<usize>,
    split: Vec<Split>,
}

impl Dataset {
    /// Validates a dataset assembled from parts.
    pub fn from_parts(
        spec: DatasetSpec,
        input_shape: TensorShape,
        inputs: Matrix,
        labels: Vec<usize>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = inputs.rows();
        if labels.len() != n || split.len() != n || inputs.cols() != input_shape.len() {
            return Err(Error::Shape("dataset parts disagree in size".into()));
        }
        if labels.iter().any(|&y| y >= spec.classes) {
            return Err(Error::Config("label out of range".into()));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("dataset inputs must lie in [0, 1]".into()));
        }
        let mut seen = vec![false; spec.classes];
        let mut n_test = 0;
        for (&y, &s) in labels.iter().zip(&split) {
            match s {
                Split::Train => seen[y] = true,
                Split::Test => n_test += 1,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Degenerate(format!("class {missing} absent from train split")));
        }
        if n_test == 0 {
            return Err(Error::Degenerate("empty test split".into()));
        }
        Ok(Self {
            spec,
            input_shape,
            inputs,
            labels,
            split,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn subset(&self, which: Split) -> (Matrix, Vec<usize>) {
        let idx = self.indices(which);
        let x = self.inputs.select_rows(&idx).expect("splits are non-empty");
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Generates a balanced dataset and its stratified train/test split.
///
/// Labels cycle through the classes before shuffling, so class counts differ
/// by at most one. Inputs are clipped to `[0, 1]` and rounded to `f32`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    generate_with(&dataset_generators(), spec)
}

pub fn generate_with(registry: &Registry<dyn DatasetGenerator>, spec: &DatasetSpec) -> Result<Dataset> {
    let generator = registry.get(&spec.kind)?;
    if spec.classes < 2 {
        return Err(Error::Config("datasets need at least 2 classes".into()));
    }
    if spec.n < 10 * spec.classes {
        return Err(Error::Config(format!(
            "n = {} is below 10 x classes = {}",
            spec.n,
            10 * spec.classes
        )));
    }
    let shape = generator.input_shape(spec)?;
    let mut rng = RngStream::new(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let rows = generator.draw(spec, &labels, &mut rng)?;
    let data: Vec<f64> = rows
        .into_iter()
        .flatten()
        .map(|v| v.clamp(0.0, 1.0) as f32 as f64)
        .collect();
    let inputs = Matrix::new(spec.n, shape.len(), data)?;

    let mut per_class = vec![0usize; spec.classes];
    labels.iter().for_each(|&y| per_class[y] += 1);
    let quota: Vec<usize> = per_class
        .iter()
        .map(|&c| (c * TRAIN_FRACTION_TENTHS).div_ceil(10))
        .collect();
    let mut taken = vec![0usize; spec.classes];
    let split = labels
        .iter()
        .map(|&y| {
            taken[y] += 1;
            if taken[y] <= quota[y] {
                Split::Train
            } else {
                Split::Test
            }
        })
        .collect();
    Dataset::from_parts(spec.clone(), shape, inputs, labels, split)
}
