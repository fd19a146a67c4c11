//! Activation capture on a fixed probe set and the AMAT interchange format.
//!
//! AMAT layout (all integers little-endian):
//!
//! ```text
//! "AMAT"            4 bytes
//! version           u8 = 0x01
//! dtype             u8 = 0x01 (f32 LE)
//! rows              u32
//! cols              u32
//! model id          u32 byte length + UTF-8
//! layer index       u32
//! probe-set id      u32 byte length + UTF-8
//! payload           rows * cols f32, row-major
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, RngStream};
use crate::zoo::{Dataset, Split, TrainedModel};

pub const AMAT_MAGIC: &[u8; 4] = b"AMAT";
pub const AMAT_VERSION: u8 = 0x01;
pub const AMAT_DTYPE_F32: u8 = 0x01;

/// Smallest probe set accepted for similarity work.
pub const MIN_PROBES: usize = 50;

/// One layer's responses to a probe set; row `i` belongs to probe `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub model_id: String,
    pub layer_index: usize,
    pub probe_set_id: String,
    data: Matrix,
}

impl ActivationMatrix {
    pub fn new(
        model_id: impl Into<String>,
        layer_index: usize,
        probe_set_id: impl Into<String>,
        data: Matrix,
    ) -> Result<Self> {
        if data.rows() < 2 {
            return Err(Error::Degenerate(format!("{} probes, need at least 2", data.rows())));
        }
        Ok(Self {
            model_id: model_id.into(),
            layer_index,
            probe_set_id: probe_set_id.into(),
            data,
        })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn n_probes(&self) -> usize {
        self.data.rows()
    }

    pub fn n_features(&self) -> usize {
        self.data.cols()
    }

    /// The values exactly as an AMAT file would store them.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.quantized(),
            ..self.clone()
        }
    }

    /// Restriction to a subset of probes, used for minibatching.
    pub fn select_probes(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.model_id.clone(),
            self.layer_index,
            self.probe_set_id.clone(),
            self.data.select_rows(indices)?,
        )
    }
}

/// Fixed, ordered inputs drawn from a dataset's test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub id: String,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl ProbeSet {
    /// Draws `size` test examples in a seeded order.
    pub fn draw(dataset: &Dataset, size: usize, seed: u64) -> Result<Self> {
        if size < MIN_PROBES {
            return Err(Error::Config(format!("probe set size {size} is below {MIN_PROBES}")));
        }
        let mut test = dataset.indices(Split::Test);
        if test.len() < size {
            return Err(Error::Config(format!(
                "test split has {} examples, probe set needs {size}",
                test.len()
            )));
        }
        let mut rng = RngStream::new(seed);
        rng.shuffle(&mut test);
        test.truncate(size);
        let spec = dataset.spec();
        Ok(Self {
            id: format!("{}-{}-s{}-p{}-{}", spec.kind, spec.n, spec.seed, size, seed),
            inputs: dataset.inputs().select_rows(&test)?,
            labels: test.iter().map(|&i| dataset.labels()[i]).collect(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Probe inputs as an AMAT-able matrix (model id "probes", layer 0).
    pub fn as_activation(&self) -> Result<ActivationMatrix> {
        ActivationMatrix::new("probes", 0, self.id.clone(), self.inputs.clone())
    }
}

/// Captures every post-nonlinearity layer and the logits, in layer order.
/// Conv outputs are flattened as (channel, height, width).
pub fn capture(model: &TrainedModel, probes: &ProbeSet) -> Result<Vec<ActivationMatrix>> {
    let out = model.forward(&probes.inputs)?;
    out.activations
        .into_iter()
        .map(|(layer, m)| ActivationMatrix::new(model.id(), layer, probes.id.clone(), m))
        .collect()
}

pub fn encode_amat(m: &ActivationMatrix) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(AMAT_MAGIC);
    w.u8(AMAT_VERSION);
    w.u8(AMAT_DTYPE_F32);
    w.len_u32(m.data.rows())?;
    w.len_u32(m.data.cols())?;
    w.string(&m.model_id)?;
    w.len_u32(m.layer_index)?;
    w.string(&m.probe_set_id)?;
    w.f32s(m.data.data());
    Ok(w.buf)
}

pub fn decode_amat(bytes: &[u8]) -> Result<ActivationMatrix> {
    let mut r = Reader::new(bytes);
    r.expect_magic(AMAT_MAGIC)?;
    let at = r.offset();
    let version = r.u8("version")?;
    if version != AMAT_VERSION {
        return Err(Error::format(at, format!("unsupported version {version:#04x}")));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != AMAT_DTYPE_F32 {
        return Err(Error::format(at, format!("unsupported dtype {dtype:#04x}")));
    }
    let at = r.offset();
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::format(at, format!("dimensions {rows}x{cols} overflow the file")))?;
    let model_id = r.string("model id")?;
    let layer_index = r.u32("layer index")? as usize;
    let probe_set_id = r.string("probe-set id")?;
    let at = r.offset();
    if count * 4 != r.remaining() {
        return Err(Error::format(
            at,
            format!("payload of {rows}x{cols} needs {} bytes, found {}", count * 4, r.remaining()),
        ));
    }
    let data = r.f32s(count, "payload")?;
    let data = Matrix::new(rows, cols, data).map_err(|e| Error::format(at, e.to_string()))?;
    ActivationMatrix::new(model_id, layer_index, probe_set_id, data)
}

pub fn save_amat(m: &ActivationMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_amat(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_amat(path: impl AsRef<Path>) -> Result<ActivationMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_amat(&bytes)
}

/// Headerless comma-separated decimals, one probe per line.
pub fn load_activation_csv(
    path: impl AsRef<Path>,
    model_id: &str,
    layer_index: usize,
    probe_set_id: &str,
) -> Result<ActivationMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: line {}: {e}", path.display(), line + 1)))?;
        rows.push(row);
    }
    let data = Matrix::from_rows(&rows)?;
    ActivationMatrix::new(model_id, layer_index, probe_set_id, data)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{generate_dataset, train, DatasetSpec, Hyperparams, NetworkDescriptor};

    fn small_setup() -> (TrainedModel, ProbeSet) {
        let data = generate_dataset(&DatasetSpec::new("blobs", 200, 2, 4)).unwrap();
        let d = NetworkDescriptor::mlp("mlp", 16, &[8], 2, 1).unwrap();
        let hyper = Hyperparams { epochs: 3, ..Hyperparams::default() };
        let m = train(&d, &data, &hyper).unwrap();
        let probes = ProbeSet::draw(&data, 50, 9).unwrap();
        (m, probes)
    }

    #[test]
    fn capture_layout() {
        let (m, probes) = small_setup();
        let a = capture(&m, &probes).unwrap();
        assert_eq!(a, capture(&m, &probes).unwrap());
        assert_eq!(a.len(), 2, "hidden post-relu and logits");
        assert!(a[0].layer_index < a[1].layer_index);
        assert!(a[0].data().data().iter().all(|&v| v >= 0.0));
        assert_eq!(a[1].n_features(), 2);
        assert_eq!(a[0].n_probes(), 50);
    }

    #[test]
    fn probe_set_rules() {
        let data = generate_dataset(&DatasetSpec::new("blobs", 200, 2, 4)).unwrap();
        assert!(matches!(ProbeSet::draw(&data, 49, 0), Err(Error::Config(_))));
        assert!(matches!(ProbeSet::draw(&data, 61, 0), Err(Error::Config(_))));
        let p = ProbeSet::draw(&data, 60, 0).unwrap();
        let test = data.indices(Split::Test);
        for i in 0..p.len() {
            assert!(test.iter().any(|&t| data.inputs().row(t) == p.inputs.row(i)));
        }
        assert_eq!(p, ProbeSet::draw(&data, 60, 0).unwrap());
    }

    #[test]
    fn amat_round_trip_after_quantization() {
        let mut rng = RngStream::new(5);
        let m = ActivationMatrix::new("model-a", 3, "probe-x", rng.normal_matrix(7, 4)).unwrap();
        let back = decode_amat(&encode_amat(&m).unwrap()).unwrap();
        assert_eq!(back, m.quantized());
        assert_eq!(decode_amat(&encode_amat(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn amat_length_of_known_matrix() {
        let data = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = ActivationMatrix::new("ab", 1, "xyz", data).unwrap();
        let bytes = encode_amat(&m).unwrap();
        // magic + version + dtype + rows + cols + (len + "ab") + layer + (len + "xyz")
        let header = 4 + 1 + 1 + 4 + 4 + (4 + 2) + 4 + (4 + 3);
        assert_eq!(bytes.len(), header + 24);
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn amat_errors_name_offsets() {
        let m = ActivationMatrix::new("a", 0, "p", Matrix::identity(3)).unwrap();
        let mut bytes = encode_amat(&m).unwrap();
        match decode_amat(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() - 36),
            other => panic!("{other:?}"),
        }
        bytes[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_amat(&bytes), Err(Error::Format { offset: 6, .. })));
        bytes[0] = b'B';
        assert!(matches!(decode_amat(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.csv");
        std::fs::write(&path, "1.5,2\n-3,4e-1\n0,0\n").unwrap();
        let m = load_activation_csv(&path, "ext", 2, "p").unwrap();
        assert_eq!(m.data().shape(), (3, 2));
        assert_eq!(m.data().get(1, 1), 0.4);
        assert!(matches!(
            load_activation_csv(dir.path().join("nope.csv"), "ext", 0, "p"),
            Err(Error::MissingDependency(_))
        ));
    }
}
