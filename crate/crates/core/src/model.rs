//! The code network: an MLP backbone `F`, the projection `P` (`k x d`) and the
//! real class-code matrix `C` (`L x k`).
//!
//! Instance codes are `sign(P F(x))`; class codes are `sign(C)`.

use std::path::Path;

use rand::Rng;

use crate::bitcode::{BitCode, Codebook};
use crate::diffcore::{linear_forward, sign_binarize, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Fully connected layer followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: DenseMatrix,
    /// `1 x out`
    pub bias: DenseMatrix,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = linear_forward(x, &self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.values()) {
                *o = (*o + b).max(0.0);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlcModel {
    input_dim: usize,
    backbone: Vec<DenseLayer>,
    projection: DenseMatrix,
    codes: DenseMatrix,
}

/// Instance codes together with the real projection outputs they came from.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub codes: Vec<BitCode>,
    /// `n x k` values of `P F(x)`.
    pub logits: DenseMatrix,
}

/// Tape handles for every trainable matrix, in parameter order.
#[derive(Debug, Clone)]
pub(crate) struct ModelVars {
    pub layers: Vec<(Var, Var)>,
    pub projection: Var,
    pub codes: Var,
}

impl ModelVars {
    /// Backbone and projection handles, optionally followed by the code matrix.
    pub fn params(&self, include_codes: bool) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.projection);
        if include_codes {
            out.push(self.codes);
        }
        out
    }
}

impl LlcModel {
    /// He-initialised backbone, `P ~ N(0, 1/d)` and `C ~ N(0, 1/k)`.
    pub fn new_random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        bits: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || bits == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Validation(
                "model dimensions must all be positive".into(),
            ));
        }
        let mut backbone = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            backbone.push(DenseLayer {
                weight: DenseMatrix::random_normal(width, fan_in, (2.0 / fan_in as f64).sqrt(), rng),
                bias: DenseMatrix::zeros(1, width),
            });
            fan_in = width;
        }
        let projection = DenseMatrix::random_normal(bits, fan_in, 1.0 / (fan_in as f64).sqrt(), rng);
        let codes = DenseMatrix::random_normal(classes, bits, 1.0 / (bits as f64).sqrt(), rng);
        Self::from_parts(input_dim, backbone, projection, codes)
    }

    pub fn from_parts(
        input_dim: usize,
        backbone: Vec<DenseLayer>,
        projection: DenseMatrix,
        codes: DenseMatrix,
    ) -> Result<Self> {
        let mut width = input_dim;
        for layer in &backbone {
            if layer.input_dim() != width {
                return Err(Error::len("backbone layer input", width, layer.input_dim()));
            }
            if layer.bias.shape() != (1, layer.output_dim()) {
                return Err(Error::dim(
                    "backbone layer bias",
                    (1, layer.output_dim()),
                    layer.bias.shape(),
                ));
            }
            width = layer.output_dim();
        }
        if projection.cols() != width {
            return Err(Error::len("projection input", width, projection.cols()));
        }
        if codes.cols() != projection.rows() {
            return Err(Error::len("code matrix bits", projection.rows(), codes.cols()));
        }
        let model = Self {
            input_dim,
            backbone,
            projection,
            codes,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("model construction".into()));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Backbone output width `d`.
    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn bits(&self) -> usize {
        self.projection.rows()
    }

    pub fn classes(&self) -> usize {
        self.codes.rows()
    }

    pub fn backbone(&self) -> &[DenseLayer] {
        &self.backbone
    }

    pub fn projection(&self) -> &DenseMatrix {
        &self.projection
    }

    pub fn codes(&self) -> &DenseMatrix {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut DenseMatrix {
        &mut self.codes
    }

    pub fn is_finite(&self) -> bool {
        self.backbone
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
            && self.projection.is_finite()
            && self.codes.is_finite()
    }

    /// The class codebook `sign(C)`.
    pub fn codebook(&self) -> Codebook {
        Codebook::from_real_rows(&self.codes)
    }

    fn check_input(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.input_dim {
            return Err(Error::len("model input", self.input_dim, batch.cols()));
        }
        Ok(())
    }

    /// Backbone output `F(x)`.
    pub fn features(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for layer in &self.backbone {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// `P F(x)`, one row per instance.
    pub fn projection_logits(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        linear_forward(&self.features(batch)?, &self.projection)
    }

    pub fn encode(&self, batch: &DenseMatrix) -> Result<Encoded> {
        let logits = self.projection_logits(batch)?;
        let codes = logits.row_iter().map(BitCode::from_real).collect();
        Ok(Encoded { codes, logits })
    }

    /// `sign(C) (P F(x))`: the real-valued class scores used while learning the codebook.
    pub fn class_scores(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let z = self.projection_logits(batch)?;
        linear_forward(&z, &sign_binarize(&self.codes))
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> ModelVars {
        let layers = self
            .backbone
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        ModelVars {
            layers,
            projection: tape.leaf(self.projection.clone()),
            codes: tape.leaf(self.codes.clone()),
        }
    }

    /// Records `P F(x)` on the tape.
    pub(crate) fn forward_projection(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &vars.layers {
            let lin = tape.linear(h, w)?;
            let biased = tape.bias_add(lin, b)?;
            h = tape.relu(biased);
        }
        tape.linear(h, vars.projection)
    }

    /// Mutable parameters in the same order as [`ModelVars::params`].
    pub(crate) fn params_mut(&mut self, include_codes: bool) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        for layer in &mut self.backbone {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.projection);
        if include_codes {
            out.push(&mut self.codes);
        }
        out
    }

    pub(crate) fn param_shapes(&self, include_codes: bool) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .backbone
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect();
        out.push(self.projection.shape());
        if include_codes {
            out.push(self.codes.shape());
        }
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Binary checkpoint layout (all integers little-endian):
///
/// ```text
/// "LLC1" | u32 version | u32 d | u32 k | u32 L | u32 layers
/// per layer: u32 rows | u32 cols | rows*cols f64   (weight with bias as last column)
/// P: k*d f64 | C: L*k f64 | u64 FNV-1a of every byte after the version field
/// ```
mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"LLC1";
    pub const VERSION: u32 = 1;

    pub fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn put_u32(out: &mut Vec<u8>, v: usize) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn put_values(out: &mut Vec<u8>, values: &[f64]) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(model: &LlcModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let payload_start = out.len();
        put_u32(&mut out, model.feature_dim());
        put_u32(&mut out, model.bits());
        put_u32(&mut out, model.classes());
        put_u32(&mut out, model.backbone.len());
        for layer in &model.backbone {
            let rows = layer.output_dim();
            let cols = layer.input_dim() + 1;
            put_u32(&mut out, rows);
            put_u32(&mut out, cols);
            for r in 0..rows {
                put_values(&mut out, layer.weight.row(r));
                put_values(&mut out, &[layer.bias.values()[r]]);
            }
        }
        put_values(&mut out, model.projection.values());
        put_values(&mut out, model.codes.values());
        let checksum = fnv1a(&out[payload_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(Error::Truncated(format!(
                    "checkpoint ends inside {what} at byte {}",
                    self.pos
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self, what: &str) -> Result<usize> {
            let b = self.take(4, what)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        }

        fn values(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
            let len = count.checked_mul(8).ok_or_else(|| {
                Error::Truncated(format!("{what} size overflows"))
            })?;
            let b = self.take(len, what)?;
            Ok(b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<LlcModel> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic("checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let payload_start = r.pos;
        let d = r.u32("d")?;
        let k = r.u32("k")?;
        let l = r.u32("L")?;
        let n_layers = r.u32("layer count")?;
        let mut backbone = Vec::with_capacity(n_layers.min(1024));
        let mut input_dim = None;
        for i in 0..n_layers {
            let rows = r.u32("layer rows")?;
            let cols = r.u32("layer cols")?;
            if cols == 0 {
                return Err(Error::Validation(format!("layer {i} has no bias column")));
            }
            let values = r.values(rows * cols, "layer values")?;
            let in_dim = cols - 1;
            input_dim.get_or_insert(in_dim);
            let mut weight = DenseMatrix::zeros(rows, in_dim);
            let mut bias = DenseMatrix::zeros(1, rows);
            for row in 0..rows {
                let src = &values[row * cols..(row + 1) * cols];
                weight.row_mut(row).copy_from_slice(&src[..in_dim]);
                bias.values_mut()[row] = src[in_dim];
            }
            backbone.push(DenseLayer { weight, bias });
        }
        if let Some(last) = backbone.last() {
            if last.output_dim() != d {
                return Err(Error::len("checkpoint feature dim", d, last.output_dim()));
            }
        }
        let projection = DenseMatrix::from_vec(k, d, r.values(k * d, "projection")?)?;
        let codes = DenseMatrix::from_vec(l, k, r.values(l * k, "code matrix")?)?;
        let payload_end = r.pos;
        let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        let computed = fnv1a(&bytes[payload_start..payload_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        LlcModel::from_parts(input_dim.unwrap_or(d), backbone, projection, codes)
    }
}
