//! Two-tower recurrent block encoder.
//!
//! Each architecture owns one tower: a stack of recurrent layers that reads a
//! block's instruction embeddings left to right. The final hidden state of the
//! top layer is the block embedding, and two embeddings are compared with
//! `exp(-‖e1 - e2‖₁)`.

mod cell;
mod io;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Arch;
use crate::error::{Error, Result};

pub use io::{read_params, write_params};
pub use model::BlockEncoder;
pub use train::{
    gradient_check, pair_gradients, pair_loss, pair_similarity, train, train_from, EpochRecord, PairInput, TrainOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
    Rnn,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Lstm, CellKind::Gru, CellKind::Rnn];

    /// Number of stacked gate blocks in each weight matrix.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Rnn => "rnn",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "rnn" => Ok(CellKind::Rnn),
            _ => Err(Error::BadConfig(format!("unknown cell type {s:?}"))),
        }
    }
}

/// LSTM memory update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellUpdate {
    /// `c_t = i ⊙ c̃ + f ⊙ c_{t-1}`
    #[default]
    Standard,
    /// `c_t = i ⊙ c̃ + f ⊙ c̃`, which keeps no memory across steps.
    CandidateOnly,
}

/// Layer geometry shared by both towers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetShape {
    pub cell: CellKind,
    pub update: CellUpdate,
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::BadConfig(format!(
                "layers, input and hidden dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub cell: CellKind,
    pub update: CellUpdate,
    pub lr: f64,
    /// Upper bound on training epochs.
    pub epochs: usize,
    /// Stop after this many epochs without a better validation AUC.
    pub patience: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            input_dim: 100,
            hidden_dim: 50,
            cell: CellKind::Lstm,
            update: CellUpdate::Standard,
            lr: 0.05,
            epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn shape(&self) -> NetShape {
        NetShape {
            cell: self.cell,
            update: self.update,
            layers: self.layers,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Weights of one recurrent layer. Gate blocks are stacked row-wise:
/// LSTM `(i, f, c, o)`, GRU `(z, r, n)`, plain RNN a single block.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `(gates·hidden) × input_dim`, row-major.
    pub w: Vec<f64>,
    /// `(gates·hidden) × hidden_dim`, row-major.
    pub u: Vec<f64>,
    /// `gates·hidden`.
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(gates: usize, input_dim: usize, hidden_dim: usize) -> Self {
        let rows = gates * hidden_dim;
        Layer {
            input_dim,
            hidden_dim,
            w: vec![0.0; rows * input_dim],
            u: vec![0.0; rows * hidden_dim],
            b: vec![0.0; rows],
        }
    }

    /// Input weights of gate `g`, a `hidden × input` block.
    pub fn w_gate(&self, g: usize) -> &[f64] {
        let n = self.hidden_dim * self.input_dim;
        &self.w[g * n..(g + 1) * n]
    }

    /// Recurrent weights of gate `g`, a `hidden × hidden` block.
    pub fn u_gate(&self, g: usize) -> &[f64] {
        let n = self.hidden_dim * self.hidden_dim;
        &self.u[g * n..(g + 1) * n]
    }

    pub fn b_gate(&self, g: usize) -> &[f64] {
        &self.b[g * self.hidden_dim..(g + 1) * self.hidden_dim]
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.u).chain(&self.b)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(&mut self.u).chain(&mut self.b)
    }
}

/// Tower slot of an architecture: x86-64 blocks use tower 0, ARM tower 1.
pub fn tower_of(arch: Arch) -> usize {
    match arch {
        Arch::X86_64 => 0,
        Arch::Arm => 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub shape: NetShape,
    pub towers: [Vec<Layer>; 2],
}

impl EncoderParams {
    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let tower = || {
            (0..shape.layers)
                .map(|l| Layer::zeros(shape.cell.gates(), shape.layer_input_dim(l), shape.hidden_dim))
                .collect::<Vec<_>>()
        };
        Ok(EncoderParams {
            shape,
            towers: [tower(), tower()],
        })
    }

    pub fn tower(&self, arch: Arch) -> &[Layer] {
        &self.towers[tower_of(arch)]
    }

    /// All parameters in storage order: tower 0 then tower 1, each layer
    /// bottom-up as `W`, `U`, `b`.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.towers.iter().flatten().flat_map(Layer::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.towers.iter_mut().flatten().flat_map(Layer::values_mut)
    }

    /// The `idx`-th value in storage order.
    pub fn value_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for layer in self.towers.iter_mut().flatten() {
            for v in [&mut layer.w, &mut layer.u, &mut layer.b] {
                if idx < v.len() {
                    return Some(&mut v[idx]);
                }
                idx -= v.len();
            }
        }
        None
    }

    pub fn num_values(&self) -> usize {
        self.towers
            .iter()
            .flatten()
            .map(|l| l.w.len() + l.u.len() + l.b.len())
            .sum()
    }

    pub fn fill(&mut self, v: f64) {
        self.values_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }
}

/// Glorot-uniform weights per gate block, forget-gate bias 1, other biases 0.
pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let shape = cfg.shape();
    let mut p = EncoderParams::zeros(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = shape.hidden_dim;
    for layer in p.towers.iter_mut().flatten() {
        let glorot = |fan_in: usize| (6.0 / (fan_in + h) as f64).sqrt();
        let lw = glorot(layer.input_dim);
        layer.w.iter_mut().for_each(|x| *x = rng.random_range(-lw..lw));
        let lu = glorot(h);
        layer.u.iter_mut().for_each(|x| *x = rng.random_range(-lu..lu));
        if shape.cell == CellKind::Lstm {
            layer.b[h..2 * h].fill(1.0);
        }
    }
    Ok(p)
}

/// A row-major `steps × dim` input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    dim: usize,
    data: Vec<f64>,
}

impl Sequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySequence);
        }
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Sequence { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptySequence)?.as_ref().len();
        let mut data = Vec::with_capacity(first * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::DimMismatch {
                    expected: first,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Sequence::new(first, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEmbedding {
    pub arch: Arch,
    pub vector: Vec<f64>,
}

/// Final hidden state of the top layer of `arch`'s tower.
pub fn encode_block(p: &EncoderParams, arch: Arch, seq: &Sequence) -> Result<BlockEmbedding> {
    if seq.dim() != p.shape.input_dim {
        return Err(Error::DimMismatch {
            expected: p.shape.input_dim,
            actual: seq.dim(),
        });
    }
    let trace = cell::forward(p.tower(arch), p.shape, seq);
    Ok(BlockEmbedding {
        arch,
        vector: trace.output().to_vec(),
    })
}

/// `exp(-‖a - b‖₁)`, in `(0, 1]`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(sim_unchecked(a, b))
}

pub(crate) fn sim_unchecked(a: &[f64], b: &[f64]) -> f64 {
    (-a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()).exp()
}
