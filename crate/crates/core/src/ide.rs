//! Deviation encoder: learnable tokens cross-attend over abnormal reference
//! patches (keys from features plus a grid positional encoding, values from
//! denoised deviations) under an anomaly-mask bias, followed by a GELU FFN.
//!
//! The forward pass and the dual loss are recorded on a [`Tape`] and are
//! generic over [`Real`], so the same graph serves training in `f32` and
//! gradient verification in `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{AdamW, AdamWConfig, ParamState, Real, Tape, Tensor, TensorError, Var};

pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Error)]
pub enum IdeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("mask has no anomalous patch")]
    EmptyMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IdeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1/sqrt(C/h)` inside each head.
    #[default]
    PerHead,
    /// `1/sqrt(C)` regardless of head count.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosEnc {
    #[default]
    Keys,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdeConfig {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub dropout: f64,
    pub scale: AttentionScale,
    pub residuals: bool,
    pub posenc: PosEnc,
}

impl Default for IdeConfig {
    fn default() -> Self {
        Self {
            channels: 384,
            heads: 8,
            hidden: 1536,
            tokens: 45,
            dropout: 0.1,
            scale: AttentionScale::PerHead,
            residuals: true,
            posenc: PosEnc::Keys,
        }
    }
}

impl IdeConfig {
    /// Default architecture for `channels` (hidden width 4C).
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            hidden: 4 * channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IdeError::Config(m));
        if self.channels == 0 || self.tokens == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("channels, tokens, hidden and heads must be positive".into());
        }
        if !self.channels.is_multiple_of(self.heads) {
            return bad(format!("C={} not divisible by {} heads", self.channels, self.heads));
        }
        if self.posenc == PosEnc::Keys && !self.channels.is_multiple_of(4) {
            return bad(format!("grid encoding needs C divisible by 4, got {}", self.channels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn attention_scale(&self) -> f64 {
        match self.scale {
            AttentionScale::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
            AttentionScale::Paper => 1.0 / (self.channels as f64).sqrt(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let (c, h, m) = (self.channels, self.hidden, self.tokens);
        m * c + 3 * (c * c + c) + (c * h + h) + (h * c + c)
    }
}

pub const BLOCK_NAMES: [&str; 11] = [
    "tokens", "wq", "bq", "wk", "bk", "wv", "bv", "ffn1_w", "ffn1_b", "ffn2_w", "ffn2_b",
];

/// Learnable tokens and encoder weights. Linear maps are stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdeParams {
    blocks: Vec<Tensor<f32>>,
}

impl IdeParams {
    /// Tokens ~ N(0, 0.02²), weights ~ U(±1/√C), zero biases.
    pub fn init(cfg: &IdeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, h, m) = (cfg.channels, cfg.hidden, cfg.tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let bound = 1.0 / (c as f32).sqrt();
        let tokens: Vec<f32> = (0..m * c).map(|_| normal.sample(&mut rng)).collect();
        let mut uniform = |rows: usize, cols: usize| {
            let d = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, d).expect("sized")
        };
        let blocks = vec![
            Tensor::matrix(m, c, tokens).expect("sized"),
            uniform(c, c),
            Tensor::zeros(vec![c]),
            uniform(c, c),
            Tensor::zeros(vec![c]),
            uniform(c, c),
            Tensor::zeros(vec![c]),
            uniform(c, h),
            Tensor::zeros(vec![h]),
            uniform(h, c),
            Tensor::zeros(vec![c]),
        ];
        Ok(Self { blocks })
    }

    pub fn from_blocks(blocks: Vec<Tensor<f32>>) -> Result<Self> {
        if blocks.len() != BLOCK_NAMES.len() {
            return Err(IdeError::Checkpoint(format!(
                "{} parameter blocks, expected {}",
                blocks.len(),
                BLOCK_NAMES.len()
            )));
        }
        let p = Self { blocks };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let (m, c) = (self.tokens_count(), self.channels());
        let h = self.hidden();
        let want: [Vec<usize>; 11] = [
            vec![m, c],
            vec![c, c],
            vec![c],
            vec![c, c],
            vec![c],
            vec![c, c],
            vec![c],
            vec![c, h],
            vec![h],
            vec![h, c],
            vec![c],
        ];
        for ((b, w), name) in self.blocks.iter().zip(&want).zip(BLOCK_NAMES) {
            if b.shape() != w.as_slice() {
                return Err(IdeError::Checkpoint(format!(
                    "block {name} has shape {:?}, expected {w:?}",
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Tensor<f32>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.blocks
    }

    pub fn tokens(&self) -> &Tensor<f32> {
        &self.blocks[0]
    }

    pub fn tokens_count(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].cols()
    }

    pub fn hidden(&self) -> usize {
        self.blocks[8].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Tensor::len).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Places every block on `tape`, cast to `T`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                let t = b.cast::<T>();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles for the blocks of an [`IdeParams`], in block order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn tokens(&self) -> Var {
        self.vars[0]
    }

    /// Gradients after `backward`, converted to `f32`; zero where a block
    /// received none.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Vec<f32>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.iter().map(|x| x.f64() as f32).collect(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    }
}

/// 2-D sinusoidal encoding for patch `pos` of a `grid × grid` layout: the
/// first C/2 channels encode the row, the rest the column, each as
/// interleaved sin/cos pairs.
pub fn positional_encoding(pos: usize, grid: usize, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    let (row, col) = ((pos / grid) as f64, (pos % grid) as f64);
    for (offset, coord) in [(0, row), (half, col)] {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
            out[offset + 2 * i] = (coord * freq).sin();
            out[offset + 2 * i + 1] = (coord * freq).cos();
        }
    }
    out
}

/// Attention inputs for one set of abnormal references.
#[derive(Clone, Debug)]
pub struct EncoderInput<T: Real> {
    /// Raw features plus positional encoding, `K × C`.
    pub keys: Tensor<T>,
    /// Denoised deviations, `K × C`.
    pub values: Tensor<T>,
    /// Anomalous patches; normal ones receive [`MASK_BIAS`].
    pub mask: Vec<bool>,
}

impl<T: Real> EncoderInput<T> {
    /// `positions[i]` is the within-image patch index of row `i`; the
    /// encoding restarts for each reference image.
    pub fn new(
        cfg: &IdeConfig,
        features: &Tensor<f32>,
        denoised: &Tensor<f32>,
        mask: &[bool],
        positions: &[usize],
        grid: usize,
    ) -> Result<Self> {
        let k = features.rows();
        if denoised.rows() != k || mask.len() != k || positions.len() != k {
            return Err(IdeError::Config(format!(
                "reference rows disagree: features {k}, denoised {}, mask {}, positions {}",
                denoised.rows(),
                mask.len(),
                positions.len()
            )));
        }
        if features.cols() != cfg.channels || denoised.cols() != cfg.channels {
            return Err(IdeError::Config(format!(
                "reference width {} does not match C={}",
                features.cols(),
                cfg.channels
            )));
        }
        if !mask.iter().any(|&b| b) {
            return Err(IdeError::EmptyMask);
        }
        let mut keys = features.cast::<T>();
        if cfg.posenc == PosEnc::Keys {
            for (r, &p) in positions.iter().enumerate() {
                let pe = positional_encoding(p, grid, cfg.channels);
                for (x, e) in keys.row_mut(r).iter_mut().zip(pe) {
                    *x += T::of(e);
                }
            }
        }
        Ok(Self {
            keys,
            values: denoised.cast::<T>(),
            mask: mask.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn bias(&self, rows: usize) -> Tensor<T> {
        let row: Vec<T> = self
            .mask
            .iter()
            .map(|&m| if m { T::zero() } else { T::of(MASK_BIAS) })
            .collect();
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        Tensor::matrix(rows, row.len(), data).expect("sized")
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub struct EncoderOutput {
    /// Intrinsic deviation vectors, `M × C`.
    pub deviations: Var,
    /// Post-softmax, pre-dropout attention per head, `M × K`.
    pub attention: Vec<Var>,
    /// Concatenated head outputs before residual and FFN.
    pub attended: Var,
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &IdeConfig,
    p: &ParamVars,
    input: &EncoderInput<T>,
    mut mode: Mode<'_>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    if !input.mask.iter().any(|&b| b) {
        return Err(IdeError::EmptyMask);
    }
    let v = &p.vars;
    let keys = tape.constant(input.keys.clone());
    let values = tape.constant(input.values.clone());
    let q = tape.matmul(v[0], v[1])?;
    let q = tape.add_row(q, v[2])?;
    let k = tape.matmul(keys, v[3])?;
    let k = tape.add_row(k, v[4])?;
    let val = tape.matmul(values, v[5])?;
    let val = tape.add_row(val, v[6])?;

    let m = tape.value(v[0]).rows();
    let bias = input.bias(m);
    let d = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.columns(q, h * d, d)?;
        let kh = tape.columns(k, h * d, d)?;
        let vh = tape.columns(val, h * d, d)?;
        let s = tape.matmul_bt(qh, kh)?;
        let s = tape.scale(s, cfg.attention_scale())?;
        let a = tape.softmax(s, Some(&bias))?;
        attention.push(a);
        let a = match &mut mode {
            Mode::Train(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 - cfg.dropout;
                let n = tape.value(a).len();
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            T::of(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                tape.mul_const(a, mask)?
            }
            _ => a,
        };
        heads.push(tape.matmul(a, vh)?);
    }
    let attended = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let x1 = if cfg.residuals {
        tape.add(v[0], attended)?
    } else {
        attended
    };
    let h1 = tape.matmul(x1, v[7])?;
    let h1 = tape.add_row(h1, v[8])?;
    let h1 = tape.gelu(h1)?;
    let f = tape.matmul(h1, v[9])?;
    let f = tape.add_row(f, v[10])?;
    let deviations = if cfg.residuals { tape.add(x1, f)? } else { f };
    Ok(EncoderOutput {
        deviations,
        attention,
        attended,
    })
}

/// Index of the token nearest (cosine) to each row of `targets`; ties go to
/// the lower token index.
pub fn nearest_tokens<T: Real>(tokens: &Tensor<T>, targets: &Tensor<T>) -> Vec<usize> {
    (0..targets.rows())
        .map(|i| {
            let f = targets.row(i);
            let mut best = (0, T::infinity());
            for m in 0..tokens.rows() {
                let d = crate::tensor::cosine_distance(f, tokens.row(m));
                if d < best.1 {
                    best = (m, d);
                }
            }
            best.0
        })
        .collect()
}

pub struct DualLoss {
    pub discriminability: Var,
    pub orthogonality: Var,
    pub total: Var,
}

/// `λ1·mean_i d_cos(f_den,i, t_i^min) + λ2·mean_{m≠n} cos(t_m, t_n)²` over
/// the masked reference rows. The nearest-token selection is a constant.
pub fn dual_loss<T: Real>(
    tape: &mut Tape<T>,
    deviations: Var,
    denoised: &Tensor<T>,
    mask: &[bool],
    lambda1: f64,
    lambda2: f64,
) -> Result<DualLoss> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(IdeError::EmptyMask);
    }
    let targets = denoised.select_rows(&rows);
    let idx = nearest_tokens(tape.value(deviations), &targets);
    let selected = tape.gather_rows(deviations, &idx)?;
    let targets = tape.constant(targets);
    let cos = tape.row_cosine(targets, selected)?;
    let mean_cos = tape.mean(cos)?;
    let disc = tape.affine(mean_cos, -1.0, 1.0)?;

    let m = tape.value(deviations).rows();
    let orth = if m < 2 {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let unit = tape.normalize_rows(deviations)?;
        let gram = tape.matmul_bt(unit, unit)?;
        let sq = tape.mul(gram, gram)?;
        let off: Vec<T> = (0..m * m)
            .map(|i| if i / m == i % m { T::zero() } else { T::one() })
            .collect();
        let sq = tape.mul_const(sq, off)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 1.0 / (m * (m - 1)) as f64)?
    };
    let a = tape.scale(disc, lambda1)?;
    let b = tape.scale(orth, lambda2)?;
    let total = tape.add(a, b)?;
    Ok(DualLoss {
        discriminability: disc,
        orthogonality: orth,
        total,
    })
}

const CKPT_MAGIC: &[u8; 4] = b"IDCK";
const CKPT_VERSION: u32 = 1;

/// Encoder parameters plus optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub heads: usize,
    pub params: IdeParams,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        for v in [
            CKPT_VERSION,
            self.params.tokens_count() as u32,
            self.params.channels() as u32,
            self.heads as u32,
            BLOCK_NAMES.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, b) in BLOCK_NAMES.iter().zip(self.params.blocks()) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(b.shape().len() as u8);
            for &d in b.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, b.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let c = &opt.config;
                for v in [c.beta1, c.beta2, c.weight_decay, c.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(c.amsgrad as u8);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for s in &opt.states {
                    put_f32s(&mut out, &s.m);
                    put_f32s(&mut out, &s.v);
                    put_f32s(&mut out, &s.v_max);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(IdeError::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(IdeError::Checkpoint(format!("unsupported version {version}")));
        }
        let m = r.u32("M")? as usize;
        let c = r.u32("C")? as usize;
        let heads = r.u32("heads")? as usize;
        let count = r.u32("block count")? as usize;
        if count != BLOCK_NAMES.len() {
            return Err(IdeError::Checkpoint(format!("{count} blocks")));
        }
        let mut blocks = Vec::with_capacity(count);
        for want in BLOCK_NAMES {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| IdeError::Checkpoint("block name is not UTF-8".into()))?;
            if name != want {
                return Err(IdeError::Checkpoint(format!("block {name}, expected {want}")));
            }
            let ndim = r.take(1, "ndim")?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f32s(n, name)?;
            blocks.push(Tensor::new(shape, data)?);
        }
        let params = IdeParams::from_blocks(blocks)?;
        if params.tokens_count() != m || params.channels() != c {
            return Err(IdeError::Checkpoint("header does not match token block".into()));
        }
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(IdeError::Checkpoint(format!("{heads} heads for C={c}")));
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let mut f = [0.0; 4];
                for x in &mut f {
                    *x = f64::from_le_bytes(r.take(8, "optimizer config")?.try_into().unwrap());
                }
                let amsgrad = r.take(1, "amsgrad")?[0] != 0;
                let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
                let config = AdamWConfig {
                    beta1: f[0],
                    beta2: f[1],
                    weight_decay: f[2],
                    eps: f[3],
                    amsgrad,
                };
                let mut opt = AdamW::new(config, &params.sizes());
                opt.step = step;
                opt.states = params
                    .sizes()
                    .into_iter()
                    .map(|n| {
                        Ok(ParamState {
                            m: r.f32s(n, "m")?,
                            v: r.f32s(n, "v")?,
                            v_max: r.f32s(n, "v_max")?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Some(opt)
            }
            x => return Err(IdeError::Checkpoint(format!("optimizer flag {x}"))),
        };
        if r.pos != bytes.len() {
            return Err(IdeError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            heads,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| IdeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.encode()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |source| IdeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io)?;
        Self::decode(&buf)
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IdeError::Checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
