//! Miniature text encoder with LoRA adapters on every attention projection.
//!
//! This is a desk-scale surrogate for a CLIP-style text tower: a category name
//! is split into character trigrams, each trigram is looked up in a seeded
//! token table, and one single-head self-attention block (query, key, value
//! and output projections, each a [`LoraLinear`]) mixes the tokens. The output
//! is the mean over tokens, normalized to the unit sphere.
//!
//! Only the low-rank factors are trainable. `B` starts at zero so a fresh
//! encoder reproduces the frozen base encoder exactly. Gradients with respect
//! to every factor are derived by hand in [`encode_grad`].
//!
//! Parameters are kept in `f64` for arithmetic but always hold values that are
//! exactly representable in `f32`, so a checkpoint written in single precision
//! reloads to an identical encoder.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::embedding::{normalize_f64, CategoryStatus, Embedding, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{hash_bytes, Lcg64};

const LORA_A_STD: f64 = 0.02;
const TRIGRAM: usize = 3;
const PAD: char = '$';

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UOWE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

/// `h = W0 x + B (A x)` with `W0` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    w0: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraGrad {
    fn zeros_like(layer: &LoraLinear) -> Self {
        LoraGrad { a: Array2::zeros(layer.a.raw_dim()), b: Array2::zeros(layer.b.raw_dim()) }
    }
}

impl LoraLinear {
    /// Builds a layer from explicit parts. Shapes: `w0` is `d_out x d_in`,
    /// `a` is `r x d_in`, `b` is `d_out x r`, with `1 <= r < min(d_in, d_out)`.
    pub fn from_parts(w0: Array2<f64>, a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let (d_out, d_in) = w0.dim();
        let r = a.nrows();
        if r == 0 || r >= d_in.min(d_out) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {r} must satisfy 1 <= r < min({d_in}, {d_out})"
            )));
        }
        if a.ncols() != d_in {
            return Err(Error::DimensionMismatch { expected: d_in, actual: a.ncols() });
        }
        if b.dim() != (d_out, r) {
            return Err(Error::DimensionMismatch { expected: d_out * r, actual: b.len() });
        }
        Ok(LoraLinear { w0, a, b })
    }

    /// Frozen `W0 ~ N(0, 1/d_in)`, `A ~ N(0, 0.02^2)`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut Lcg64) -> Result<Self> {
        let w_std = 1.0 / (d_in as f64).sqrt();
        let w0 = Array2::from_shape_simple_fn((d_out, d_in), || snap(rng.gaussian() * w_std));
        let a = Array2::from_shape_simple_fn((rank, d_in), || snap(rng.gaussian() * LORA_A_STD));
        LoraLinear::from_parts(w0, a, Array2::zeros((d_out, rank)))
    }

    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Array2<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Array2<f64> {
        &mut self.b
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch { expected: self.d_in(), actual: x.len() });
        }
        Ok(self.w0.dot(&x) + self.b.dot(&self.a.dot(&x)))
    }

    /// Row-wise forward for a token matrix (`n x d_in` -> `n x d_out`).
    fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w0.t()) + x.dot(&self.a.t()).dot(&self.b.t())
    }

    /// Accumulates factor gradients for upstream `dy` (`n x d_out`) and returns
    /// the gradient with respect to the inputs.
    fn backward_rows(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut LoraGrad) -> Array2<f64> {
        let ax = x.dot(&self.a.t()); // n x r
        grad.b += &dy.t().dot(&ax);
        let dy_b = dy.dot(&self.b); // n x r
        grad.a += &dy_b.t().dot(x);
        dy.dot(&self.w0) + dy_b.dot(&self.a)
    }

    /// Dense `W0 + B A`.
    pub fn merge(&self) -> Array2<f64> {
        &self.w0 + &self.b.dot(&self.a)
    }

    fn snap_trainable(&mut self) {
        self.a.mapv_inplace(snap);
        self.b.mapv_inplace(snap);
    }
}

/// Character-trigram token vectors for `name`, unit-normalized.
///
/// The name is trimmed and lowercased, right-padded with `$` to at least three
/// characters, and cut into overlapping trigrams.
pub fn base_tokens(name: &str, seed: u64, dim: usize) -> Result<Vec<Vec<f64>>> {
    let clean = name.trim().to_lowercase();
    if clean.is_empty() {
        return Err(Error::EmptyName);
    }
    let mut chars: Vec<char> = clean.chars().collect();
    while chars.len() < TRIGRAM {
        chars.push(PAD);
    }
    chars
        .windows(TRIGRAM)
        .map(|w| {
            let gram: String = w.iter().collect();
            let mut rng = Lcg64::new(hash_bytes(seed, gram.as_bytes()));
            let raw: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            normalize_f64(&raw)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
    pub q_proj: LoraLinear,
    pub k_proj: LoraLinear,
    pub v_proj: LoraLinear,
    pub o_proj: LoraLinear,
}

/// Gradients for the eight trainable factors, in q, k, v, o order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub q: LoraGrad,
    pub k: LoraGrad,
    pub v: LoraGrad,
    pub o: LoraGrad,
}

impl EncoderGrad {
    pub fn zeros_like(enc: &ToyTextEncoder) -> Self {
        EncoderGrad {
            q: LoraGrad::zeros_like(&enc.q_proj),
            k: LoraGrad::zeros_like(&enc.k_proj),
            v: LoraGrad::zeros_like(&enc.v_proj),
            o: LoraGrad::zeros_like(&enc.o_proj),
        }
    }

    pub fn arrays(&self) -> [&Array2<f64>; 8] {
        [&self.q.a, &self.q.b, &self.k.a, &self.k.b, &self.v.a, &self.v.b, &self.o.a, &self.o.b]
    }

    pub fn add_assign(&mut self, other: &EncoderGrad) {
        self.q.a += &other.q.a;
        self.q.b += &other.q.b;
        self.k.a += &other.k.a;
        self.k.b += &other.k.b;
        self.v.a += &other.v.a;
        self.v.b += &other.v.b;
        self.o.a += &other.o.a;
        self.o.b += &other.o.b;
    }
}

struct ForwardCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    h: Array2<f64>,
    pooled: Array1<f64>,
    norm: f64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, rank: usize, seed: u64) -> Result<Self> {
        let layer = |stream: u64| LoraLinear::init(dim, dim, rank, &mut Lcg64::derived(seed, stream));
        Ok(ToyTextEncoder {
            dim,
            seed,
            q_proj: layer(1)?,
            k_proj: layer(2)?,
            v_proj: layer(3)?,
            o_proj: layer(4)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.q_proj.rank()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> [&LoraLinear; 4] {
        [&self.q_proj, &self.k_proj, &self.v_proj, &self.o_proj]
    }

    pub fn trainable_params(&self) -> usize {
        self.layers().iter().map(|l| l.trainable_params()).sum()
    }

    pub fn dense_params(&self) -> usize {
        self.layers().iter().map(|l| l.d_in() * l.d_out()).sum()
    }

    /// Mutable trainable factors in the same order as [`EncoderGrad::arrays`].
    pub fn trainable_mut(&mut self) -> [&mut Array2<f64>; 8] {
        let ToyTextEncoder { q_proj, k_proj, v_proj, o_proj, .. } = self;
        [
            &mut q_proj.a,
            &mut q_proj.b,
            &mut k_proj.a,
            &mut k_proj.b,
            &mut v_proj.a,
            &mut v_proj.b,
            &mut o_proj.a,
            &mut o_proj.b,
        ]
    }

    /// Rounds trainable factors to single precision after an update.
    pub fn snap_trainable(&mut self) {
        self.q_proj.snap_trainable();
        self.k_proj.snap_trainable();
        self.v_proj.snap_trainable();
        self.o_proj.snap_trainable();
    }

    /// Encoder whose frozen weights are the merged `W0 + B A` and whose `B` is zero.
    pub fn merged(&self) -> ToyTextEncoder {
        let merge = |l: &LoraLinear| LoraLinear {
            w0: l.merge(),
            a: l.a.clone(),
            b: Array2::zeros(l.b.raw_dim()),
        };
        ToyTextEncoder {
            dim: self.dim,
            seed: self.seed,
            q_proj: merge(&self.q_proj),
            k_proj: merge(&self.k_proj),
            v_proj: merge(&self.v_proj),
            o_proj: merge(&self.o_proj),
        }
    }

    /// Softmax attention matrix for `name` (rows sum to one).
    pub fn attention(&self, name: &str) -> Result<Array2<f64>> {
        Ok(self.forward_cached(name)?.attn)
    }

    fn forward_cached(&self, name: &str) -> Result<ForwardCache> {
        let tokens = base_tokens(name, self.seed, self.dim)?;
        let n = tokens.len();
        let x = Array2::from_shape_fn((n, self.dim), |(i, j)| tokens[i][j]);
        let q = self.q_proj.forward_rows(&x);
        let k = self.k_proj.forward_rows(&x);
        let v = self.v_proj.forward_rows(&x);
        let inv_sqrt_d = 1.0 / (self.dim as f64).sqrt();
        let mut attn = q.dot(&k.t()) * inv_sqrt_d;
        for mut row in attn.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let h = attn.dot(&v);
        let out = self.o_proj.forward_rows(&h);
        let pooled = out.mean_axis(Axis(0)).expect("at least one token");
        let norm = pooled.dot(&pooled).sqrt();
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(ForwardCache { x, q, k, v, attn, h, pooled, norm })
    }

    /// Unit output vector in double precision.
    pub fn encode_f64(&self, name: &str) -> Result<Vec<f64>> {
        let cache = self.forward_cached(name)?;
        Ok(cache.pooled.iter().map(|p| p / cache.norm).collect())
    }
}

pub fn lora_forward(layer: &LoraLinear, x: &[f64]) -> Result<Vec<f64>> {
    Ok(layer.forward(ArrayView1::from(x))?.to_vec())
}

pub fn lora_merge(layer: &LoraLinear) -> Array2<f64> {
    layer.merge()
}

pub fn encode(name: &str, enc: &ToyTextEncoder) -> Result<Embedding> {
    Embedding::normalize(&enc.encode_f64(name)?)
}

/// Gradients of `<upstream, encode(name)>` with respect to every LoRA factor.
pub fn encode_grad(name: &str, enc: &ToyTextEncoder, upstream: &[f64]) -> Result<EncoderGrad> {
    if upstream.len() != enc.dim {
        return Err(Error::DimensionMismatch { expected: enc.dim, actual: upstream.len() });
    }
    let c = enc.forward_cached(name)?;
    let mut grad = EncoderGrad::zeros_like(enc);
    let n = c.x.nrows();
    let g = ArrayView1::from(upstream);
    let y = &c.pooled / c.norm;

    // normalize: dp = (g - (g.y) y) / |p|
    let dp = (&g - &(&y * g.dot(&y))) / c.norm;
    // mean pool
    let d_out = Array2::from_shape_fn((n, enc.dim), |(_, j)| dp[j] / n as f64);
    let dh = enc.o_proj.backward_rows(&c.h, &d_out, &mut grad.o);

    let d_attn = dh.dot(&c.v.t());
    let dv = c.attn.t().dot(&dh);
    // softmax rows
    let mut ds = Array2::zeros((n, n));
    for i in 0..n {
        let inner: f64 = (0..n).map(|k| c.attn[(i, k)] * d_attn[(i, k)]).sum();
        for j in 0..n {
            ds[(i, j)] = c.attn[(i, j)] * (d_attn[(i, j)] - inner);
        }
    }
    let inv_sqrt_d = 1.0 / (enc.dim as f64).sqrt();
    let dq = ds.dot(&c.k) * inv_sqrt_d;
    let dk = ds.t().dot(&c.q) * inv_sqrt_d;

    enc.q_proj.backward_rows(&c.x, &dq, &mut grad.q);
    enc.k_proj.backward_rows(&c.x, &dk, &mut grad.k);
    enc.v_proj.backward_rows(&c.x, &dv, &mut grad.v);
    Ok(grad)
}

/// Encodes every name once into a fresh vocabulary of current-known entries.
pub fn precompute_vocab(names: &[&str], enc: &ToyTextEncoder) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::new();
    for name in names {
        vocab.push(name, encode(name, enc)?, CategoryStatus::CurrentKnown)?;
    }
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// Checkpoint: "UOWE", version, d, r (u32), token seed (u64), then f32 row-major
// A and B of q, k, v, o, then W0 of q, k, v, o. All little-endian.

pub fn checkpoint_bytes(enc: &ToyTextEncoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(enc.dim as u32).to_le_bytes());
    out.extend_from_slice(&(enc.rank() as u32).to_le_bytes());
    out.extend_from_slice(&enc.seed.to_le_bytes());
    let mut put = |m: &Array2<f64>| {
        for &x in m.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for l in enc.layers() {
        put(&l.a);
        put(&l.b);
    }
    for l in enc.layers() {
        put(&l.w0);
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ToyTextEncoder> {
    const WHAT: &str = "encoder checkpoint";
    let mut r = crate::binio::Reader::new(bytes, WHAT);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { what: WHAT, expected: "UOWE" });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { what: WHAT, found: version, expected: CHECKPOINT_VERSION });
    }
    let dim = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let seed = r.u64()?;
    if rank == 0 || rank >= dim {
        return Err(Error::Malformed { what: WHAT, line: 0, message: format!("rank {rank} for dim {dim}") });
    }
    let mut mat = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()? as f64);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
    };
    let mut factors = Vec::with_capacity(4);
    for _ in 0..4 {
        let a = mat(rank, dim)?;
        let b = mat(dim, rank)?;
        factors.push((a, b));
    }
    let mut layers = Vec::with_capacity(4);
    for (a, b) in factors {
        layers.push(LoraLinear::from_parts(mat(dim, dim)?, a, b)?);
    }
    if !r.is_empty() {
        return Err(Error::Malformed { what: WHAT, line: 0, message: "trailing bytes".into() });
    }
    let mut it = layers.into_iter();
    Ok(ToyTextEncoder {
        dim,
        seed,
        q_proj: it.next().unwrap(),
        k_proj: it.next().unwrap(),
        v_proj: it.next().unwrap(),
        o_proj: it.next().unwrap(),
    })
}

pub fn save_checkpoint(enc: &ToyTextEncoder, path: &Path) -> Result<()> {
    crate::binio::write_atomic(path, &checkpoint_bytes(enc))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTextEncoder> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
