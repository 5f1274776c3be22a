//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the tape in exact reverse order. Learned weights live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`], which copies the
//! current value in and remembers where its gradient belongs.
//!
//! Row-wise operations (softmax, layer norm, cross entropy) act on the last
//! axis and treat everything before it as rows.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("cross_entropy: target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("value does not belong to this tape")]
    Detached,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                msg: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self { shape: vec![1, data.len()], data, requires_grad: false, grad: None }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Splittable deterministic generator: every `(seed, stream)` pair names an
/// independent ChaCha stream.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(vec![fan_in, fan_out], bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Replaces values from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> io::Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("checkpoint has {} tensors, model has {}", entries.len(), self.tensors.len()),
            ));
        }
        for (name, t) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unknown tensor `{name}`")))?;
            if self.tensors[id.0].shape != t.shape {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("tensor `{name}`: shape {:?} vs {:?}", t.shape, self.tensors[id.0].shape),
                ));
            }
            self.tensors[id.0].data = t.data;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (t, d) in self.tensors.iter_mut().zip(snapshot) {
            t.data.copy_from_slice(d);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"DAMR";
const CHECKPOINT_VERSION: u32 = 1;

/// Header (magic, version, count), then per tensor: name length, name, rank,
/// dims, little-endian f64 payload. All integers little-endian; dims are u64.
pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> io::Result<Vec<(String, Tensor)>> {
    fn u32_le(r: &mut impl Read) -> io::Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32_le(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_le(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32_le(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = u32_le(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored on each tensor.
/// Tensors without a gradient are treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, tensor) in store.tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let grad = tensor.grad.as_deref();
        for i in 0..tensor.data.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            tensor.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Tape

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Gather(usize, Vec<usize>),
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Sum(usize),
    MeanRows(usize),
    RelScores(usize, usize),
    RelMix(usize, usize),
    Dropout(usize, Vec<f64>),
}

#[derive(Debug)]
struct Record {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Records one forward computation. Single-threaded; create one per example.
pub struct Tape {
    id: u64,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
    dropout: Option<DropoutState>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            dropout: None,
        }
    }

    /// Training tape with dropout at `rate`, masks drawn from `rng`.
    pub fn training(rate: f64, rng: ChaCha8Rng) -> Self {
        let mut t = Self::new();
        if rate > 0.0 {
            t.dropout = Some(DropoutState { rate, rng });
        }
        t
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.records.len() {
            return Err(AutodiffError::Detached);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.records.push(Record { shape, value, op, requires_grad });
        Var { tape: self.id, idx: self.records.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.records[i].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Brings a parameter onto the tape; repeated calls return the same value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var { tape: self.id, idx };
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true);
        self.params.insert(id, v.idx);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.records[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.records[v.idx].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let r = &self.records[v.idx];
        Tensor { shape: r.shape.clone(), data: r.value.clone(), requires_grad: false, grad: None }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.records[v.idx].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    // -- operations ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.records[ia].shape, &self.records[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.records[ia].value, &self.records[ib].value, &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(vec![m, n], out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = &self.records[ia].shape;
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "transpose", msg: format!("needs rank 2, got {s:?}") });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose(&self.records[ia].value, r, c);
        let rg = self.rg(ia);
        Ok(self.push(vec![c, r], out, Op::Transpose(ia), rg))
    }

    /// Elementwise sum of equal shapes, or a `[.., c]` value plus a `[c]` row broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.records[ia].shape.clone(), self.records[ib].shape.clone());
        let rg = self.rg(ia) || self.rg(ib);
        if sa == sb {
            let out = self.records[ia].value.iter().zip(&self.records[ib].value).map(|(x, y)| x + y).collect();
            return Ok(self.push(sa, out, Op::Add(ia, ib), rg));
        }
        let (_, ca) = rows_cols(&sa);
        let b_is_row = self.records[ib].value.len() == ca && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1));
        if !b_is_row {
            return Err(AutodiffError::ShapeMismatch { op: "add", left: sa, right: sb });
        }
        let bv = &self.records[ib].value;
        let out = self.records[ia].value.iter().enumerate().map(|(k, x)| x + bv[k % ca]).collect();
        Ok(self.push(sa, out, Op::AddRow(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.records[ia].shape != self.records[ib].shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                left: self.records[ia].shape.clone(),
                right: self.records[ib].shape.clone(),
            });
        }
        let out = self.records[ia].value.iter().zip(&self.records[ib].value).map(|(x, y)| x * y).collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(self.records[ia].shape.clone(), out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.records[ia].value.iter().map(|x| x * c).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.records[ia].shape.clone(), out, Op::Scale(ia, c), rg))
    }

    /// Concatenation along the last axis; all inputs must agree on the rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "concat", msg: "no inputs".into() });
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = self.records[idx[0]].shape.clone();
        let (rows, _) = rows_cols(&first);
        let mut total = 0;
        for &i in &idx {
            let s = &self.records[i].shape;
            if s.len() != first.len() || s[..s.len() - 1] != first[..first.len() - 1] {
                return Err(AutodiffError::ShapeMismatch { op: "concat", left: first.clone(), right: s.clone() });
            }
            total += rows_cols(s).1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                let c = rows_cols(&self.records[i].shape).1;
                out.extend_from_slice(&self.records[i].value[r * c..(r + 1) * c]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(shape, out, Op::Concat(idx), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.records[ia].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        if start > end || end > cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let w = end - start;
        let v = &self.records[ia].value;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let mut s = shape;
        *s.last_mut().unwrap() = w;
        let rg = self.rg(ia);
        Ok(self.push(s, out, Op::SliceCols(ia, start), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = rows_cols(&self.records[ia].shape);
        if self.records[ia].shape.len() != 2 || start > end || end > rows {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {rows} rows"),
            });
        }
        let out = self.records[ia].value[start * cols..end * cols].to_vec();
        let rg = self.rg(ia);
        Ok(self.push(vec![end - start, cols], out, Op::SliceRows(ia, start), rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let s = &self.records[it].shape;
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "embedding_lookup", msg: format!("table shape {s:?}") });
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::InvalidArgument {
                    op: "embedding_lookup",
                    msg: format!("id {id} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(&self.records[it].value[id * d..(id + 1) * d]);
        }
        let rg = self.rg(it);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather(it, ids.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.records[ia].value.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.records[ia].shape.clone(), out, Op::Relu(ia), rg))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = rows_cols(&self.records[ia].shape);
        let mut out = self.records[ia].value.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(ia);
        Ok(self.push(self.records[ia].shape.clone(), out, Op::Softmax(ia), rg))
    }

    /// Layer normalization over the last axis with gain and bias of that width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let shape = self.records[ix].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        for &i in &[ig, ib] {
            if self.records[i].value.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.records[i].shape.clone(),
                });
            }
        }
        let xv = &self.records[ix].value;
        let (g, b) = (&self.records[ig].value, &self.records[ib].value);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(shape, out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }, rg))
    }

    /// Summed negative log-likelihood of `targets[r]` under row `r` of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (rows, cols) = rows_cols(&self.records[il].shape);
        if rows != targets.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{rows} rows of logits for {} targets", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(AutodiffError::TargetOutOfRange { target: t, classes: cols });
        }
        let mut probs = self.records[il].value.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.rg(il);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.records[ia].value.iter().sum();
        let rg = self.rg(ia);
        Ok(self.push(vec![1], vec![s], Op::Sum(ia), rg))
    }

    /// Mean over rows of a matrix, as a `[1, cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = rows_cols(&self.records[ia].shape);
        if rows == 0 {
            return Err(AutodiffError::InvalidArgument { op: "mean_rows", msg: "no rows".into() });
        }
        let v = &self.records[ia].value;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += v[r * cols + c];
            }
        }
        out.iter_mut().for_each(|x| *x /= rows as f64);
        let rg = self.rg(ia);
        Ok(self.push(vec![1, cols], out, Op::MeanRows(ia), rg))
    }

    /// `out[i][j] = q[i] · r[i*m + j]` for `q: [m, d]`, `r: [m*m, d]`.
    pub fn rel_scores(&mut self, q: Var, r: Var) -> Result<Var> {
        let (iq, ir) = (self.check(q)?, self.check(r)?);
        let (m, d) = rows_cols(&self.records[iq].shape);
        let (rr, rd) = rows_cols(&self.records[ir].shape);
        if rr != m * m || rd != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "rel_scores",
                left: self.records[iq].shape.clone(),
                right: self.records[ir].shape.clone(),
            });
        }
        let (qv, rv) = (&self.records[iq].value, &self.records[ir].value);
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..m {
                let rij = &rv[(i * m + j) * d..(i * m + j + 1) * d];
                out[i * m + j] = qi.iter().zip(rij).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(iq) || self.rg(ir);
        Ok(self.push(vec![m, m], out, Op::RelScores(iq, ir), rg))
    }

    /// `out[i] = Σ_j a[i][j] · r[i*m + j]` for `a: [m, m]`, `r: [m*m, d]`.
    pub fn rel_mix(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(r)?);
        let (m, m2) = rows_cols(&self.records[ia].shape);
        let (rr, d) = rows_cols(&self.records[ir].shape);
        if m != m2 || rr != m * m {
            return Err(AutodiffError::ShapeMismatch {
                op: "rel_mix",
                left: self.records[ia].shape.clone(),
                right: self.records[ir].shape.clone(),
            });
        }
        let (av, rv) = (&self.records[ia].value, &self.records[ir].value);
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let oi = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let w = av[i * m + j];
                let rij = &rv[(i * m + j) * d..(i * m + j + 1) * d];
                for (o, x) in oi.iter_mut().zip(rij) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(ia) || self.rg(ir);
        Ok(self.push(vec![m, d], out, Op::RelMix(ia, ir), rg))
    }

    /// Inverted dropout; the identity on evaluation tapes.
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let Some(state) = self.dropout.as_mut() else { return Ok(a) };
        let keep = 1.0 - state.rate;
        let mask: Vec<f64> = (0..self.records[ia].value.len())
            .map(|_| if state.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.records[ia].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.records[ia].shape.clone(), out, Op::Dropout(ia, mask), rg))
    }

    // -- backward -----------------------------------------------------------

    fn acc(&mut self, i: usize, g: &[f64]) {
        if !self.records[i].requires_grad {
            return;
        }
        match &mut self.grads[i] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn acc_with(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.records[i].requires_grad {
            return;
        }
        let n = self.records[i].value.len();
        let slot = self.grads[i].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    /// Fills gradients for every value that requires them. Earlier gradients
    /// on this tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.records[il].value.len() != 1 {
            return Err(AutodiffError::NotScalar(self.records[il].shape.clone()));
        }
        self.grads = vec![None; self.records.len()];
        if !self.records[il].requires_grad {
            return Ok(());
        }
        self.grads[il] = Some(vec![1.0]);
        for idx in (0..=il).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let op = std::mem::replace(&mut self.records[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &g);
            self.records[idx].op = op;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.records[a].shape[0], self.records[a].shape[1]);
                let n = self.records[b].shape[1];
                if self.rg(a) {
                    let bt = transpose(&self.records[b].value, k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    self.acc(a, &ga);
                }
                if self.rg(b) {
                    let at = transpose(&self.records[a].value, m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    self.acc(b, &gb);
                }
            }
            Op::Transpose(a) => {
                let out_shape = &self.records[idx].shape;
                let gt = transpose(g, out_shape[0], out_shape[1]);
                self.acc(a, &gt);
            }
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::AddRow(a, b) => {
                self.acc(a, g);
                let c = self.records[b].value.len();
                self.acc_with(b, |gb| {
                    for (k, x) in g.iter().enumerate() {
                        gb[k % c] += x;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga: Vec<f64> = g.iter().zip(&self.records[b].value).map(|(x, y)| x * y).collect();
                    self.acc(a, &ga);
                }
                if self.rg(b) {
                    let gb: Vec<f64> = g.iter().zip(&self.records[a].value).map(|(x, y)| x * y).collect();
                    self.acc(b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.acc(a, &ga);
            }
            Op::Concat(ref parts) => {
                let (rows, total) = rows_cols(&self.records[idx].shape);
                let mut offset = 0;
                for &p in parts {
                    let c = rows_cols(&self.records[p].shape).1;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(p, &gp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = rows_cols(&self.records[a].shape);
                let w = rows_cols(&self.records[idx].shape).1;
                self.acc_with(a, |ga| {
                    for r in 0..rows {
                        for c in 0..w {
                            ga[r * cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let cols = rows_cols(&self.records[a].shape).1;
                self.acc_with(a, |ga| {
                    for (k, x) in g.iter().enumerate() {
                        ga[start * cols + k] += x;
                    }
                });
            }
            Op::Gather(t, ref ids) => {
                let d = self.records[t].shape[1];
                self.acc_with(t, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ga: Vec<f64> =
                    g.iter().zip(&self.records[a].value).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                self.acc(a, &ga);
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&self.records[idx].shape);
                let y = &self.records[idx].value;
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols;
                    let dot: f64 = (0..cols).map(|c| g[s + c] * y[s + c]).sum();
                    for c in 0..cols {
                        ga[s + c] = y[s + c] * (g[s + c] - dot);
                    }
                }
                self.acc(a, &ga);
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref rstd } => {
                let (rows, cols) = rows_cols(&self.records[idx].shape);
                let gv = self.records[gain].value.clone();
                if self.rg(x) {
                    let mut gx = vec![0.0; rows * cols];
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let s = r * cols;
                        let dxhat: Vec<f64> = (0..cols).map(|c| g[s + c] * gv[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = (0..cols).map(|c| dxhat[c] * xhat[s + c]).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[s + c] = rs * (dxhat[c] - mean_d - xhat[s + c] * mean_dx);
                        }
                    }
                    self.acc(x, &gx);
                }
                self.acc_with(gain, |gg| {
                    for (k, v) in g.iter().enumerate() {
                        gg[k % cols] += v * xhat[k];
                    }
                });
                self.acc_with(bias, |gb| {
                    for (k, v) in g.iter().enumerate() {
                        gb[k % cols] += v;
                    }
                });
            }
            Op::CrossEntropy { logits, ref targets, ref probs } => {
                let cols = rows_cols(&self.records[logits].shape).1;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * cols + t] -= g[0];
                }
                self.acc(logits, &gl);
            }
            Op::Sum(a) => {
                let n = self.records[a].value.len();
                self.acc(a, &vec![g[0]; n]);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = rows_cols(&self.records[a].shape);
                self.acc_with(a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                });
            }
            Op::RelScores(q, r) => {
                let (m, d) = rows_cols(&self.records[q].shape);
                if self.rg(q) {
                    let rv = &self.records[r].value;
                    let mut gq = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..m {
                            let w = g[i * m + j];
                            for k in 0..d {
                                gq[i * d + k] += w * rv[(i * m + j) * d + k];
                            }
                        }
                    }
                    self.acc(q, &gq);
                }
                if self.rg(r) {
                    let qv = &self.records[q].value;
                    let mut gr = vec![0.0; m * m * d];
                    for i in 0..m {
                        for j in 0..m {
                            let w = g[i * m + j];
                            for k in 0..d {
                                gr[(i * m + j) * d + k] = w * qv[i * d + k];
                            }
                        }
                    }
                    self.acc(r, &gr);
                }
            }
            Op::RelMix(a, r) => {
                let m = self.records[a].shape[0];
                let d = rows_cols(&self.records[r].shape).1;
                if self.rg(a) {
                    let rv = &self.records[r].value;
                    let mut ga = vec![0.0; m * m];
                    for i in 0..m {
                        for j in 0..m {
                            ga[i * m + j] =
                                (0..d).map(|k| g[i * d + k] * rv[(i * m + j) * d + k]).sum::<f64>();
                        }
                    }
                    self.acc(a, &ga);
                }
                if self.rg(r) {
                    let av = &self.records[a].value;
                    let mut gr = vec![0.0; m * m * d];
                    for i in 0..m {
                        for j in 0..m {
                            let w = av[i * m + j];
                            for k in 0..d {
                                gr[(i * m + j) * d + k] = w * g[i * d + k];
                            }
                        }
                    }
                    self.acc(r, &gr);
                }
            }
            Op::Dropout(a, ref mask) => {
                let ga: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.acc(a, &ga);
            }
        }
    }

    /// Gradients of every parameter used on this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        ids.into_iter().filter_map(|(&id, &idx)| self.grads.get(idx)?.as_deref().map(|g| (id, g)))
    }

    /// Adds this tape's parameter gradients onto the store's `grad` buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            let t = store.get_mut(id);
            match &mut t.grad {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0; 4]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_is_bias() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![3.0; 5]));
        let g = t.constant(Tensor::row(vec![2.0; 5]));
        let b = t.constant(Tensor::row(vec![0.0; 5]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn repeated_backward_does_not_double() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]).with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let logits = t.constant(Tensor::row(vec![0.0; 3]));
        assert!(matches!(t.cross_entropy(logits, &[3]), Err(AutodiffError::TargetOutOfRange { target: 3, classes: 3 })));
        assert!(matches!(t.backward(a), Err(AutodiffError::NotScalar(_))));

        let mut other = Tape::new();
        let foreign = other.constant(Tensor::scalar(1.0));
        assert_eq!(t.backward(foreign), Err(AutodiffError::Detached));
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::row(vec![0.7; 36]));
        let l = t.cross_entropy(logits, &[5]).unwrap();
        assert!((t.scalar(l) - 36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![1.0, -2.0]));
        store.get_mut(p).grad = Some(vec![0.0, 0.0]);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default());
        assert_eq!(store.get(p).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign_of_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![1.0, 1.0, 1.0]));
        store.get_mut(p).grad = Some(vec![0.3, -4.0, 1e-3]);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        adam_step(&mut store, &mut state, &cfg);
        let d = store.get(p).data();
        for (x, s) in d.iter().zip([-1.0, 1.0, -1.0]) {
            assert!(((x - 1.0) - s * 0.01).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(5.0));
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        for _ in 0..200 {
            let x = store.get(p).data()[0];
            store.get_mut(p).grad = Some(vec![2.0 * x]);
            adam_step(&mut store, &mut state, &cfg);
        }
        assert!(store.get(p).data()[0].abs() < 0.1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap());
        store.add("b", Tensor::row(vec![f64::MIN_POSITIVE]));
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DAMR");
        let entries = read_checkpoint(buf.as_slice()).unwrap();
        let mut other = store.clone();
        other.get_mut(ParamId(0)).data_mut()[0] = 99.0;
        other.load(entries).unwrap();
        assert_eq!(other.snapshot(), store.snapshot());
        assert!(read_checkpoint(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn dropout_is_identity_when_evaluating() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(t.dropout(x).unwrap(), x);
        let mut t = Tape::training(0.5, rng_stream(1, 0));
        let x = t.constant(Tensor::row(vec![1.0; 64]));
        let y = t.dropout(x).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
