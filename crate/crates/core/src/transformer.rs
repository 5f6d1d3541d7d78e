//! Simplified linear-attention blocks on `4d`-wide tokens.
//!
//! One block maps the token sequence `e_1, …, e_T` to
//!
//! ```text
//! ê_t = W_MLP · ( e_t + (1/t) · W_P · E_t · E_tᵀ · W_Q · e_t ),   E_t = (e_1, …, e_t)
//! ```
//!
//! with no bias, no nonlinearity and no softmax. Trajectories are embedded as
//! `e_t = (0_d, 0_d, x_t, x_{t-1})` and the prediction `ŷ_t` is read from the
//! first `d` entries of the final token.
//!
//! The production path ([`CompiledStack`]) keeps the running statistic
//! `Σ_{i≤t} e_i[P] e_i[Q]ᵀ`, where `P` are the nonzero columns of `W_P` and
//! `Q` the nonzero rows of `W_Q`, and evaluates a batch of sequences at once.
//! [`attention_block_reference`] evaluates the display literally in `O(T²)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lds::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<DVector<f64>>,
    pub d: usize,
}

impl TokenSequence {
    pub fn new(d: usize, tokens: Vec<DVector<f64>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(bad) = tokens.iter().find(|e| e.len() != 4 * d) {
            return Err(Error::DimensionMismatch { expected: 4 * d, actual: bad.len() });
        }
        Ok(Self { tokens, d })
    }

    pub fn width(&self) -> usize {
        4 * self.d
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { tokens: self.tokens.iter().map(|e| e * c).collect(), d: self.d }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_mlp: DMatrix<f64>,
    pub w_p: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
}

impl LayerWeights {
    pub fn new(w_mlp: DMatrix<f64>, w_p: DMatrix<f64>, w_q: DMatrix<f64>) -> Result<Self> {
        let layer = Self { w_mlp, w_p, w_q };
        layer.validate()?;
        Ok(layer)
    }

    /// `W_P = W_Q = 0`, `W_MLP = I`.
    pub fn identity(d: usize) -> Self {
        let n = 4 * d;
        Self { w_mlp: DMatrix::identity(n, n), w_p: DMatrix::zeros(n, n), w_q: DMatrix::zeros(n, n) }
    }

    pub fn width(&self) -> usize {
        self.w_mlp.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.w_mlp.nrows();
        if n == 0 || !n.is_multiple_of(4) {
            return Err(invalid(format!("layer width {n} is not a positive multiple of 4")));
        }
        for m in [&self.w_mlp, &self.w_p, &self.w_q] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: m.nrows().max(m.ncols()) });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid("layer weights must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub d: usize,
    pub layers: Vec<LayerWeights>,
}

impl TransformerStack {
    pub fn new(d: usize, layers: Vec<LayerWeights>) -> Result<Self> {
        let stack = Self { d, layers };
        stack.validate()?;
        Ok(stack)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::Empty("transformer stack"));
        }
        for layer in &self.layers {
            layer.validate()?;
            if layer.width() != 4 * self.d {
                return Err(Error::DimensionMismatch { expected: 4 * self.d, actual: layer.width() });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&StackFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<StackFile>(text)?.try_into()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &StackFile::from(self))?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        serde_json::from_reader::<_, StackFile>(input)?.try_into()
    }
}

/// On-disk layout: square matrices as flat row-major arrays.
#[derive(Debug, Serialize, Deserialize)]
struct StackFile {
    d: usize,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W_MLP")]
    w_mlp: Vec<f64>,
    #[serde(rename = "W_P")]
    w_p: Vec<f64>,
    #[serde(rename = "W_Q")]
    w_q: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(n: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != n * n {
        return Err(Error::DimensionMismatch { expected: n * n, actual: data.len() });
    }
    Ok(DMatrix::from_row_slice(n, n, data))
}

impl From<&TransformerStack> for StackFile {
    fn from(stack: &TransformerStack) -> Self {
        Self {
            d: stack.d,
            layers: stack
                .layers
                .iter()
                .map(|l| LayerFile { w_mlp: row_major(&l.w_mlp), w_p: row_major(&l.w_p), w_q: row_major(&l.w_q) })
                .collect(),
        }
    }
}

impl TryFrom<StackFile> for TransformerStack {
    type Error = Error;

    fn try_from(file: StackFile) -> Result<Self> {
        let n = 4 * file.d;
        let layers = file
            .layers
            .iter()
            .map(|l| {
                LayerWeights::new(
                    from_row_major(n, &l.w_mlp)?,
                    from_row_major(n, &l.w_p)?,
                    from_row_major(n, &l.w_q)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        TransformerStack::new(file.d, layers)
    }
}

/// `e_t = (0_d, 0_d, x_t, x_{t-1})` for `t = 1..=T`.
pub fn embed(traj: &Trajectory) -> Result<TokenSequence> {
    if traj.states.len() < 2 {
        return Err(Error::Empty("trajectory has no transitions"));
    }
    let d = traj.dim();
    let tokens = traj
        .states
        .windows(2)
        .map(|pair| {
            let mut e = DVector::zeros(4 * d);
            e.rows_mut(2 * d, d).copy_from(&pair[1]);
            e.rows_mut(3 * d, d).copy_from(&pair[0]);
            e
        })
        .collect();
    TokenSequence::new(d, tokens)
}

/// One attention block applied to a single sequence.
pub fn attention_block(weights: &LayerWeights, tokens: &TokenSequence) -> Result<TokenSequence> {
    weights.validate()?;
    if weights.width() != tokens.width() {
        return Err(Error::DimensionMismatch { expected: weights.width(), actual: tokens.width() });
    }
    let layer = CompiledLayer::new(weights);
    let input = TokenBatch::from_sequence(tokens);
    let mut output = TokenBatch::zeros(tokens.d, tokens.len(), 1);
    layer.apply(&input, &mut output, &mut Scratch::default());
    Ok(output.sequence(0))
}

/// Literal `O(T²)` evaluation of the block, materialising `E_t` at every step.
pub fn attention_block_reference(weights: &LayerWeights, tokens: &TokenSequence) -> Result<TokenSequence> {
    let parts = attention_terms_reference(weights, tokens)?;
    let out = parts.into_iter().map(|(residual, attn)| &weights.w_mlp * (residual + attn)).collect();
    TokenSequence::new(tokens.d, out)
}

/// Pre-MLP decomposition `(e_t, (1/t) W_P E_t E_tᵀ W_Q e_t)` for every `t`.
pub fn attention_terms_reference(
    weights: &LayerWeights,
    tokens: &TokenSequence,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    weights.validate()?;
    if weights.width() != tokens.width() {
        return Err(Error::DimensionMismatch { expected: weights.width(), actual: tokens.width() });
    }
    let n = tokens.width();
    Ok((1..=tokens.len())
        .map(|t| {
            let e_mat = DMatrix::from_columns(&tokens.tokens[..t]);
            debug_assert_eq!(e_mat.nrows(), n);
            let e_t = &tokens.tokens[t - 1];
            let attn = &weights.w_p * &e_mat * e_mat.transpose() * &weights.w_q * e_t / t as f64;
            (e_t.clone(), attn)
        })
        .collect())
}

/// Predictions `ŷ_1, …, ŷ_T` of `stack` on `traj`.
pub fn forward(stack: &TransformerStack, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
    stack.validate()?;
    if traj.dim() != stack.d {
        return Err(Error::DimensionMismatch { expected: stack.d, actual: traj.dim() });
    }
    let tokens = embed(traj)?;
    let out = CompiledStack::new(stack).run(TokenBatch::from_sequence(&tokens));
    Ok((1..=tokens.len()).map(|t| DVector::from_vec(out.prediction(0, t))).collect())
}

/// Output tokens of every layer applied in order (no prediction readout).
pub fn forward_tokens(stack: &TransformerStack, tokens: &TokenSequence) -> Result<TokenSequence> {
    stack.validate()?;
    if tokens.d != stack.d {
        return Err(Error::DimensionMismatch { expected: stack.d, actual: tokens.d });
    }
    Ok(CompiledStack::new(stack).run(TokenBatch::from_sequence(tokens)).sequence(0))
}

/// A batch of token sequences of equal length, laid out `[t][row][sequence]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    d: usize,
    len: usize,
    batch: usize,
    data: Vec<f64>,
}

impl TokenBatch {
    pub fn zeros(d: usize, len: usize, batch: usize) -> Self {
        Self { d, len, batch, data: vec![0.0; len * 4 * d * batch] }
    }

    pub fn from_sequence(tokens: &TokenSequence) -> Self {
        let mut out = Self::zeros(tokens.d, tokens.len(), 1);
        for (t, e) in tokens.tokens.iter().enumerate() {
            for (k, &v) in e.iter().enumerate() {
                let i = out.index(t, k, 0);
                out.data[i] = v;
            }
        }
        out
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn index(&self, t: usize, k: usize, b: usize) -> usize {
        (t * 4 * self.d + k) * self.batch + b
    }

    /// Embeds the states `x_0..x_T` (row-major, `x_t = states[t*d..(t+1)*d]`)
    /// into slot `b`, zeroing the two placeholder blocks.
    pub fn embed_states(&mut self, b: usize, states: &[f64]) {
        let d = self.d;
        assert_eq!(states.len(), (self.len + 1) * d, "states must hold T+1 vectors");
        for t in 0..self.len {
            for k in 0..2 * d {
                let i = self.index(t, k, b);
                self.data[i] = 0.0;
            }
            for k in 0..d {
                let cur = self.index(t, 2 * d + k, b);
                self.data[cur] = states[(t + 1) * d + k];
                let prev = self.index(t, 3 * d + k, b);
                self.data[prev] = states[t * d + k];
            }
        }
    }

    /// First `d` entries of token `t` (1-based) in slot `b`.
    pub fn prediction(&self, b: usize, t: usize) -> Vec<f64> {
        (0..self.d).map(|k| self.data[self.index(t - 1, k, b)]).collect()
    }

    pub fn sequence(&self, b: usize) -> TokenSequence {
        let n = 4 * self.d;
        let tokens = (0..self.len)
            .map(|t| DVector::from_fn(n, |k, _| self.data[self.index(t, k, b)]))
            .collect();
        TokenSequence { tokens, d: self.d }
    }
}

type SparseRow = Vec<(usize, f64)>;

fn sparse_rows(m: &DMatrix<f64>) -> Vec<SparseRow> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).filter(|&c| m[(r, c)] != 0.0).map(|c| (c, m[(r, c)])).collect())
        .collect()
}

/// A layer reduced to its nonzero structure.
#[derive(Debug, Clone)]
struct CompiledLayer {
    /// Rows of `W_Q` with a nonzero entry, with their entries.
    q_rows: Vec<usize>,
    q_entries: Vec<SparseRow>,
    /// Columns of `W_P` with a nonzero entry.
    p_cols: Vec<usize>,
    /// Per output row: `(position in p_cols, value)`.
    p_entries: Vec<SparseRow>,
    mlp: Vec<SparseRow>,
}

#[derive(Debug, Default)]
struct Scratch {
    gram: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    h: Vec<f64>,
}

impl CompiledLayer {
    fn new(w: &LayerWeights) -> Self {
        let q_all = sparse_rows(&w.w_q);
        let (q_rows, q_entries): (Vec<usize>, Vec<SparseRow>) =
            q_all.into_iter().enumerate().filter(|(_, row)| !row.is_empty()).unzip();
        let n = w.w_p.ncols();
        let p_cols: Vec<usize> = (0..n).filter(|&c| w.w_p.column(c).iter().any(|&v| v != 0.0)).collect();
        let p_entries = (0..w.w_p.nrows())
            .map(|r| {
                p_cols
                    .iter()
                    .enumerate()
                    .filter(|&(_, &c)| w.w_p[(r, c)] != 0.0)
                    .map(|(a, &c)| (a, w.w_p[(r, c)]))
                    .collect()
            })
            .collect();
        Self { q_rows, q_entries, p_cols, p_entries, mlp: sparse_rows(&w.w_mlp) }
    }

    fn apply(&self, input: &TokenBatch, out: &mut TokenBatch, s: &mut Scratch) {
        let bs = input.batch;
        let width = 4 * input.d;
        let (np, nq) = (self.p_cols.len(), self.q_rows.len());
        s.gram.clear();
        s.gram.resize(np * nq * bs, 0.0);
        s.u.resize(nq * bs, 0.0);
        s.v.resize(np * bs, 0.0);
        s.h.resize(width * bs, 0.0);
        let stride = width * bs;
        for t in 0..input.len {
            let e = &input.data[t * stride..(t + 1) * stride];
            let lane = |k: usize| &e[k * bs..(k + 1) * bs];

            // Running Σ_{i≤t} e_i[P] e_i[Q]ᵀ, including the current token.
            for (a, &pc) in self.p_cols.iter().enumerate() {
                let ep = lane(pc);
                for (qi, &qr) in self.q_rows.iter().enumerate() {
                    let eq = lane(qr);
                    let g = &mut s.gram[(a * nq + qi) * bs..(a * nq + qi + 1) * bs];
                    for b in 0..bs {
                        g[b] += ep[b] * eq[b];
                    }
                }
            }
            // u = (W_Q e_t)[Q]
            for (qi, row) in self.q_entries.iter().enumerate() {
                let u = &mut s.u[qi * bs..(qi + 1) * bs];
                u.fill(0.0);
                for &(c, val) in row {
                    let ec = lane(c);
                    for b in 0..bs {
                        u[b] += val * ec[b];
                    }
                }
            }
            // v = (1/t) · gram · u
            let inv_t = 1.0 / (t + 1) as f64;
            for a in 0..np {
                let v = &mut s.v[a * bs..(a + 1) * bs];
                v.fill(0.0);
                for qi in 0..nq {
                    let g = &s.gram[(a * nq + qi) * bs..(a * nq + qi + 1) * bs];
                    let u = &s.u[qi * bs..(qi + 1) * bs];
                    for b in 0..bs {
                        v[b] += g[b] * u[b];
                    }
                }
                for x in v.iter_mut() {
                    *x *= inv_t;
                }
            }
            // h = e_t + W_P[:, P] · v
            s.h.copy_from_slice(e);
            for (k, row) in self.p_entries.iter().enumerate() {
                let h = &mut s.h[k * bs..(k + 1) * bs];
                for &(a, val) in row {
                    let v = &s.v[a * bs..(a + 1) * bs];
                    for b in 0..bs {
                        h[b] += val * v[b];
                    }
                }
            }
            // ê_t = W_MLP · h
            let o = &mut out.data[t * stride..(t + 1) * stride];
            for (k, row) in self.mlp.iter().enumerate() {
                let ok = &mut o[k * bs..(k + 1) * bs];
                ok.fill(0.0);
                for &(c, val) in row {
                    let hc = &s.h[c * bs..(c + 1) * bs];
                    for b in 0..bs {
                        ok[b] += val * hc[b];
                    }
                }
            }
        }
    }
}

/// A stack prepared for repeated batched evaluation.
#[derive(Debug, Clone)]
pub struct CompiledStack {
    d: usize,
    layers: Vec<CompiledLayer>,
}

impl CompiledStack {
    pub fn new(stack: &TransformerStack) -> Self {
        Self { d: stack.d, layers: stack.layers.iter().map(CompiledLayer::new).collect() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Applies every layer to `batch` and returns the final tokens.
    pub fn run(&self, batch: TokenBatch) -> TokenBatch {
        assert_eq!(batch.d, self.d, "token batch dimension");
        let mut scratch = Scratch::default();
        let mut cur = batch;
        let mut next = TokenBatch::zeros(cur.d, cur.len, cur.batch);
        for layer in &self.layers {
            layer.apply(&cur, &mut next, &mut scratch);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}
