//! Layers built on the tape: linear, layer norm, multi-head attention,
//! pre-norm transformer encoder layers, and plain MLPs.
//!
//! Each layer owns its parameters as matrices and is "bound" onto a tape
//! before use: binding registers every parameter buffer (trainable or
//! frozen), records its name for gradient extraction, and returns a mirror
//! struct of buffer ids that the apply methods consume. `bind` and `visit`
//! of one layer must enumerate parameters under identical names.

use rand_chacha::ChaCha8Rng;

use crate::rng::normal;
use crate::scalar::{sc, Scalar};
use crate::tape::{BufId, Tape};
use crate::tensor::Mat;

/// Parameter names and tape ids recorded while binding a model.
#[derive(Default)]
pub struct Binding {
    pairs: Vec<(String, BufId)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, id: BufId) {
        debug_assert!(
            self.pairs.iter().all(|(n, _)| n != &name),
            "duplicate parameter name {name}"
        );
        self.pairs.push((name, id));
    }

    pub fn pairs(&self) -> &[(String, BufId)] {
        &self.pairs
    }
}

pub type VisitFn<'a, F> = &'a mut dyn FnMut(&str, &Mat<F>);
pub type VisitMutFn<'a, F> = &'a mut dyn FnMut(&str, &mut Mat<F>);

#[derive(Clone)]
pub struct Linear<F> {
    pub w: Mat<F>,
    pub b: Mat<F>,
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: BufId,
    pub b: BufId,
}

impl<F: Scalar> Linear<F> {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let scale = sc::<F>(1.0 / (fan_in as f64).sqrt());
        Linear {
            w: Mat::from_fn(fan_in, fan_out, |_, _| normal::<F>(rng) * scale),
            b: Mat::zeros(1, fan_out),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, prefix: &str, trainable: bool, reg: &mut Binding) -> BoundLinear {
        let w = t.leaf(&self.w, trainable);
        let b = t.leaf(&self.b, trainable);
        reg.push(format!("{prefix}.w"), w);
        reg.push(format!("{prefix}.b"), b);
        BoundLinear { w, b }
    }

    pub fn visit(&self, prefix: &str, f: VisitFn<F>) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMutFn<F>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

impl BoundLinear {
    pub fn apply<F: Scalar>(&self, t: &mut Tape<F>, x: BufId) -> BufId {
        let y = t.matmul(x, self.w);
        t.add_row(y, self.b)
    }
}

#[derive(Clone)]
pub struct LayerNormP<F> {
    pub gamma: Mat<F>,
    pub beta: Mat<F>,
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: BufId,
    pub beta: BufId,
}

impl<F: Scalar> LayerNormP<F> {
    pub fn new(dim: usize) -> Self {
        LayerNormP {
            gamma: Mat::from_fn(1, dim, |_, _| F::one()),
            beta: Mat::zeros(1, dim),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, prefix: &str, trainable: bool, reg: &mut Binding) -> BoundLayerNorm {
        let gamma = t.leaf(&self.gamma, trainable);
        let beta = t.leaf(&self.beta, trainable);
        reg.push(format!("{prefix}.g"), gamma);
        reg.push(format!("{prefix}.b"), beta);
        BoundLayerNorm { gamma, beta }
    }

    pub fn visit(&self, prefix: &str, f: VisitFn<F>) {
        f(&format!("{prefix}.g"), &self.gamma);
        f(&format!("{prefix}.b"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMutFn<F>) {
        f(&format!("{prefix}.g"), &mut self.gamma);
        f(&format!("{prefix}.b"), &mut self.beta);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

impl BoundLayerNorm {
    pub fn apply<F: Scalar>(&self, t: &mut Tape<F>, x: BufId) -> BufId {
        t.layer_norm(x, self.gamma, self.beta)
    }
}

#[derive(Clone)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub n_heads: usize,
}

pub struct BoundAttention {
    q: BoundLinear,
    k: BoundLinear,
    v: BoundLinear,
    o: BoundLinear,
    n_heads: usize,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new(rng, d_model, d_model),
            wv: Linear::new(rng, d_model, d_model),
            wo: Linear::new(rng, d_model, d_model),
            n_heads,
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, prefix: &str, trainable: bool, reg: &mut Binding) -> BoundAttention {
        BoundAttention {
            q: self.wq.bind(t, &format!("{prefix}.q"), trainable, reg),
            k: self.wk.bind(t, &format!("{prefix}.k"), trainable, reg),
            v: self.wv.bind(t, &format!("{prefix}.v"), trainable, reg),
            o: self.wo.bind(t, &format!("{prefix}.o"), trainable, reg),
            n_heads: self.n_heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: VisitFn<F>) {
        self.wq.visit(&format!("{prefix}.q"), f);
        self.wk.visit(&format!("{prefix}.k"), f);
        self.wv.visit(&format!("{prefix}.v"), f);
        self.wo.visit(&format!("{prefix}.o"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMutFn<F>) {
        self.wq.visit_mut(&format!("{prefix}.q"), f);
        self.wk.visit_mut(&format!("{prefix}.k"), f);
        self.wv.visit_mut(&format!("{prefix}.v"), f);
        self.wo.visit_mut(&format!("{prefix}.o"), f);
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + self.wo.param_count()
    }
}

impl BoundAttention {
    pub fn apply<F: Scalar>(&self, t: &mut Tape<F>, x: BufId) -> BufId {
        let (_, d_model) = t.shape(x);
        let d_head = d_model / self.n_heads;
        let q = self.q.apply(t, x);
        let k = self.k.apply(t, x);
        let v = self.v.apply(t, x);
        let inv_sqrt = sc::<F>(1.0 / (d_head as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = t.slice_cols(q, h * d_head, d_head);
            let kh = t.slice_cols(k, h * d_head, d_head);
            let vh = t.slice_cols(v, h * d_head, d_head);
            let scores = t.matmul_bt(qh, kh);
            let scores = t.scale(scores, inv_sqrt);
            let attn = t.softmax_rows(scores);
            heads.push(t.matmul(attn, vh));
        }
        let merged = t.concat_cols(&heads);
        self.o.apply(t, merged)
    }
}

/// Pre-norm transformer encoder layer: attention and feed-forward blocks,
/// each behind a layer norm with a residual connection.
#[derive(Clone)]
pub struct EncoderLayer<F> {
    pub ln1: LayerNormP<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNormP<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

pub struct BoundEncoderLayer {
    ln1: BoundLayerNorm,
    attn: BoundAttention,
    ln2: BoundLayerNorm,
    ff1: BoundLinear,
    ff2: BoundLinear,
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        EncoderLayer {
            ln1: LayerNormP::new(d_model),
            attn: MultiHeadAttention::new(rng, d_model, n_heads),
            ln2: LayerNormP::new(d_model),
            ff1: Linear::new(rng, d_model, d_ff),
            ff2: Linear::new(rng, d_ff, d_model),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, prefix: &str, trainable: bool, reg: &mut Binding) -> BoundEncoderLayer {
        BoundEncoderLayer {
            ln1: self.ln1.bind(t, &format!("{prefix}.ln1"), trainable, reg),
            attn: self.attn.bind(t, &format!("{prefix}.attn"), trainable, reg),
            ln2: self.ln2.bind(t, &format!("{prefix}.ln2"), trainable, reg),
            ff1: self.ff1.bind(t, &format!("{prefix}.ff1"), trainable, reg),
            ff2: self.ff2.bind(t, &format!("{prefix}.ff2"), trainable, reg),
        }
    }

    pub fn visit(&self, prefix: &str, f: VisitFn<F>) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMutFn<F>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), f);
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count()
            + self.attn.param_count()
            + self.ln2.param_count()
            + self.ff1.param_count()
            + self.ff2.param_count()
    }
}

impl BoundEncoderLayer {
    pub fn apply<F: Scalar>(&self, t: &mut Tape<F>, x: BufId) -> BufId {
        let normed = self.ln1.apply(t, x);
        let attended = self.attn.apply(t, normed);
        let x = t.add(x, attended);
        let normed = self.ln2.apply(t, x);
        let h = self.ff1.apply(t, normed);
        let h = t.gelu(h);
        let h = self.ff2.apply(t, h);
        t.add(x, h)
    }
}

/// Fully-connected stack with ReLU between layers (none after the last).
#[derive(Clone)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
}

pub struct BoundMlp {
    layers: Vec<BoundLinear>,
}

impl<F: Scalar> Mlp<F> {
    /// `dims` lists layer widths input-first, e.g. `[64, 256, 256, 256]`
    /// builds three linear layers.
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn bind(&self, t: &mut Tape<F>, prefix: &str, trainable: bool, reg: &mut Binding) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(t, &format!("{prefix}.l{i}"), trainable, reg))
            .collect();
        BoundMlp { layers }
    }

    pub fn visit(&self, prefix: &str, f: VisitFn<F>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMutFn<F>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

impl BoundMlp {
    pub fn apply<F: Scalar>(&self, t: &mut Tape<F>, x: BufId) -> BufId {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(t, h);
            if i + 1 < self.layers.len() {
                h = t.relu(h);
            }
        }
        h
    }
}
