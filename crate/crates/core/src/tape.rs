use crate::scalar::{sc, Scalar};
use crate::tensor::Mat;

/// Handle to a buffer recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BufId(usize);

struct Buf<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
    needs_grad: bool,
}

enum Op<F> {
    Matmul { a: BufId, b: BufId, out: BufId },
    /// a · bᵀ
    MatmulBt { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { a: BufId, c: F, out: BufId },
    /// Broadcast a 1×n row over every row of a.
    AddRow { a: BufId, row: BufId, out: BufId },
    Relu { a: BufId, out: BufId },
    Gelu { a: BufId, out: BufId },
    Exp { a: BufId, out: BufId },
    Ln { a: BufId, out: BufId },
    Clip { a: BufId, lo: F, hi: F, out: BufId },
    LayerNorm { x: BufId, gamma: BufId, beta: BufId, mean: Vec<F>, rstd: Vec<F>, out: BufId },
    SoftmaxRows { x: BufId, out: BufId },
    LogSoftmaxRows { x: BufId, out: BufId },
    ConcatRows { parts: Vec<BufId>, out: BufId },
    SliceRows { x: BufId, start: usize, out: BufId },
    ConcatCols { parts: Vec<BufId>, out: BufId },
    SliceCols { x: BufId, start: usize, out: BufId },
    PermuteRows { x: BufId, perm: Vec<usize>, out: BufId },
    MeanRows { x: BufId, out: BufId },
    MeanAll { x: BufId, out: BufId },
    CrossEntropy { logits: BufId, targets: Vec<usize>, probs: Vec<F>, out: BufId },
    MseVsConst { pred: BufId, targets: Vec<F>, out: BufId },
    /// Scalar output with a caller-supplied gradient w.r.t. its input.
    ScalarWithGrad { x: BufId, grad: Vec<F>, out: BufId },
}

/// Reverse-mode autodiff over a flat operation record.
///
/// Every op method computes its forward value immediately and returns the
/// id of the output buffer. `backward` replays the record in reverse and
/// accumulates gradients only into buffers created with `needs_grad`.
pub struct Tape<F: Scalar> {
    bufs: Vec<Buf<F>>,
    ops: Vec<Op<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    pub fn leaf(&mut self, m: &Mat<F>, needs_grad: bool) -> BufId {
        self.alloc(m.rows(), m.cols(), m.as_slice().to_vec(), needs_grad)
    }

    pub fn input(&mut self, m: &Mat<F>) -> BufId {
        self.leaf(m, false)
    }

    fn alloc(&mut self, rows: usize, cols: usize, data: Vec<F>, needs_grad: bool) -> BufId {
        assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf { rows, cols, data, needs_grad });
        BufId(self.bufs.len() - 1)
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        let b = &self.bufs[id.0];
        (b.rows, b.cols)
    }

    pub fn value(&self, id: BufId) -> &[F] {
        &self.bufs[id.0].data
    }

    pub fn mat(&self, id: BufId) -> Mat<F> {
        let b = &self.bufs[id.0];
        Mat::from_vec(b.rows, b.cols, b.data.clone())
    }

    pub fn scalar_value(&self, id: BufId) -> F {
        let b = &self.bufs[id.0];
        assert_eq!((b.rows, b.cols), (1, 1), "not a scalar buffer");
        b.data[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn view(&self, id: BufId) -> Mat<F> {
        self.mat(id)
    }

    fn push_op(&mut self, out: BufId, op: Op<F>) {
        if self.bufs[out.0].needs_grad {
            self.ops.push(op);
        }
    }

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let prod = self.view(a).matmul(&self.view(b));
        let ng = self.needs(a) || self.needs(b);
        let out = self.alloc(prod.rows(), prod.cols(), prod.as_slice().to_vec(), ng);
        self.push_op(out, Op::Matmul { a, b, out });
        out
    }

    pub fn matmul_bt(&mut self, a: BufId, b: BufId) -> BufId {
        let prod = self.view(a).matmul_bt(&self.view(b));
        let ng = self.needs(a) || self.needs(b);
        let out = self.alloc(prod.rows(), prod.cols(), prod.as_slice().to_vec(), ng);
        self.push_op(out, Op::MatmulBt { a, b, out });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.elementwise(a, b, |x, y| x + y);
        self.push_op(out, Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.elementwise(a, b, |x, y| x - y);
        self.push_op(out, Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.elementwise(a, b, |x, y| x * y);
        self.push_op(out, Op::Mul { a, b, out });
        out
    }

    fn elementwise(&mut self, a: BufId, b: BufId, f: impl Fn(F, F) -> F) -> BufId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "elementwise shape mismatch");
        let data: Vec<F> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.alloc(r, c, data, ng)
    }

    pub fn scale(&mut self, a: BufId, c: F) -> BufId {
        let (r, cc) = self.shape(a);
        let data: Vec<F> = self.bufs[a.0].data.iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, cc, data, ng);
        self.push_op(out, Op::Scale { a, c, out });
        out
    }

    pub fn add_row(&mut self, a: BufId, row: BufId) -> BufId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "row broadcast shape mismatch");
        let mut data = self.bufs[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.bufs[row.0].data[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::AddRow { a, row, out });
        out
    }

    pub fn relu(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data: Vec<F> =
            self.bufs[a.0].data.iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::Relu { a, out });
        out
    }

    pub fn gelu(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data: Vec<F> = self.bufs[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::Gelu { a, out });
        out
    }

    pub fn exp(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data: Vec<F> = self.bufs[a.0].data.iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::Exp { a, out });
        out
    }

    pub fn ln(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data: Vec<F> = self.bufs[a.0].data.iter().map(|&x| x.ln()).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::Ln { a, out });
        out
    }

    pub fn clip(&mut self, a: BufId, lo: F, hi: F) -> BufId {
        let (r, c) = self.shape(a);
        let data: Vec<F> =
            self.bufs[a.0].data.iter().map(|&x| x.max(lo).min(hi)).collect();
        let ng = self.needs(a);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::Clip { a, lo, hi, out });
        out
    }

    /// Row-wise layer norm with learned gain and shift (1×c each).
    pub fn layer_norm(&mut self, x: BufId, gamma: BufId, beta: BufId) -> BufId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let eps = sc::<F>(1e-5);
        let mut data = vec![F::zero(); r * c];
        let mut means = vec![F::zero(); r];
        let mut rstds = vec![F::zero(); r];
        let cn = sc::<F>(c as f64);
        for i in 0..r {
            let row = &self.bufs[x.0].data[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
            let rstd = F::one() / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                data[i * c + j] = xhat * self.bufs[gamma.0].data[j] + self.bufs[beta.0].data[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds, out });
        out
    }

    pub fn softmax_rows(&mut self, x: BufId) -> BufId {
        let (r, c) = self.shape(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &self.bufs[x.0].data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        let ng = self.needs(x);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::SoftmaxRows { x, out });
        out
    }

    pub fn log_softmax_rows(&mut self, x: BufId) -> BufId {
        let (r, c) = self.shape(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &self.bufs[x.0].data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.needs(x);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::LogSoftmaxRows { x, out });
        out
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            data.extend_from_slice(&self.bufs[p.0].data);
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let out = self.alloc(rows, c, data, ng);
        self.push_op(out, Op::ConcatRows { parts: parts.to_vec(), out });
        out
    }

    pub fn slice_rows(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let (r, c) = self.shape(x);
        assert!(start + len <= r, "row slice out of range");
        let data = self.bufs[x.0].data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        let out = self.alloc(len, c, data, ng);
        self.push_op(out, Op::SliceRows { x, start, out });
        out
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![F::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols row mismatch");
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&self.bufs[p.0].data[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let out = self.alloc(r, total, data, ng);
        self.push_op(out, Op::ConcatCols { parts: parts.to_vec(), out });
        out
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "column slice out of range");
        let mut data = vec![F::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.bufs[x.0].data[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        let out = self.alloc(r, len, data, ng);
        self.push_op(out, Op::SliceCols { x, start, out });
        out
    }

    pub fn permute_rows(&mut self, x: BufId, perm: &[usize]) -> BufId {
        let (r, c) = self.shape(x);
        assert_eq!(perm.len(), r);
        let mut data = vec![F::zero(); r * c];
        for (i, &src) in perm.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&self.bufs[x.0].data[src * c..(src + 1) * c]);
        }
        let ng = self.needs(x);
        let out = self.alloc(r, c, data, ng);
        self.push_op(out, Op::PermuteRows { x, perm: perm.to_vec(), out });
        out
    }

    /// Column means: r×c → 1×c.
    pub fn mean_rows(&mut self, x: BufId) -> BufId {
        let (r, c) = self.shape(x);
        let rn = sc::<F>(r as f64);
        let mut data = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.bufs[x.0].data[i * c + j];
            }
        }
        for v in &mut data {
            *v /= rn;
        }
        let ng = self.needs(x);
        let out = self.alloc(1, c, data, ng);
        self.push_op(out, Op::MeanRows { x, out });
        out
    }

    pub fn mean_all(&mut self, x: BufId) -> BufId {
        let (r, c) = self.shape(x);
        let n = sc::<F>((r * c) as f64);
        let total = self.bufs[x.0].data.iter().copied().sum::<F>() / n;
        let ng = self.needs(x);
        let out = self.alloc(1, 1, vec![total], ng);
        self.push_op(out, Op::MeanAll { x, out });
        out
    }

    /// Mean cross-entropy of row logits against integer targets.
    pub fn cross_entropy(&mut self, logits: BufId, targets: &[usize]) -> BufId {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r);
        assert!(targets.iter().all(|&t| t < c), "target class out of range");
        let mut probs = vec![F::zero(); r * c];
        let mut loss = F::zero();
        for i in 0..r {
            let row = &self.bufs[logits.0].data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            let lse = max + denom.ln();
            loss += lse - row[targets[i]];
        }
        loss /= sc::<F>(r as f64);
        let ng = self.needs(logits);
        let out = self.alloc(1, 1, vec![loss], ng);
        self.push_op(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, out });
        out
    }

    /// Mean squared error of an r×1 prediction column against constants.
    pub fn mse_vs_const(&mut self, pred: BufId, targets: &[F]) -> BufId {
        let (r, c) = self.shape(pred);
        assert_eq!(c, 1, "mse expects a column vector");
        assert_eq!(targets.len(), r);
        let rn = sc::<F>(r as f64);
        let mut loss = F::zero();
        for i in 0..r {
            let d = self.bufs[pred.0].data[i] - targets[i];
            loss += d * d;
        }
        loss /= rn;
        let ng = self.needs(pred);
        let out = self.alloc(1, 1, vec![loss], ng);
        self.push_op(out, Op::MseVsConst { pred, targets: targets.to_vec(), out });
        out
    }

    /// Records a scalar whose gradient w.r.t. `x` was computed externally.
    pub fn scalar_with_grad(&mut self, x: BufId, value: F, grad: Vec<F>) -> BufId {
        let (r, c) = self.shape(x);
        assert_eq!(grad.len(), r * c);
        let ng = self.needs(x);
        let out = self.alloc(1, 1, vec![value], ng);
        self.push_op(out, Op::ScalarWithGrad { x, grad, out });
        out
    }

    fn needs(&self, id: BufId) -> bool {
        self.bufs[id.0].needs_grad
    }

    /// Accumulates d(loss)/d(buffer) for every `needs_grad` buffer reachable
    /// from `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        assert!(self.needs(loss), "loss does not depend on any differentiable buffer");
        self.grads = (0..self.bufs.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.apply_backward(op);
        }
        self.ops = ops;
    }

    fn upstream(&self, out: BufId) -> Option<Vec<F>> {
        self.grads[out.0].clone()
    }

    fn add_grad(&mut self, id: BufId, delta: Vec<F>) {
        if !self.needs(id) {
            return;
        }
        let len = self.bufs[id.0].data.len();
        debug_assert_eq!(delta.len(), len);
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, op: &Op<F>) {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (m, n) = self.shape(*out);
                let dout = Mat::from_vec(m, n, up);
                if self.needs(*a) {
                    let da = dout.matmul_bt(&self.view(*b));
                    self.add_grad(*a, da.as_slice().to_vec());
                }
                if self.needs(*b) {
                    let db = self.view(*a).matmul_at(&dout);
                    self.add_grad(*b, db.as_slice().to_vec());
                }
            }
            Op::MatmulBt { a, b, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (m, n) = self.shape(*out);
                let dout = Mat::from_vec(m, n, up);
                if self.needs(*a) {
                    let da = dout.matmul(&self.view(*b));
                    self.add_grad(*a, da.as_slice().to_vec());
                }
                if self.needs(*b) {
                    let db = dout.matmul_at(&self.view(*a));
                    self.add_grad(*b, db.as_slice().to_vec());
                }
            }
            Op::Add { a, b, out } => {
                let Some(up) = self.upstream(*out) else { return };
                self.add_grad(*a, up.clone());
                self.add_grad(*b, up);
            }
            Op::Sub { a, b, out } => {
                let Some(up) = self.upstream(*out) else { return };
                self.add_grad(*a, up.clone());
                self.add_grad(*b, up.iter().map(|&g| -g).collect());
            }
            Op::Mul { a, b, out } => {
                let Some(up) = self.upstream(*out) else { return };
                if self.needs(*a) {
                    let da: Vec<F> =
                        up.iter().zip(&self.bufs[b.0].data).map(|(&g, &y)| g * y).collect();
                    self.add_grad(*a, da);
                }
                if self.needs(*b) {
                    let db: Vec<F> =
                        up.iter().zip(&self.bufs[a.0].data).map(|(&g, &x)| g * x).collect();
                    self.add_grad(*b, db);
                }
            }
            Op::Scale { a, c, out } => {
                let Some(up) = self.upstream(*out) else { return };
                self.add_grad(*a, up.iter().map(|&g| g * *c).collect());
            }
            Op::AddRow { a, row, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*a);
                self.add_grad(*a, up.clone());
                if self.needs(*row) {
                    let mut drow = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += up[i * c + j];
                        }
                    }
                    self.add_grad(*row, drow);
                }
            }
            Op::Relu { a, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let da: Vec<F> = up
                    .iter()
                    .zip(&self.bufs[a.0].data)
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                self.add_grad(*a, da);
            }
            Op::Gelu { a, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let da: Vec<F> =
                    up.iter().zip(&self.bufs[a.0].data).map(|(&g, &x)| g * gelu_bwd(x)).collect();
                self.add_grad(*a, da);
            }
            Op::Exp { a, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let da: Vec<F> =
                    up.iter().zip(&self.bufs[out.0].data).map(|(&g, &y)| g * y).collect();
                self.add_grad(*a, da);
            }
            Op::Ln { a, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let da: Vec<F> =
                    up.iter().zip(&self.bufs[a.0].data).map(|(&g, &x)| g / x).collect();
                self.add_grad(*a, da);
            }
            Op::Clip { a, lo, hi, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let da: Vec<F> = up
                    .iter()
                    .zip(&self.bufs[a.0].data)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { F::zero() })
                    .collect();
                self.add_grad(*a, da);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let cn = sc::<F>(c as f64);
                let mut dx = vec![F::zero(); r * c];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..r {
                    let xrow = &self.bufs[x.0].data[i * c..(i + 1) * c];
                    let uprow = &up[i * c..(i + 1) * c];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..c {
                        let xhat = (xrow[j] - mean[i]) * rstd[i];
                        let g = uprow[j] * self.bufs[gamma.0].data[j];
                        m1 += g;
                        m2 += g * xhat;
                        dgamma[j] += uprow[j] * xhat;
                        dbeta[j] += uprow[j];
                    }
                    m1 /= cn;
                    m2 /= cn;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean[i]) * rstd[i];
                        let g = uprow[j] * self.bufs[gamma.0].data[j];
                        dx[i * c + j] = rstd[i] * (g - m1 - xhat * m2);
                    }
                }
                self.add_grad(*x, dx);
                self.add_grad(*gamma, dgamma);
                self.add_grad(*beta, dbeta);
            }
            Op::SoftmaxRows { x, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    let s = &self.bufs[out.0].data[i * c..(i + 1) * c];
                    let uprow = &up[i * c..(i + 1) * c];
                    let dot: F = s.iter().zip(uprow).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..c {
                        dx[i * c + j] = s[j] * (uprow[j] - dot);
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::LogSoftmaxRows { x, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    let yrow = &self.bufs[out.0].data[i * c..(i + 1) * c];
                    let uprow = &up[i * c..(i + 1) * c];
                    let sum_up: F = uprow.iter().copied().sum();
                    for j in 0..c {
                        dx[i * c + j] = uprow[j] - yrow[j].exp() * sum_up;
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::ConcatRows { parts, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let c = self.shape(*out).1;
                let mut start = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    let slice = up[start * c..(start + r) * c].to_vec();
                    self.add_grad(p, slice);
                    start += r;
                }
            }
            Op::SliceRows { x, start, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (xr, c) = self.shape(*x);
                let (or, _) = self.shape(*out);
                let mut dx = vec![F::zero(); xr * c];
                dx[start * c..(start + or) * c].copy_from_slice(&up);
                self.add_grad(*x, dx);
            }
            Op::ConcatCols { parts, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, total) = self.shape(*out);
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.needs(p) {
                        let mut dp = vec![F::zero(); r * pc];
                        for i in 0..r {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&up[i * total + off..i * total + off + pc]);
                        }
                        self.add_grad(p, dp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let (_, oc) = self.shape(*out);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + oc]
                        .copy_from_slice(&up[i * oc..(i + 1) * oc]);
                }
                self.add_grad(*x, dx);
            }
            Op::PermuteRows { x, perm, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let mut dx = vec![F::zero(); r * c];
                for (i, &src) in perm.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += up[i * c + j];
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::MeanRows { x, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let rn = sc::<F>(r as f64);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = up[j] / rn;
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::MeanAll { x, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*x);
                let n = sc::<F>((r * c) as f64);
                let g = up[0] / n;
                self.add_grad(*x, vec![g; r * c]);
            }
            Op::CrossEntropy { logits, targets, probs, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let (r, c) = self.shape(*logits);
                let rn = sc::<F>(r as f64);
                let mut dl = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        let indicator = if targets[i] == j { F::one() } else { F::zero() };
                        dl[i * c + j] = up[0] * (probs[i * c + j] - indicator) / rn;
                    }
                }
                self.add_grad(*logits, dl);
            }
            Op::MseVsConst { pred, targets, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let r = self.shape(*pred).0;
                let rn = sc::<F>(r as f64);
                let two = sc::<F>(2.0);
                let dp: Vec<F> = (0..r)
                    .map(|i| up[0] * two * (self.bufs[pred.0].data[i] - targets[i]) / rn)
                    .collect();
                self.add_grad(*pred, dp);
            }
            Op::ScalarWithGrad { x, grad, out } => {
                let Some(up) = self.upstream(*out) else { return };
                let dx: Vec<F> = grad.iter().map(|&g| g * up[0]).collect();
                self.add_grad(*x, dx);
            }
        }
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let k = sc::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = sc::<F>(0.044715);
    let half = sc::<F>(0.5);
    let inner = k * (x + c * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let k = sc::<F>(0.797_884_560_802_865_4);
    let c = sc::<F>(0.044715);
    let half = sc::<F>(0.5);
    let three = sc::<F>(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (F::one() + three * c * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}
