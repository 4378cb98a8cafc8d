//! Finite-difference validation of every tape operation's backward pass.

use intapt_core::tape::{BufId, Tape};
use intapt_core::tensor::Mat;

/// Deterministic pseudo-random matrix, values roughly in [-1, 1].
fn mat(rows: usize, cols: usize, salt: u64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| {
        let x = (i * 131 + j * 17 + (salt as usize) * 709) as f64;
        (x * 0.714_159).sin() * 0.9
    })
}

/// Reduces an arbitrary output to a scalar with non-uniform weights so the
/// upstream gradient of the op under test varies per element.
fn probe(t: &mut Tape<f64>, y: BufId) -> BufId {
    let (r, c) = t.shape(y);
    let w = Mat::from_fn(r, c, |i, j| ((i * 23 + j * 7) as f64 * 0.39).cos() + 0.1);
    let w = t.input(&w);
    let prod = t.mul(y, w);
    t.mean_all(prod)
}

fn run(inputs: &[Mat<f64>], build: impl Fn(&mut Tape<f64>, &[BufId]) -> BufId) -> (f64, Vec<Vec<f64>>) {
    let mut t = Tape::new();
    let ids: Vec<BufId> = inputs.iter().map(|m| t.leaf(m, true)).collect();
    let loss = build(&mut t, &ids);
    let value = t.scalar_value(loss);
    t.backward(loss);
    let grads = ids.iter().map(|&id| t.grad(id).expect("missing grad").to_vec()).collect();
    (value, grads)
}

fn eval_loss(inputs: &[Mat<f64>], build: &impl Fn(&mut Tape<f64>, &[BufId]) -> BufId) -> f64 {
    let mut t = Tape::new();
    let ids: Vec<BufId> = inputs.iter().map(|m| t.leaf(m, true)).collect();
    let loss = build(&mut t, ids.as_slice());
    t.scalar_value(loss)
}

fn check_grads(inputs: &[Mat<f64>], build: impl Fn(&mut Tape<f64>, &[BufId]) -> BufId, label: &str) {
    let h = 1e-5;
    let (_, grads) = run(inputs, &build);
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].as_mut_slice()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].as_mut_slice()[k] -= h;
            let fd = (eval_loss(&plus, &build) - eval_loss(&minus, &build)) / (2.0 * h);
            let an = grads[which][k];
            let denom = 1.0f64.max(an.abs() + fd.abs());
            assert!(
                ((an - fd) / denom).abs() < 1e-6,
                "{label}: input {which} elem {k}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn matmul_grad() {
    check_grads(&[mat(3, 4, 1), mat(4, 5, 2)], |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        probe(t, y)
    }, "matmul");
}

#[test]
fn matmul_bt_grad() {
    check_grads(&[mat(3, 4, 3), mat(5, 4, 4)], |t, ids| {
        let y = t.matmul_bt(ids[0], ids[1]);
        probe(t, y)
    }, "matmul_bt");
}

#[test]
fn add_sub_mul_grad() {
    check_grads(&[mat(3, 4, 5), mat(3, 4, 6)], |t, ids| {
        let s = t.add(ids[0], ids[1]);
        let d = t.sub(s, ids[1]);
        let p = t.mul(d, ids[1]);
        probe(t, p)
    }, "add/sub/mul");
}

#[test]
fn scale_add_row_grad() {
    check_grads(&[mat(4, 3, 7), mat(1, 3, 8)], |t, ids| {
        let s = t.scale(ids[0], -1.7);
        let y = t.add_row(s, ids[1]);
        probe(t, y)
    }, "scale/add_row");
}

#[test]
fn relu_grad_away_from_kink() {
    let x = mat(4, 4, 9).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check_grads(&[x], |t, ids| {
        let y = t.relu(ids[0]);
        probe(t, y)
    }, "relu");
}

#[test]
fn gelu_grad() {
    check_grads(&[mat(4, 4, 10)], |t, ids| {
        let y = t.gelu(ids[0]);
        probe(t, y)
    }, "gelu");
}

#[test]
fn exp_ln_grad() {
    let x = mat(3, 3, 11).map(|v| v + 1.5); // keep ln inputs positive
    check_grads(&[x], |t, ids| {
        let e = t.exp(ids[0]);
        let l = t.ln(e);
        let y = t.ln(ids[0]);
        let s = t.add(l, y);
        probe(t, s)
    }, "exp/ln");
}

#[test]
fn clip_grad_away_from_bounds() {
    // keep every element at least 0.1 away from the clip bounds
    let x = mat(4, 4, 12).map(|v| if (v.abs() - 0.5).abs() < 0.1 { v * 0.5 } else { v });
    check_grads(&[x], |t, ids| {
        let y = t.clip(ids[0], -0.5, 0.5);
        probe(t, y)
    }, "clip");
}

#[test]
fn layer_norm_grad() {
    check_grads(&[mat(4, 6, 13), mat(1, 6, 14), mat(1, 6, 15)], |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2]);
        probe(t, y)
    }, "layer_norm");
}

#[test]
fn softmax_grad() {
    check_grads(&[mat(3, 5, 16)], |t, ids| {
        let y = t.softmax_rows(ids[0]);
        probe(t, y)
    }, "softmax_rows");
}

#[test]
fn log_softmax_grad() {
    check_grads(&[mat(3, 5, 17)], |t, ids| {
        let y = t.log_softmax_rows(ids[0]);
        probe(t, y)
    }, "log_softmax_rows");
}

#[test]
fn concat_slice_rows_grad() {
    check_grads(&[mat(2, 4, 18), mat(3, 4, 19)], |t, ids| {
        let y = t.concat_rows(&[ids[0], ids[1]]);
        let s = t.slice_rows(y, 1, 3);
        probe(t, s)
    }, "concat/slice rows");
}

#[test]
fn concat_slice_cols_grad() {
    check_grads(&[mat(3, 2, 20), mat(3, 4, 21)], |t, ids| {
        let y = t.concat_cols(&[ids[0], ids[1]]);
        let s = t.slice_cols(y, 1, 4);
        probe(t, s)
    }, "concat/slice cols");
}

#[test]
fn permute_rows_grad() {
    check_grads(&[mat(4, 3, 22)], |t, ids| {
        let y = t.permute_rows(ids[0], &[2, 0, 3, 1]);
        probe(t, y)
    }, "permute_rows");
}

#[test]
fn mean_reductions_grad() {
    check_grads(&[mat(4, 5, 23)], |t, ids| {
        let m = t.mean_rows(ids[0]);
        let a = t.mean_all(ids[0]);
        let p = probe(t, m);
        t.add(p, a)
    }, "mean_rows/mean_all");
}

#[test]
fn cross_entropy_grad() {
    check_grads(&[mat(4, 6, 24)], |t, ids| {
        t.cross_entropy(ids[0], &[0, 3, 5, 2])
    }, "cross_entropy");
}

#[test]
fn mse_grad() {
    check_grads(&[mat(5, 1, 25)], |t, ids| {
        t.mse_vs_const(ids[0], &[0.3, -0.2, 0.7, 0.0, -1.1])
    }, "mse_vs_const");
}

#[test]
fn scalar_with_grad_chains() {
    // L = sum(sin(2x)) recorded as an external scalar over y = 2x.
    check_grads(&[mat(3, 3, 26)], |t, ids| {
        let y = t.scale(ids[0], 2.0);
        let yv = t.value(y).to_vec();
        let value: f64 = yv.iter().map(|v| v.sin()).sum();
        let grad: Vec<f64> = yv.iter().map(|v| v.cos()).collect();
        t.scalar_with_grad(y, value, grad)
    }, "scalar_with_grad");
}

#[test]
fn composite_network_grad() {
    // Two-layer net with layer norm, gelu, softmax head and cross-entropy.
    check_grads(
        &[mat(4, 6, 27), mat(6, 8, 28), mat(1, 8, 29), mat(1, 8, 30), mat(1, 8, 31), mat(8, 4, 32)],
        |t, ids| {
            let h = t.matmul(ids[0], ids[1]);
            let h = t.add_row(h, ids[2]);
            let h = t.layer_norm(h, ids[3], ids[4]);
            let h = t.gelu(h);
            let logits = t.matmul(h, ids[5]);
            t.cross_entropy(logits, &[1, 0, 3, 2])
        },
        "composite",
    );
}

#[test]
fn frozen_leaves_get_no_grad_and_contribute_none() {
    let mut t = Tape::new();
    let a = t.leaf(&mat(3, 3, 33), true);
    let w = t.leaf(&mat(3, 3, 34), false);
    let y = t.matmul(a, w);
    let loss = t.mean_all(y);
    t.backward(loss);
    assert!(t.grad(a).is_some());
    assert!(t.grad(w).is_none());
}

#[test]
fn reused_buffer_accumulates_grad() {
    // x used twice: L = mean(x*x) + mean(x); dL/dx = 2x/n + 1/n.
    let x = mat(2, 2, 35);
    let mut t = Tape::new();
    let id = t.leaf(&x, true);
    let sq = t.mul(id, id);
    let a = t.mean_all(sq);
    let b = t.mean_all(id);
    let loss = t.add(a, b);
    t.backward(loss);
    let g = t.grad(id).unwrap();
    for (k, &gv) in g.iter().enumerate() {
        let expect = 2.0 * x.as_slice()[k] / 4.0 + 0.25;
        assert!((gv - expect).abs() < 1e-12, "elem {k}: {gv} vs {expect}");
    }
}
