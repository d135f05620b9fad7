//! Central finite-difference checks for every tape op, in f64.

use lacuna_nn::tape::randn_like;
use lacuna_nn::{Id, Scalar, Tape, Tensor};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type T = Tensor<f64>;

fn randn(shape: &[usize], seed: u64) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn_like(shape, &mut rng)
}

/// Build the graph twice per perturbed element and compare the analytic
/// input gradients against central differences.
fn fd_check(inputs: &[T], build: impl Fn(&mut Tape<f64>, &[Id]) -> Id, tol: f64) {
    let eval = |xs: &[T]| -> f64 {
        let mut tape = Tape::new(true);
        let ids: Vec<Id> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.scalar_value(root)
    };

    let mut tape = Tape::new(true);
    let ids: Vec<Id> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.raw_dim()));
        for k in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "input {i} elem {k}: fd={fd:.8e} analytic={an:.8e}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    fd_check(&[a.clone(), b.clone()], |t, ids| {
        let s = t.add(ids[0], ids[1]);
        let d = t.sub(s, ids[1]);
        let m = t.mul(d, ids[1]);
        let sc = t.scale(m, 1.7);
        let e = t.exp(sc);
        t.sum_all(e)
    }, 1e-6);
    fd_check(&[a, b], |t, ids| {
        let s = t.silu(ids[0]);
        let r = t.relu(ids[1]);
        let m = t.mul(s, r);
        let off = t.add_scalar(m, 0.3);
        t.mean_all(off)
    }, 1e-6);
}

#[test]
fn square_via_mul_same_node() {
    let a = randn(&[5], 7);
    fd_check(&[a], |t, ids| {
        let sq = t.mul(ids[0], ids[0]);
        t.sum_all(sq)
    }, 1e-7);
}

#[test]
fn linear_and_matmul() {
    let x = randn(&[4, 6], 3);
    let w = randn(&[5, 6], 4);
    let b = randn(&[5], 5);
    fd_check(&[x, w, b], |t, ids| {
        let y = t.linear(ids[0], ids[1], ids[2]);
        let y = t.silu(y);
        t.sum_all(y)
    }, 1e-6);
}

#[test]
fn bmm_and_softmax() {
    let a = randn(&[2, 3, 4], 11);
    let b = randn(&[2, 4, 3], 12);
    fd_check(&[a, b], |t, ids| {
        let y = t.bmm(ids[0], ids[1]);
        let s = t.softmax_last(y);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    }, 1e-6);
}

#[test]
fn log_softmax_nll() {
    let x = randn(&[4, 7], 13);
    fd_check(&[x], |t, ids| {
        let lp = t.log_softmax(ids[0]);
        t.nll(lp, &[0, 3, 6, 2])
    }, 1e-6);
}

#[test]
fn conv2d_stride1_pad1() {
    let x = randn(&[2, 3, 5, 5], 21);
    let w = randn(&[4, 3, 3, 3], 22);
    let b = randn(&[4], 23);
    fd_check(&[x, w, b], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
        let y = t.silu(y);
        t.sum_all(y)
    }, 1e-5);
}

#[test]
fn conv2d_stride2() {
    let x = randn(&[2, 2, 7, 7], 24);
    let w = randn(&[3, 2, 3, 3], 25);
    fd_check(&[x, w], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], None, 2, 1);
        t.sum_all(y)
    }, 1e-5);
}

#[test]
fn conv2d_1x1() {
    let x = randn(&[2, 4, 3, 3], 26);
    let w = randn(&[2, 4, 1, 1], 27);
    fd_check(&[x, w], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], None, 1, 0);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-5);
}

#[test]
fn group_norm_grad() {
    let x = randn(&[2, 6, 3, 3], 31);
    let gamma = randn(&[6], 32);
    let beta = randn(&[6], 33);
    fd_check(&[x, gamma, beta], |t, ids| {
        let y = t.group_norm(ids[0], ids[1], ids[2], 3, 1e-6);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-5);
}

#[test]
fn pooling_and_resize() {
    let x = randn(&[2, 3, 4, 4], 41);
    fd_check(&[x], |t, ids| {
        let y = t.maxpool2(ids[0]);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-6);
    let x = randn(&[1, 2, 4, 4], 42);
    fd_check(&[x], |t, ids| {
        let y = t.upsample_nearest(ids[0], 7, 7);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-6);
}

#[test]
fn shape_ops() {
    let a = randn(&[2, 3, 2, 2], 51);
    let b = randn(&[2, 2, 2, 2], 52);
    fd_check(&[a.clone(), b], |t, ids| {
        let c = t.concat_ch(ids[0], ids[1]);
        let s = t.slice_ch(c, 1, 4);
        let r = t.reshape(s, &[2, 12]);
        let sq = t.mul(r, r);
        t.sum_all(sq)
    }, 1e-6);
    fd_check(&[a], |t, ids| {
        let tok = t.tokens(ids[0]);
        let back = t.untokens(tok, 2, 2);
        let sq = t.mul(back, back);
        t.sum_all(sq)
    }, 1e-6);
}

#[test]
fn broadcast_adds() {
    let x = randn(&[2, 3, 2, 2], 61);
    let bias = randn(&[3], 62);
    let vec = randn(&[2, 3], 63);
    fd_check(&[x, bias, vec], |t, ids| {
        let y = t.add_bias_chw(ids[0], ids[1]);
        let y = t.add_chan_vec(y, ids[2]);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-6);
}

#[test]
fn dropout_scales_with_fixed_mask() {
    // with a cloned rng the mask is identical, so dropout is FD-checkable
    let x = randn(&[4, 4], 71);
    let rng = ChaCha8Rng::seed_from_u64(99);
    fd_check(&[x], |t, ids| {
        let mut r = rng.clone();
        let y = t.dropout(ids[0], 0.4, &mut r);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, 1e-6);
}

#[test]
fn dropout_eval_mode_is_identity() {
    let x = randn(&[3, 3], 72);
    let mut tape = Tape::<f64>::new(false);
    let id = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = tape.dropout(id, 0.5, &mut rng);
    assert_eq!(y, id);
    assert_eq!(tape.value(y), &x);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = randn(&[5, 9], 81);
    let mut tape = Tape::<f64>::new(false);
    let id = tape.leaf(x);
    let y = tape.softmax_last(id);
    for row in tape.value(y).rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scalar_constructors() {
    assert_eq!(f64::c(0.5), 0.5);
    assert_eq!(f32::c(0.5), 0.5f32);
    let z = Tensor::<f64>::zeros(IxDyn(&[2, 2]));
    assert_eq!(z.sum(), 0.0);
}
