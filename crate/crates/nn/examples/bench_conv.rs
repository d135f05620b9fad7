use lacuna_nn::tape::randn_like;
use lacuna_nn::{Tape, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, c, h, w, co) = (64usize, 24usize, 28usize, 28usize, 24usize);
    let x: Tensor<f32> = randn_like(&[b, c, h, w], &mut rng);
    let wt: Tensor<f32> = randn_like(&[co, c, 3, 3], &mut rng);
    let k = c * 9;
    let n = b * h * w;

    let a = Array2::<f32>::from_elem((co, k), 0.5);
    let bb = Array2::<f32>::from_elem((k, n), 0.5);
    let mut cc = Array2::<f32>::zeros((co, n));
    let t0 = Instant::now();
    for _ in 0..10 {
        ndarray::linalg::general_mat_mul(1.0, &a, &bb, 0.0, &mut cc);
    }
    let dt = t0.elapsed().as_secs_f64() / 10.0;
    println!("gemm [{}x{}x{}]: {:.1} ms, {:.1} GFLOP/s", co, k, n, dt * 1e3, 2.0 * (co * k * n) as f64 / dt / 1e9);

    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new(false);
        let xid = tape.leaf(x.clone());
        let wid = tape.leaf(wt.clone());
        let _y = tape.conv2d(xid, wid, None, 1, 1);
    }
    println!("tape conv2d fwd: {:.1} ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);

    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new(false);
        let xid = tape.leaf(x.clone());
        let wid = tape.leaf(wt.clone());
        let y = tape.conv2d(xid, wid, None, 1, 1);
        let sq = tape.mul(y, y);
        let loss = tape.sum_all(sq);
        let _ = tape.backward(loss);
    }
    println!("tape conv2d fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);

    let gamma: Tensor<f32> = randn_like(&[c], &mut rng);
    let beta: Tensor<f32> = randn_like(&[c], &mut rng);
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new(false);
        let xid = tape.leaf(x.clone());
        let gid = tape.leaf(gamma.clone());
        let bid = tape.leaf(beta.clone());
        let y = tape.group_norm(xid, gid, bid, 8, 1e-6);
        let sq = tape.mul(y, y);
        let loss = tape.sum_all(sq);
        let _ = tape.backward(loss);
    }
    println!("tape group_norm fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);

    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new(false);
        let xid = tape.leaf(x.clone());
        let y = tape.silu(xid);
        let sq = tape.mul(y, y);
        let loss = tape.sum_all(sq);
        let _ = tape.backward(loss);
    }
    println!("tape silu fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);
}
