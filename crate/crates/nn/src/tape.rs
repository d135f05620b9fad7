//! The tape: a flat computation graph with per-node backward closures.

use crate::{ParamId, ParamSet, Scalar, Tensor};
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(pub usize);

/// Backward closure: (all node values, incoming grad, grad slots).
pub type BackFn<F> = Box<dyn Fn(&[Tensor<F>], &Tensor<F>, &mut [Option<Tensor<F>>])>;

pub struct Tape<F: Scalar> {
    vals: Vec<Tensor<F>>,
    backs: Vec<Option<BackFn<F>>>,
    param_leaves: Vec<(ParamId, Id)>,
    /// Dropout and other stochastic ops are only active when true.
    pub train: bool,
    /// When false, expensive ops skip parameter gradients in backward
    /// (used by guidance, which only needs input gradients).
    pub param_grads: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads<F: Scalar> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: Id) -> Option<&Tensor<F>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: Id) -> Option<Tensor<F>> {
        self.slots[id.0].take()
    }
}

/// All node values and gradients are kept in standard (C-contiguous) layout
/// so ops can work on raw slices.
pub(crate) fn standardize<F: Scalar>(t: Tensor<F>) -> Tensor<F> {
    if t.as_slice().is_some() {
        t
    } else {
        t.as_standard_layout().to_owned()
    }
}

pub(crate) fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        None => *slot = Some(standardize(g)),
        Some(s) => *s += &g,
    }
}

/// Accumulate from a borrowed gradient, cloning only when the slot is empty.
pub(crate) fn accumulate_ref<F: Scalar>(slot: &mut Option<Tensor<F>>, g: &Tensor<F>) {
    match slot {
        None => *slot = Some(standardize(g.clone())),
        Some(s) => *s += g,
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new(train: bool) -> Self {
        Self { vals: Vec::new(), backs: Vec::new(), param_leaves: Vec::new(), train, param_grads: true }
    }

    /// Tape for input-gradient-only backward passes.
    pub fn new_inference_grads() -> Self {
        let mut t = Self::new(false);
        t.param_grads = false;
        t
    }

    pub(crate) fn push(&mut self, val: Tensor<F>, back: Option<BackFn<F>>) -> Id {
        self.vals.push(standardize(val));
        self.backs.push(back);
        Id(self.vals.len() - 1)
    }

    /// Leaf holding a constant or an input. Gradients still flow into it and
    /// can be read back after [`Tape::backward`].
    pub fn leaf(&mut self, val: Tensor<F>) -> Id {
        self.push(val, None)
    }

    /// Register a parameter as a leaf for this pass.
    pub fn param(&mut self, set: &ParamSet<F>, pid: ParamId) -> Id {
        let id = self.push(set.value(pid).clone(), None);
        self.param_leaves.push((pid, id));
        id
    }

    pub fn value(&self, id: Id) -> &Tensor<F> {
        &self.vals[id.0]
    }

    pub fn scalar_value(&self, id: Id) -> F {
        let v = &self.vals[id.0];
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// reached; parameter gradients can be collected with [`Tape::param_grads`].
    pub fn backward(&self, root: Id) -> Grads<F> {
        assert_eq!(self.vals[root.0].len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<Tensor<F>>> = vec![None; self.vals.len()];
        slots[root.0] = Some(Tensor::from_elem(self.vals[root.0].raw_dim(), F::one()));
        for id in (0..=root.0).rev() {
            if slots[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                // interior grads are consumed by moving them out; only leaf
                // gradients remain readable afterwards, which is all callers
                // need (params and inputs are leaves)
                let g = slots[id].take().unwrap();
                back(&self.vals, &g, &mut slots);
            }
        }
        Grads { slots }
    }

    /// Collect parameter gradients keyed by `ParamId`, summing if a parameter
    /// was registered on the tape more than once.
    pub fn param_grads(&self, grads: &mut Grads<F>, set: &ParamSet<F>) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..set.len()).map(|_| None).collect();
        for &(pid, id) in &self.param_leaves {
            if let Some(g) = grads.take(id) {
                accumulate(&mut out[pid.0], g);
            }
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "add: shape mismatch");
        let y = &self.vals[a.0] + &self.vals[b.0];
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate_ref(&mut slots[a.0], g);
                accumulate_ref(&mut slots[b.0], g);
            })),
        )
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "sub: shape mismatch");
        let y = &self.vals[a.0] - &self.vals[b.0];
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate_ref(&mut slots[a.0], g);
                accumulate(&mut slots[b.0], g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "mul: shape mismatch");
        let y = &self.vals[a.0] * &self.vals[b.0];
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                accumulate(&mut slots[a.0], g * &v[b.0]);
                accumulate(&mut slots[b.0], g * &v[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Id, c: F) -> Id {
        let y = &self.vals[a.0] * c;
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate(&mut slots[a.0], g * c);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Id, c: F) -> Id {
        let y = &self.vals[a.0] + c;
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate_ref(&mut slots[a.0], g);
            })),
        )
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let y = self.vals[a.0].mapv(F::exp);
        self.push(
            y,
            Some(Box::new(move |v: &[Tensor<F>], g: &Tensor<F>, slots: &mut [Option<Tensor<F>>]| {
                // y is at the node after a's descendants; recompute from input
                accumulate(&mut slots[a.0], g * &v[a.0].mapv(F::exp));
            })),
        )
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let sig = |x: F| F::one() / (F::one() + (-x).exp());
        let y = self.vals[a.0].mapv(|x| x * sig(x));
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let d = v[a.0].mapv(|x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    s * (F::one() + x * (F::one() - s))
                });
                accumulate(&mut slots[a.0], g * &d);
            })),
        )
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let y = self.vals[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let d = v[a.0].mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                accumulate(&mut slots[a.0], g * &d);
            })),
        )
    }

    /// Inverted dropout; identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Id, p: f64, rng: &mut ChaCha8Rng) -> Id {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = F::c(1.0 - p);
        let inv = F::one() / keep;
        let mask: Tensor<F> = self.vals[a.0]
            .mapv(|_| if rng.random::<f64>() < p { F::zero() } else { inv });
        let y = &self.vals[a.0] * &mask;
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate(&mut slots[a.0], g * &mask);
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let n: usize = shape.iter().product();
        assert_eq!(self.vals[a.0].len(), n, "reshape: element count mismatch");
        let y = reshape_copy(&self.vals[a.0], shape);
        let in_shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate(&mut slots[a.0], reshape_copy(g, &in_shape));
            })),
        )
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_ch(&mut self, a: Id, b: Id) -> Id {
        let y = ndarray::concatenate(Axis(1), &[self.vals[a.0].view(), self.vals[b.0].view()])
            .expect("concat_ch: incompatible shapes");
        let ca = self.vals[a.0].shape()[1];
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let cb = v[b.0].shape()[1];
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..ca + cb)).to_owned();
                accumulate(&mut slots[a.0], ga);
                accumulate(&mut slots[b.0], gb);
            })),
        )
    }

    /// Slice channels `[from, to)` along axis 1.
    pub fn slice_ch(&mut self, a: Id, from: usize, to: usize) -> Id {
        let y = self.vals[a.0].slice_axis(Axis(1), ndarray::Slice::from(from..to)).to_owned();
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let mut full = Tensor::zeros(v[a.0].raw_dim());
                full.slice_axis_mut(Axis(1), ndarray::Slice::from(from..to)).assign(g);
                accumulate(&mut slots[a.0], full);
            })),
        )
    }

    /// `[B,C,H,W] -> [B, H*W, C]` token layout for attention.
    pub fn tokens(&mut self, a: Id) -> Id {
        let v = &self.vals[a.0];
        let (b, c, h, w) = dims4(v);
        let perm = v.view().permuted_axes(IxDyn(&[0, 2, 3, 1]));
        let y = reshape_copy(&perm.to_owned(), &[b, h * w, c]);
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                let g4 = reshape_copy(g, &[b, h, w, c]);
                let gp = g4.view().permuted_axes(IxDyn(&[0, 3, 1, 2])).to_owned();
                accumulate(&mut slots[a.0], gp.as_standard_layout().to_owned());
            })),
        )
    }

    /// `[B, H*W, C] -> [B,C,H,W]`.
    pub fn untokens(&mut self, a: Id, h: usize, w: usize) -> Id {
        let v = &self.vals[a.0];
        let (b, t, c) = dims3(v);
        assert_eq!(t, h * w, "untokens: token count mismatch");
        let g4 = reshape_copy(v, &[b, h, w, c]);
        let y = g4.view().permuted_axes(IxDyn(&[0, 3, 1, 2])).as_standard_layout().to_owned();
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                let gp = g.view().permuted_axes(IxDyn(&[0, 2, 3, 1])).as_standard_layout().to_owned();
                accumulate(&mut slots[a.0], reshape_copy(&gp, &[b, h * w, c]));
            })),
        )
    }

    // ---- broadcast adds ----

    /// Add a per-channel bias `[C]` to `[B,C,H,W]`.
    pub fn add_bias_chw(&mut self, x: Id, b: Id) -> Id {
        let (_, c, _, _) = dims4(&self.vals[x.0]);
        assert_eq!(self.vals[b.0].len(), c, "add_bias_chw: bias length");
        let bias = self.vals[b.0].clone();
        let mut y = self.vals[x.0].clone();
        {
            let bs = bias.as_slice().unwrap();
            let (nb, _, h, w) = dims4(&y);
            let ys = y.as_slice_mut().unwrap();
            let hw = h * w;
            for bi in 0..nb {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let add = bs[ci];
                    for v in &mut ys[base..base + hw] {
                        *v += add;
                    }
                }
            }
        }
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate_ref(&mut slots[x.0], g);
                let (nb, c, h, w) = dims4(g);
                let gs = g.as_slice().unwrap();
                let hw = h * w;
                let mut db = vec![F::zero(); c];
                for bi in 0..nb {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let mut s = F::zero();
                        for &v in &gs[base..base + hw] {
                            s += v;
                        }
                        db[ci] += s;
                    }
                }
                accumulate(&mut slots[b.0], Tensor::from_shape_vec(IxDyn(&[c]), db).unwrap());
            })),
        )
    }

    /// Add a per-sample, per-channel vector `[B,C]` to `[B,C,H,W]`
    /// (time-embedding injection).
    pub fn add_chan_vec(&mut self, x: Id, v: Id) -> Id {
        let (nb, c, h, w) = dims4(&self.vals[x.0]);
        assert_eq!(self.vals[v.0].shape(), &[nb, c], "add_chan_vec: vec shape");
        let mut y = self.vals[x.0].clone();
        {
            let vs = self.vals[v.0].as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let hw = h * w;
            for bi in 0..nb {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let add = vs[bi * c + ci];
                    for t in &mut ys[base..base + hw] {
                        *t += add;
                    }
                }
            }
        }
        self.push(
            y,
            Some(Box::new(move |_vv, g, slots| {
                accumulate_ref(&mut slots[x.0], g);
                let gs = g.as_slice().unwrap();
                let hw = h * w;
                let mut dv = vec![F::zero(); nb * c];
                for bi in 0..nb {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let mut s = F::zero();
                        for &t in &gs[base..base + hw] {
                            s += t;
                        }
                        dv[bi * c + ci] = s;
                    }
                }
                accumulate(&mut slots[v.0], Tensor::from_shape_vec(IxDyn(&[nb, c]), dv).unwrap());
            })),
        )
    }

    /// Add a row vector `[O]` to `[B,O]` (linear-layer bias).
    pub fn add_row(&mut self, x: Id, b: Id) -> Id {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(self.vals[b.0].len(), xs[1], "add_row: bias length");
        let bv = self.vals[b.0].clone();
        let y = &self.vals[x.0]
            + &bv.view().into_shape_with_order(IxDyn(&[1, xs[1]])).unwrap();
        self.push(
            y,
            Some(Box::new(move |_v, g, slots| {
                accumulate_ref(&mut slots[x.0], g);
                let db = g.sum_axis(Axis(0));
                accumulate(&mut slots[b.0], db.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    /// `x [B,D] . w^T [D,O] -> [B,O]` with weights stored `[O,D]`.
    pub fn linear_nobias(&mut self, x: Id, w: Id) -> Id {
        let xv = as2(&self.vals[x.0]);
        let wv = as2(&self.vals[w.0]);
        assert_eq!(xv.shape()[1], wv.shape()[1], "linear: in-features mismatch");
        let mut y = Array2::<F>::zeros((xv.shape()[0], wv.shape()[0]));
        ndarray::linalg::general_mat_mul(F::one(), &xv, &wv.t(), F::zero(), &mut y);
        let wants_dw = self.param_grads;
        self.push(
            y.into_dyn(),
            Some(Box::new(move |v, g, slots| {
                let g2 = as2(g);
                let xv = as2(&v[x.0]);
                let wv = as2(&v[w.0]);
                let mut dx = Array2::<F>::zeros(xv.raw_dim());
                ndarray::linalg::general_mat_mul(F::one(), &g2, &wv, F::zero(), &mut dx);
                accumulate(&mut slots[x.0], dx.into_dyn());
                if wants_dw {
                    let mut dw = Array2::<F>::zeros(wv.raw_dim());
                    ndarray::linalg::general_mat_mul(F::one(), &g2.t(), &xv, F::zero(), &mut dw);
                    accumulate(&mut slots[w.0], dw.into_dyn());
                }
            })),
        )
    }

    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let y = self.linear_nobias(x, w);
        self.add_row(y, b)
    }

    /// Batched matmul `[B,m,k] . [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Id, b: Id) -> Id {
        let (nb, m, k) = dims3(&self.vals[a.0]);
        let (nb2, k2, n) = dims3(&self.vals[b.0]);
        assert_eq!(nb, nb2, "bmm: batch mismatch");
        assert_eq!(k, k2, "bmm: inner dim mismatch");
        let mut y = Tensor::zeros(IxDyn(&[nb, m, n]));
        for i in 0..nb {
            let av = slice2(&self.vals[a.0], i, m, k);
            let bv = slice2(&self.vals[b.0], i, k, n);
            let mut yv = slice2_mut(&mut y, i, m, n);
            ndarray::linalg::general_mat_mul(F::one(), &av, &bv, F::zero(), &mut yv);
        }
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let mut da = Tensor::zeros(v[a.0].raw_dim());
                let mut db = Tensor::zeros(v[b.0].raw_dim());
                for i in 0..nb {
                    let gv = slice2(g, i, m, n);
                    let av = slice2(&v[a.0], i, m, k);
                    let bv = slice2(&v[b.0], i, k, n);
                    let mut dav = slice2_mut(&mut da, i, m, k);
                    ndarray::linalg::general_mat_mul(F::one(), &gv, &bv.t(), F::zero(), &mut dav);
                    let mut dbv = slice2_mut(&mut db, i, k, n);
                    ndarray::linalg::general_mat_mul(F::one(), &av.t(), &gv, F::zero(), &mut dbv);
                }
                accumulate(&mut slots[a.0], da);
                accumulate(&mut slots[b.0], db);
            })),
        )
    }

    // ---- softmax family ----

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Id) -> Id {
        let shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        let k = *shape.last().expect("softmax: rank 0");
        let rows = self.vals[a.0].len() / k;
        let mut y = self.vals[a.0].clone();
        {
            let ys = y.as_slice_mut().unwrap();
            for r in 0..rows {
                softmax_row(&mut ys[r * k..(r + 1) * k]);
            }
        }
        let me = self.push(
            y,
            Some(Box::new(move |_v, _g, _slots| {})),
        );
        // replace placeholder backward with one that can read the output value
        let out_id = me;
        self.backs[me.0] = Some(Box::new(move |v, g, slots| {
            let ys = v[out_id.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![F::zero(); ys.len()];
            for r in 0..rows {
                let o = r * k;
                let mut dot = F::zero();
                for i in 0..k {
                    dot += gs[o + i] * ys[o + i];
                }
                for i in 0..k {
                    dx[o + i] = ys[o + i] * (gs[o + i] - dot);
                }
            }
            accumulate(
                &mut slots[a.0],
                Tensor::from_shape_vec(v[a.0].raw_dim(), dx).unwrap(),
            );
        }));
        me
    }

    /// Log-softmax over the last axis of a `[B,K]` tensor.
    pub fn log_softmax(&mut self, a: Id) -> Id {
        let shape = self.vals[a.0].shape().to_vec();
        assert_eq!(shape.len(), 2, "log_softmax expects [B,K]");
        let (b, k) = (shape[0], shape[1]);
        let mut y = self.vals[a.0].clone();
        {
            let ys = y.as_slice_mut().unwrap();
            for r in 0..b {
                let row = &mut ys[r * k..(r + 1) * k];
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut lse = F::zero();
                for v in row.iter() {
                    lse += (*v - mx).exp();
                }
                let lse = mx + lse.ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
        }
        let me = self.push(y, None);
        let out_id = me;
        self.backs[me.0] = Some(Box::new(move |v, g, slots| {
            let ys = v[out_id.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![F::zero(); ys.len()];
            for r in 0..b {
                let o = r * k;
                let mut gsum = F::zero();
                for i in 0..k {
                    gsum += gs[o + i];
                }
                for i in 0..k {
                    dx[o + i] = gs[o + i] - ys[o + i].exp() * gsum;
                }
            }
            accumulate(
                &mut slots[a.0],
                Tensor::from_shape_vec(v[a.0].raw_dim(), dx).unwrap(),
            );
        }));
        me
    }

    /// Negative log-likelihood of integer labels under `[B,K]` log-probs.
    pub fn nll(&mut self, logp: Id, labels: &[usize]) -> Id {
        let shape = self.vals[logp.0].shape().to_vec();
        assert_eq!(shape.len(), 2);
        let (b, k) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b, "nll: label count");
        let ls = self.vals[logp.0].as_slice().unwrap();
        let mut loss = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            loss -= ls[r * k + y];
        }
        loss = loss / F::c(b as f64);
        let labels: Vec<usize> = labels.to_vec();
        self.push(
            Tensor::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |v, g, slots| {
                let gv = *g.iter().next().unwrap();
                let mut dx = Tensor::zeros(v[logp.0].raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let scale = gv / F::c(b as f64);
                    for (r, &y) in labels.iter().enumerate() {
                        ds[r * k + y] = -scale;
                    }
                }
                accumulate(&mut slots[logp.0], dx);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s = self.vals[a.0].sum();
        self.push(
            Tensor::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |v, g, slots| {
                let gv = *g.iter().next().unwrap();
                accumulate(&mut slots[a.0], Tensor::from_elem(v[a.0].raw_dim(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.vals[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::c(n as f64))
    }
}

// ---- small helpers ----

pub(crate) fn dims4<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn dims3<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

pub(crate) fn as2<F: Scalar>(t: &Tensor<F>) -> ArrayView2<'_, F> {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {:?}", s);
    t.view().into_dimensionality().unwrap()
}

fn slice2<F: Scalar>(t: &Tensor<F>, i: usize, r: usize, c: usize) -> ArrayView2<'_, F> {
    let flat = t.as_slice().unwrap();
    ArrayView2::from_shape((r, c), &flat[i * r * c..(i + 1) * r * c]).unwrap()
}

fn slice2_mut<F: Scalar>(t: &mut Tensor<F>, i: usize, r: usize, c: usize) -> ArrayViewMut2<'_, F> {
    let flat = t.as_slice_mut().unwrap();
    ArrayViewMut2::from_shape((r, c), &mut flat[i * r * c..(i + 1) * r * c]).unwrap()
}

pub(crate) fn reshape_copy<F: Scalar>(t: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let std = t.as_standard_layout();
    Tensor::from_shape_vec(IxDyn(shape), std.iter().copied().collect()).unwrap()
}

fn softmax_row<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Deterministic standard-normal tensor from a seeded stream.
pub fn randn_like<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::randn(rng)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform draw helper used by training loops.
pub fn uniform<F: Scalar>(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> F {
    F::c(lo + (hi - lo) * rng.random::<f64>())
}
