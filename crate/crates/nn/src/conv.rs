//! 2-D convolution, pooling, and nearest-neighbour resize.
//!
//! Convolutions run as batched im2col + one GEMM per layer; the column
//! buffer lives in `[K, B*OH*OW]` layout so both the unpack writes and the
//! GEMM stream sequentially. The buffer is recomputed in the backward pass
//! instead of being kept alive, trading a little compute for a flat memory
//! profile.

use crate::tape::{accumulate, dims4};
use crate::{Id, Scalar, Tape, Tensor};
use ndarray::{Array2, ArrayView2, IxDyn};

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Copy one (padded, possibly strided) input row into a column-row segment.
#[inline]
fn gather_row<F: Scalar>(
    src_row: Option<&[F]>,
    dst: &mut [F],
    kj: usize,
    stride: usize,
    pad: usize,
    w: usize,
) {
    let Some(src) = src_row else {
        dst.fill(F::zero());
        return;
    };
    if stride == 1 {
        let iw0 = kj as isize - pad as isize;
        // left padding
        let lead = (-iw0).max(0) as usize;
        let ow = dst.len();
        dst[..lead.min(ow)].fill(F::zero());
        // contiguous valid span
        let start = (iw0 + lead as isize) as usize;
        let valid = (w.saturating_sub(start)).min(ow - lead.min(ow));
        if valid > 0 {
            dst[lead..lead + valid].copy_from_slice(&src[start..start + valid]);
        }
        // right padding
        dst[(lead + valid).min(ow)..].fill(F::zero());
    } else {
        for (oj, d) in dst.iter_mut().enumerate() {
            let iw = (oj * stride + kj) as isize - pad as isize;
            *d = if iw < 0 || iw >= w as isize { F::zero() } else { src[iw as usize] };
        }
    }
}

/// Unpack a batch into columns; `cs` is a `[K, row_stride]` buffer of which
/// the first `b*OH*OW` entries of each row are written.
#[allow(clippy::too_many_arguments)]
fn im2col_batch<F: Scalar>(
    x: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cs: &mut [F],
    row_stride: usize,
) {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let dst_row = &mut cs[r * row_stride..r * row_stride + b * oh * ow];
                for bi in 0..b {
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        let src = (ih >= 0 && ih < h as isize)
                            .then(|| &x[((bi * c + ci) * h + ih as usize) * w..][..w]);
                        let dst = &mut dst_row[(bi * oh + oi) * ow..(bi * oh + oi + 1) * ow];
                        gather_row(src, dst, kj, stride, pad, w);
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto the batch (transpose of [`im2col_batch`]).
#[allow(clippy::too_many_arguments)]
#[allow(clippy::too_many_arguments)]
fn col2im_batch<F: Scalar>(
    cs: &[F],
    row_stride: usize,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [F],
) {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let src_row = &cs[r * row_stride..r * row_stride + b * oh * ow];
                for bi in 0..b {
                    for oi in 0..oh {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &src_row[(bi * oh + oi) * ow..(bi * oh + oi + 1) * ow];
                        let drow = &mut dx[((bi * c + ci) * h + ih as usize) * w..][..w];
                        if stride == 1 {
                            let iw0 = kj as isize - pad as isize;
                            for (oj, s) in src.iter().enumerate() {
                                let iw = iw0 + oj as isize;
                                if iw >= 0 && iw < w as isize {
                                    drow[iw as usize] += *s;
                                }
                            }
                        } else {
                            for (oj, s) in src.iter().enumerate() {
                                let iw = (oj * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    drow[iw as usize] += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[Cout, B*OH*OW] -> [B, Cout, OH*OW]` block shuffle (and its inverse).
fn mat_to_bchw<F: Scalar>(
    ys: &[F],
    row_stride: usize,
    b: usize,
    cout: usize,
    hw: usize,
    out: &mut [F],
) {
    for co in 0..cout {
        let row = &ys[co * row_stride..co * row_stride + b * hw];
        for bi in 0..b {
            out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]
                .copy_from_slice(&row[bi * hw..(bi + 1) * hw]);
        }
    }
}

fn bchw_to_mat<F: Scalar>(
    g: &[F],
    b: usize,
    cout: usize,
    hw: usize,
    ms: &mut [F],
    row_stride: usize,
) {
    for co in 0..cout {
        let row = &mut ms[co * row_stride..co * row_stride + b * hw];
        for bi in 0..b {
            row[bi * hw..(bi + 1) * hw]
                .copy_from_slice(&g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]);
        }
    }
}

/// Images per im2col chunk: keeps the column buffer cache-resident while the
/// GEMM still sees wide panels.
fn chunk_images(k: usize, ohow: usize) -> usize {
    const TARGET_BYTES: usize = 3 << 20;
    (TARGET_BYTES / (k * ohow * std::mem::size_of::<f64>())).max(1)
}

fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (nb, cin, h, wd) = dims4(x);
    let (cout, cin2, kh, kw) = dims4(w);
    assert_eq!(cin, cin2, "conv2d: channel mismatch");
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(wd, kw, stride, pad);
    let k = cin * kh * kw;
    let w_mat = ArrayView2::from_shape((cout, k), w.as_slice().unwrap()).unwrap();
    let xs = x.as_slice().unwrap();
    let mut y = Tensor::zeros(IxDyn(&[nb, cout, oh, ow]));
    let ys = y.as_slice_mut().unwrap();
    let chunk = chunk_images(k, oh * ow);
    let row_stride = chunk * oh * ow;
    let mut cols = Array2::<F>::zeros((k, row_stride));
    let mut y_mat = Array2::<F>::zeros((cout, row_stride));
    for start in (0..nb).step_by(chunk) {
        let bn = chunk.min(nb - start);
        im2col_batch(
            &xs[start * cin * h * wd..(start + bn) * cin * h * wd],
            bn, cin, h, wd, kh, kw, stride, pad,
            cols.as_slice_mut().unwrap(), row_stride,
        );
        let cview = cols.slice(ndarray::s![.., ..bn * oh * ow]);
        let mut yview = y_mat.slice_mut(ndarray::s![.., ..bn * oh * ow]);
        ndarray::linalg::general_mat_mul(F::one(), &w_mat, &cview, F::zero(), &mut yview);
        mat_to_bchw(
            y_mat.as_slice().unwrap(),
            row_stride,
            bn,
            cout,
            oh * ow,
            &mut ys[start * cout * oh * ow..(start + bn) * cout * oh * ow],
        );
    }
    y
}

impl<F: Scalar> Tape<F> {
    /// `x [B,Cin,H,W] * w [Cout,Cin,kh,kw] (+ bias [Cout]) -> [B,Cout,OH,OW]`.
    pub fn conv2d(&mut self, x: Id, w: Id, b: Option<Id>, stride: usize, pad: usize) -> Id {
        let y = conv2d_forward(self.value(x), self.value(w), stride, pad);
        let id = self.push_conv_node(x, w, y, stride, pad);
        match b {
            Some(b) => self.add_bias_chw(id, b),
            None => id,
        }
    }

    fn push_conv_node(&mut self, x: Id, w: Id, y: Tensor<F>, stride: usize, pad: usize) -> Id {
        let wants_dw = self.param_grads;
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let (nb, cin, h, wd) = dims4(&v[x.0]);
                let (cout, _, kh, kw) = dims4(&v[w.0]);
                let oh = conv_out(h, kh, stride, pad);
                let ow = conv_out(wd, kw, stride, pad);
                let k = cin * kh * kw;
                let w_mat =
                    ArrayView2::from_shape((cout, k), v[w.0].as_slice().unwrap()).unwrap();
                let xs = v[x.0].as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dw = Array2::<F>::zeros((cout, k));
                let mut dx = Tensor::zeros(v[x.0].raw_dim());
                let dxs = dx.as_slice_mut().unwrap();
                let chunk = chunk_images(k, oh * ow);
                let row_stride = chunk * oh * ow;
                let mut cols = Array2::<F>::zeros((k, row_stride));
                let mut dy_mat = Array2::<F>::zeros((cout, row_stride));
                for start in (0..nb).step_by(chunk) {
                    let bn = chunk.min(nb - start);
                    bchw_to_mat(
                        &gs[start * cout * oh * ow..(start + bn) * cout * oh * ow],
                        bn, cout, oh * ow,
                        dy_mat.as_slice_mut().unwrap(), row_stride,
                    );
                    if wants_dw {
                        // dW += dy . cols^T (cols recomputed per chunk)
                        im2col_batch(
                            &xs[start * cin * h * wd..(start + bn) * cin * h * wd],
                            bn, cin, h, wd, kh, kw, stride, pad,
                            cols.as_slice_mut().unwrap(), row_stride,
                        );
                        let yview = dy_mat.slice(ndarray::s![.., ..bn * oh * ow]);
                        let cview = cols.slice(ndarray::s![.., ..bn * oh * ow]);
                        ndarray::linalg::general_mat_mul(F::one(), &yview, &cview.t(), F::one(), &mut dw);
                    }
                    // dx = col2im(W^T . dy), reusing the cols buffer
                    {
                        let yview = dy_mat.slice(ndarray::s![.., ..bn * oh * ow]);
                        let mut cview = cols.slice_mut(ndarray::s![.., ..bn * oh * ow]);
                        ndarray::linalg::general_mat_mul(F::one(), &w_mat.t(), &yview, F::zero(), &mut cview);
                    }
                    col2im_batch(
                        cols.as_slice().unwrap(), row_stride,
                        bn, cin, h, wd, kh, kw, stride, pad,
                        &mut dxs[start * cin * h * wd..(start + bn) * cin * h * wd],
                    );
                }
                accumulate(&mut slots[x.0], dx);
                if wants_dw {
                    let dw = dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap();
                    accumulate(&mut slots[w.0], dw);
                }
            })),
        )
    }

    /// 2x2 max pooling with stride 2. H and W must be even.
    pub fn maxpool2(&mut self, x: Id) -> Id {
        let (nb, c, h, w) = dims4(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).as_slice().unwrap();
        let mut y = vec![F::zero(); nb * c * oh * ow];
        let mut arg = vec![0usize; nb * c * oh * ow];
        for bc in 0..nb * c {
            let base = bc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = base + (2 * oi) * w + 2 * oj;
                    let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if xs[cand] > xs[best] {
                            best = cand;
                        }
                    }
                    let o = bc * oh * ow + oi * ow + oj;
                    y[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        let y = Tensor::from_shape_vec(IxDyn(&[nb, c, oh, ow]), y).unwrap();
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let mut dx = Tensor::zeros(v[x.0].raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for (o, &src) in arg.iter().enumerate() {
                        ds[src] += gs[o];
                    }
                }
                accumulate(&mut slots[x.0], dx);
            })),
        )
    }

    /// Nearest-neighbour resize to `(oh, ow)`; source index = floor(i*in/out).
    pub fn upsample_nearest(&mut self, x: Id, oh: usize, ow: usize) -> Id {
        let (nb, c, h, w) = dims4(self.value(x));
        let xs = self.value(x).as_slice().unwrap();
        let row_map: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
        let col_map: Vec<usize> = (0..ow).map(|j| j * w / ow).collect();
        let mut y = vec![F::zero(); nb * c * oh * ow];
        for bc in 0..nb * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for oi in 0..oh {
                let ih = row_map[oi];
                for oj in 0..ow {
                    y[obase + oi * ow + oj] = xs[ibase + ih * w + col_map[oj]];
                }
            }
        }
        let y = Tensor::from_shape_vec(IxDyn(&[nb, c, oh, ow]), y).unwrap();
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let (nb, c, h, w) = dims4(&v[x.0]);
                let gs = g.as_slice().unwrap();
                let mut dx = Tensor::zeros(v[x.0].raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for bc in 0..nb * c {
                        let ibase = bc * h * w;
                        let obase = bc * oh * ow;
                        for oi in 0..oh {
                            let ih = oi * h / oh;
                            for oj in 0..ow {
                                ds[ibase + ih * w + oj * w / ow] += gs[obase + oi * ow + oj];
                            }
                        }
                    }
                }
                accumulate(&mut slots[x.0], dx);
            })),
        )
    }
}
