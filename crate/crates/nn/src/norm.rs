//! Group normalization.

use crate::tape::{accumulate, dims4};
use crate::{Id, Scalar, Tape, Tensor};
use ndarray::IxDyn;

impl<F: Scalar> Tape<F> {
    /// GroupNorm over `[B,C,H,W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Id, gamma: Id, beta: Id, groups: usize, eps: f64) -> Id {
        let (nb, c, h, w) = dims4(self.value(x));
        assert!(c % groups == 0, "group_norm: C not divisible by groups");
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let cg = c / groups;
        let m = cg * h * w; // elements per (sample, group)
        let eps = F::c(eps);

        let xs = self.value(x).as_slice().unwrap();
        let gs = self.value(gamma).as_slice().unwrap();
        let bs = self.value(beta).as_slice().unwrap();

        let mut y = vec![F::zero(); xs.len()];
        // saved statistics per (b, group): mean and 1/sqrt(var+eps)
        let mut means = vec![F::zero(); nb * groups];
        let mut istds = vec![F::zero(); nb * groups];
        let inv_m = F::one() / F::c(m as f64);
        for bi in 0..nb {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * h * w;
                let seg = &xs[base..base + m];
                let mut mean = F::zero();
                for &v in seg {
                    mean += v;
                }
                mean = mean * inv_m;
                let mut var = F::zero();
                for &v in seg {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_m;
                let istd = F::one() / (var + eps).sqrt();
                means[bi * groups + gi] = mean;
                istds[bi * groups + gi] = istd;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let o = (bi * c + ch) * h * w;
                    let ga = gs[ch];
                    let be = bs[ch];
                    for k in 0..h * w {
                        y[o + k] = (xs[o + k] - mean) * istd * ga + be;
                    }
                }
            }
        }
        let y = Tensor::from_shape_vec(IxDyn(&[nb, c, h, w]), y).unwrap();
        self.push(
            y,
            Some(Box::new(move |v, g, slots| {
                let xs = v[x.0].as_slice().unwrap();
                let gam = v[gamma.0].as_slice().unwrap();
                let gout = g.as_slice().unwrap();
                let mut dx = vec![F::zero(); xs.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let inv_m = F::one() / F::c(m as f64);
                for bi in 0..nb {
                    for gi in 0..groups {
                        let mean = means[bi * groups + gi];
                        let istd = istds[bi * groups + gi];
                        // first pass: sums of dxhat and dxhat*xhat over the group
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let o = (bi * c + ch) * h * w;
                            let ga = gam[ch];
                            for k in 0..h * w {
                                let xhat = (xs[o + k] - mean) * istd;
                                let dxhat = gout[o + k] * ga;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                                dgamma[ch] += gout[o + k] * xhat;
                                dbeta[ch] += gout[o + k];
                            }
                        }
                        // second pass: dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mean_dxhat = sum_dxhat * inv_m;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_m;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let o = (bi * c + ch) * h * w;
                            let ga = gam[ch];
                            for k in 0..h * w {
                                let xhat = (xs[o + k] - mean) * istd;
                                let dxhat = gout[o + k] * ga;
                                dx[o + k] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                accumulate(
                    &mut slots[x.0],
                    Tensor::from_shape_vec(v[x.0].raw_dim(), dx).unwrap(),
                );
                accumulate(
                    &mut slots[gamma.0],
                    Tensor::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                );
                accumulate(
                    &mut slots[beta.0],
                    Tensor::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                );
            })),
        )
    }
}
