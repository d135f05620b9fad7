//! KL-regularized convolutional VAE trained on incomplete data with an
//! observed-only reconstruction loss, plus latent standardization for
//! diffusion.

use crate::ckpt::{CheckpointMeta, CKPT_FORMAT_VERSION};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::net::{Conv, GroupNorm, ResBlock};
use crate::score::{select_rows, TrainConfig};
use lacuna_nn::tape::randn_like;
use lacuna_nn::{Adam, Id, ParamSet, Scalar, Tape, Tensor};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VaeConfig {
    pub channel_multipliers: Vec<usize>,
    pub latent_channels: usize,
    pub latent_spatial: usize,
    pub beta_kl: f64,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub norm_groups: usize,
    /// Concatenate the mask as an extra encoder input channel (default off;
    /// the encoder sees only the zero-imputed image).
    pub mask_concat: bool,
    /// Train diffusion on reparameterized samples rather than encoder means.
    pub sample_latents: bool,
    pub input_spatial: usize,
    pub input_channels: usize,
}

impl VaeConfig {
    pub fn paper() -> Self {
        Self {
            channel_multipliers: vec![1, 2, 4],
            latent_channels: 2,
            latent_spatial: 7,
            beta_kl: 1e-6,
            base_channels: 32,
            blocks_per_level: 2,
            norm_groups: 16,
            mask_concat: false,
            sample_latents: true,
            input_spatial: 28,
            input_channels: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            blocks_per_level: 1,
            norm_groups: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 {
            return Err(Error::Checkpoint("channel_multipliers must be nonempty".into()));
        }
        let reduced = self.input_spatial >> (levels - 1);
        if reduced != self.latent_spatial {
            return Err(Error::Checkpoint(format!(
                "input {} with {} levels gives latent {}, config says {}",
                self.input_spatial, levels, reduced, self.latent_spatial
            )));
        }
        let latent_dim = self.latent_channels * self.latent_spatial * self.latent_spatial;
        let input_dim = self.input_channels * self.input_spatial * self.input_spatial;
        if latent_dim >= input_dim {
            return Err(Error::Checkpoint(format!(
                "latent dim {latent_dim} must be smaller than input dim {input_dim}"
            )));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Checkpoint("beta_kl must be >= 0".into()));
        }
        Ok(())
    }
}

struct Encoder {
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Option<Conv>)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

struct Decoder {
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Option<(Conv, usize)>)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

/// Convolutional beta-VAE; encoder outputs diagonal-Gaussian (mu, logvar).
pub struct Vae<F: Scalar> {
    pub config: VaeConfig,
    pub params: ParamSet<F>,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    pub latent_scale: Option<f64>,
    enc: Encoder,
    dec: Decoder,
}

fn group_fallback(ch: usize, groups: usize) -> usize {
    let mut g = groups.min(ch);
    while ch % g != 0 {
        g -= 1;
    }
    g
}

impl<F: Scalar> Vae<F> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let base = c.base_channels;
        let nl = c.channel_multipliers.len();
        let in_ch = c.input_channels + if c.mask_concat { 1 } else { 0 };

        let conv_in = Conv::new(&mut params, "enc.conv_in", in_ch, base, 3, 1, false, &mut rng);
        let mut levels = Vec::new();
        let mut ch = base;
        for (i, &m) in c.channel_multipliers.iter().enumerate() {
            let out_ch = base * m;
            let mut blocks = Vec::new();
            for bi in 0..c.blocks_per_level {
                blocks.push(ResBlock::new(
                    &mut params,
                    &format!("enc.l{i}.b{bi}"),
                    ch,
                    out_ch,
                    None,
                    c.norm_groups,
                    0.0,
                    1.0,
                    &mut rng,
                ));
                ch = out_ch;
            }
            let down = (i + 1 < nl)
                .then(|| Conv::new(&mut params, &format!("enc.l{i}.down"), ch, ch, 3, 2, false, &mut rng));
            levels.push((blocks, down));
        }
        let enc = Encoder {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut params, "enc.norm_out", ch, group_fallback(ch, c.norm_groups)),
            conv_out: Conv::new(
                &mut params,
                "enc.conv_out",
                ch,
                2 * c.latent_channels,
                3,
                1,
                false,
                &mut rng,
            ),
        };

        let top_ch = base * c.channel_multipliers[nl - 1];
        let conv_in = Conv::new(&mut params, "dec.conv_in", c.latent_channels, top_ch, 3, 1, false, &mut rng);
        let mut levels = Vec::new();
        let mut ch = top_ch;
        let mut spatial = c.latent_spatial;
        for (i, &m) in c.channel_multipliers.iter().enumerate().rev() {
            let out_ch = base * m;
            let mut blocks = Vec::new();
            for bi in 0..c.blocks_per_level {
                blocks.push(ResBlock::new(
                    &mut params,
                    &format!("dec.l{i}.b{bi}"),
                    ch,
                    out_ch,
                    None,
                    c.norm_groups,
                    0.0,
                    1.0,
                    &mut rng,
                ));
                ch = out_ch;
            }
            let up = (i > 0).then(|| {
                spatial *= 2;
                (
                    Conv::new(&mut params, &format!("dec.l{i}.up"), ch, ch, 3, 1, false, &mut rng),
                    spatial,
                )
            });
            levels.push((blocks, up));
        }
        debug_assert_eq!(spatial, c.input_spatial);
        let dec = Decoder {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut params, "dec.norm_out", ch, group_fallback(ch, c.norm_groups)),
            conv_out: Conv::new(&mut params, "dec.conv_out", ch, c.input_channels, 3, 1, true, &mut rng),
        };

        Ok(Self { config, params, seed, loss_trace: Vec::new(), latent_scale: None, enc, dec })
    }

    /// Graph-building encoder: returns (mu, logvar) ids, each `[B, zc, zs, zs]`.
    pub fn encode_graph(&self, tape: &mut Tape<F>, x: Id) -> (Id, Id) {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout unused (p=0)
        let mut h = self.enc.conv_in.forward(tape, &self.params, x);
        for (blocks, down) in &self.enc.levels {
            for rb in blocks {
                h = rb.forward(tape, &self.params, h, None, &mut rng);
            }
            if let Some(d) = down {
                h = d.forward(tape, &self.params, h);
            }
        }
        let h = self.enc.norm_out.forward(tape, &self.params, h);
        let h = tape.silu(h);
        let out = self.enc.conv_out.forward(tape, &self.params, h);
        let zc = self.config.latent_channels;
        let mu = tape.slice_ch(out, 0, zc);
        let logvar = tape.slice_ch(out, zc, 2 * zc);
        (mu, logvar)
    }

    /// Graph-building decoder `[B, zc, zs, zs] -> [B, C, H, W]`.
    pub fn decode_graph(&self, tape: &mut Tape<F>, z: Id) -> Id {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = self.dec.conv_in.forward(tape, &self.params, z);
        for (blocks, up) in &self.dec.levels {
            for rb in blocks {
                h = rb.forward(tape, &self.params, h, None, &mut rng);
            }
            if let Some((conv, target)) = up {
                let r = tape.upsample_nearest(h, *target, *target);
                h = conv.forward(tape, &self.params, r);
            }
        }
        let h = self.dec.norm_out.forward(tape, &self.params, h);
        let h = tape.silu(h);
        self.dec.conv_out.forward(tape, &self.params, h)
    }

    fn check_image_input(&self, x: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.input_spatial, c.input_spatial];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                found: x.shape().to_vec(),
                context: "vae encoder input (excluding batch)".into(),
            });
        }
        Ok(())
    }

    /// Evaluation-mode encode.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_image_input(x)?;
        let mut tape = Tape::new(false);
        let xid = tape.leaf(x.clone());
        let (mu, logvar) = self.encode_graph(&mut tape, xid);
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    /// Evaluation-mode decode.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let c = &self.config;
        let want = [c.latent_channels, c.latent_spatial, c.latent_spatial];
        if z.shape().len() != 4 || z.shape()[1..] != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                found: z.shape().to_vec(),
                context: "vae decoder input (excluding batch)".into(),
            });
        }
        let mut tape = Tape::new(false);
        let zid = tape.leaf(z.clone());
        let out = self.decode_graph(&mut tape, zid);
        let val = tape.value(out).clone();
        if val.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(val)
    }

    pub fn checkpoint_meta(&self, train: Option<&TrainConfig>) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CKPT_FORMAT_VERSION,
            kind: "vae".into(),
            seed: self.seed,
            config: serde_json::json!({ "vae": self.config, "train": train }),
            loss_trace: self.loss_trace.clone(),
            latent_scale: self.latent_scale,
            params: vec![],
        }
    }

    pub fn from_checkpoint(meta: &CheckpointMeta, params: ParamSet<F>) -> Result<Self> {
        let cfg: VaeConfig = serde_json::from_value(meta.config["vae"].clone())
            .map_err(|e| Error::Checkpoint(format!("vae config: {e}")))?;
        let mut vae = Self::new(cfg, meta.seed)?;
        if vae.params.len() != params.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        vae.params = params;
        vae.loss_trace = meta.loss_trace.clone();
        vae.latent_scale = meta.latent_scale;
        Ok(vae)
    }
}

/// `z = mu + exp(logvar/2) * eps`.
pub fn reparameterize<F: Scalar>(
    mu: &Tensor<F>,
    logvar: &Tensor<F>,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: mu.shape().to_vec(),
            found: eps.shape().to_vec(),
            context: "reparameterize".into(),
        });
    }
    let half = F::c(0.5);
    let std = logvar.mapv(|lv| (lv * half).exp());
    Ok(mu + &(&std * eps))
}

/// Closed-form KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims,
/// per sample.
pub fn kl_terms<F: Scalar>(mu: &Tensor<F>, logvar: &Tensor<F>) -> Vec<F> {
    let b = mu.shape()[0];
    let p: usize = mu.shape()[1..].iter().product();
    let ms = mu.as_slice().unwrap();
    let ls = logvar.as_slice().unwrap();
    let half = F::c(0.5);
    (0..b)
        .map(|bi| {
            let mut acc = F::zero();
            for k in bi * p..(bi + 1) * p {
                acc += half * (ls[k].exp() + ms[k] * ms[k] - F::one() - ls[k]);
            }
            acc
        })
        .collect()
}

/// Build the masked-ELBO graph:
/// `sum_obs (x - x_hat)^2 / sum_j m_j + beta_kl * KL`, mean over batch.
/// `eps` is supplied by the caller so the objective is a deterministic
/// function of its inputs.
pub fn masked_elbo_graph<F: Scalar>(
    vae: &Vae<F>,
    x_zero_imputed: &Tensor<F>,
    mask: &Tensor<F>,
    eps: &Tensor<F>,
    beta_kl: f64,
) -> Result<(Tape<F>, Id)> {
    if x_zero_imputed.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: x_zero_imputed.shape().to_vec(),
            found: mask.shape().to_vec(),
            context: "masked_elbo mask".into(),
        });
    }
    vae.check_image_input(x_zero_imputed)?;
    let b = x_zero_imputed.shape()[0];
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let p: usize = x_zero_imputed.shape()[1..].iter().product();
    // per-sample reconstruction weights m / (sum m * B)
    let mut weight = mask.clone();
    {
        let ws = weight.as_slice_mut().unwrap();
        for bi in 0..b {
            let row = &mut ws[bi * p..(bi + 1) * p];
            let count: F = row.iter().copied().sum();
            if count == F::zero() {
                return Err(Error::AllMissingSample { index: bi });
            }
            let w = F::one() / (count * F::c(b as f64));
            for v in row.iter_mut() {
                *v = *v * w;
            }
        }
    }

    let mut tape = Tape::new(true);
    let x_id = tape.leaf(x_zero_imputed.clone());
    let enc_in = if vae.config.mask_concat {
        let m_id = tape.leaf(mask.clone());
        tape.concat_ch(x_id, m_id)
    } else {
        x_id
    };
    let (mu, logvar) = vae.encode_graph(&mut tape, enc_in);
    // z = mu + exp(logvar/2) eps
    let half_lv = tape.scale(logvar, F::c(0.5));
    let std = tape.exp(half_lv);
    let eps_id = tape.leaf(eps.clone());
    let noise = tape.mul(std, eps_id);
    let z = tape.add(mu, noise);
    let x_hat = vae.decode_graph(&mut tape, z);

    let diff = tape.sub(x_id, x_hat);
    let sq = tape.mul(diff, diff);
    let w_id = tape.leaf(weight);
    let wsq = tape.mul(sq, w_id);
    let recon = tape.sum_all(wsq);

    // KL = 1/2 sum(exp(lv) + mu^2 - 1 - lv), mean over batch
    let elv = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu);
    let s1 = tape.add(elv, mu2);
    let s2 = tape.add_scalar(s1, F::c(-1.0));
    let s3 = tape.sub(s2, logvar);
    let ksum = tape.sum_all(s3);
    let kl = tape.scale(ksum, F::c(0.5 / b as f64));

    let kl_w = tape.scale(kl, F::c(beta_kl));
    let loss = tape.add(recon, kl_w);
    Ok((tape, loss))
}

/// Scalar masked ELBO (see [`masked_elbo_graph`]).
pub fn masked_elbo<F: Scalar>(
    vae: &Vae<F>,
    x_zero_imputed: &Tensor<F>,
    mask: &Tensor<F>,
    eps: &Tensor<F>,
    beta_kl: f64,
) -> Result<F> {
    let (tape, loss) = masked_elbo_graph(vae, x_zero_imputed, mask, eps, beta_kl)?;
    Ok(tape.scalar_value(loss))
}

/// Standardization factor `1 / std` over all components of a latent batch.
pub fn latent_scale_from<F: Scalar>(latents: &Tensor<F>) -> Result<f64> {
    let n = latents.len();
    let mean = latents.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
    let var = latents.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(Error::DegenerateLatents { std });
    }
    Ok(1.0 / std)
}

/// Encoder-mean standardization factor over a dataset sample (>= 256 images).
pub fn latent_scale<F: Scalar>(vae: &Vae<F>, images: &Tensor<F>) -> Result<f64> {
    let n = images.shape()[0];
    if n < 256 {
        return Err(Error::TooFewSamples { needed: 256, got: n });
    }
    let mut mus: Vec<F> = Vec::new();
    for chunk_start in (0..n).step_by(256) {
        let idx: Vec<usize> = (chunk_start..(chunk_start + 256).min(n)).collect();
        let xb = select_rows(images, &idx);
        let (mu, _) = vae.encode(&xb)?;
        mus.extend(mu.iter().copied());
    }
    let t = Tensor::from_shape_vec(IxDyn(&[mus.len()]), mus).unwrap();
    latent_scale_from(&t)
}

pub struct VaeTrainReport {
    pub loss_trace: Vec<f64>,
}

/// Train the VAE in place with the masked ELBO on zero-imputed data.
pub fn train_vae_on<F: Scalar>(
    vae: &mut Vae<F>,
    data_zero_imputed: &Tensor<F>,
    masks: &Tensor<F>,
    cfg: &TrainConfig,
) -> Result<VaeTrainReport> {
    let n = data_zero_imputed.shape()[0];
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&vae.params, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let beta = vae.config.beta_kl;
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = select_rows(data_zero_imputed, chunk);
            let mb = select_rows(masks, chunk);
            let zc = vae.config.latent_channels;
            let zs = vae.config.latent_spatial;
            let eps: Tensor<F> = randn_like(&[chunk.len(), zc, zs, zs], &mut rng);
            let (tape, loss) = masked_elbo_graph(vae, &xb, &mb, &eps, beta)?;
            let loss_val = tape.scalar_value(loss).f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: steps });
            }
            let mut grads = tape.backward(loss);
            let pgrads = tape.param_grads(&mut grads, &vae.params);
            opt.step(&mut vae.params, &pgrads);
            epoch_loss += loss_val;
            steps += 1;
        }
        trace.push(epoch_loss / steps.max(1) as f64);
    }
    vae.loss_trace.extend(trace.iter().copied());
    Ok(VaeTrainReport { loss_trace: trace })
}

/// Train a fresh VAE on an image dataset split.
pub fn train_vae<F: Scalar>(
    cfg: &TrainConfig,
    vae_cfg: &VaeConfig,
    dataset: &DatasetSplit,
) -> Result<Vae<F>> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut vae = Vae::new(vae_cfg.clone(), cfg.seed)?;
    let imputed = dataset.zero_imputed()?;
    let data = imputed.data.mapv(|v| F::c(v as f64)).into_dyn();
    let masks = dataset.masks.masks.mapv(|m| F::c(m as f64)).into_dyn();
    train_vae_on(&mut vae, &data, &masks, cfg)?;
    Ok(vae)
}

/// Encode a dataset into (optionally sampled, unscaled) latents for diffusion
/// training.
pub fn encode_dataset_latents<F: Scalar>(
    vae: &Vae<F>,
    data_zero_imputed: &Tensor<F>,
    seed: u64,
) -> Result<Tensor<F>> {
    let n = data_zero_imputed.shape()[0];
    let zc = vae.config.latent_channels;
    let zs = vae.config.latent_spatial;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(IxDyn(&[n, zc, zs, zs]));
    let row = zc * zs * zs;
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let xb = select_rows(data_zero_imputed, &idx);
        let (mu, logvar) = vae.encode(&xb)?;
        let z = if vae.config.sample_latents {
            let eps: Tensor<F> = randn_like(mu.shape(), &mut rng);
            reparameterize(&mu, &logvar, &eps)?
        } else {
            mu
        };
        out.as_slice_mut().unwrap()[start * row..(start + idx.len()) * row]
            .copy_from_slice(z.as_slice().unwrap());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            channel_multipliers: vec![1, 2],
            latent_channels: 1,
            latent_spatial: 4,
            beta_kl: 1e-6,
            base_channels: 8,
            blocks_per_level: 1,
            norm_groups: 4,
            mask_concat: false,
            sample_latents: true,
            input_spatial: 8,
            input_channels: 1,
        }
    }

    #[test]
    fn encode_decode_shapes() {
        let vae = Vae::<f64>::new(VaeConfig::desk(), 1).unwrap();
        let x = Tensor::from_elem(IxDyn(&[3, 1, 28, 28]), 0.5);
        let (mu, logvar) = vae.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[3, 2, 7, 7]);
        assert_eq!(logvar.shape(), &[3, 2, 7, 7]);
        let x_hat = vae.decode(&mu).unwrap();
        assert_eq!(x_hat.shape(), &[3, 1, 28, 28]);
        // deterministic evaluation mode
        let (mu2, _) = vae.encode(&x).unwrap();
        assert_eq!(mu, mu2);
        // compression ratio 784 / 98 = 8
        assert_eq!(784 / (2 * 7 * 7), 8);
    }

    #[test]
    fn reparameterize_cases() {
        let mu = Tensor::from_elem(IxDyn(&[2, 3]), 0.4f64);
        let lv = Tensor::zeros(IxDyn(&[2, 3]));
        let zero = Tensor::zeros(IxDyn(&[2, 3]));
        let one = Tensor::from_elem(IxDyn(&[2, 3]), 1.0);
        assert_eq!(reparameterize(&mu, &lv, &zero).unwrap(), mu);
        let z = reparameterize(&mu, &lv, &one).unwrap();
        assert_abs_diff_eq!(z[[0, 0]], 1.4, epsilon = 1e-12);
    }

    #[test]
    fn reparameterize_moments() {
        let n = 100_000;
        let mu = Tensor::from_elem(IxDyn(&[n]), 0.7f64);
        let lv = Tensor::from_elem(IxDyn(&[n]), 0.4f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps: Tensor<f64> = randn_like(&[n], &mut rng);
        let z = reparameterize(&mu, &lv, &eps).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() / 0.7 < 0.02);
        assert!((var - 0.4f64.exp()).abs() / 0.4f64.exp() < 0.02);
    }

    #[test]
    fn kl_zero_iff_standard_normal() {
        let mu = Tensor::zeros(IxDyn(&[2, 4]));
        let lv = Tensor::zeros(IxDyn(&[2, 4]));
        let kl = kl_terms(&mu, &lv);
        assert!(kl.iter().all(|&v| v == 0.0));
        let mu2 = Tensor::from_elem(IxDyn(&[1, 4]), 0.3f64);
        let kl2 = kl_terms(&mu2, &lv.slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..1)).to_owned());
        assert!(kl2[0] > 0.0);
    }

    #[test]
    fn masked_elbo_ignores_missing_pixels() {
        // two ground truths differing only at a masked-out pixel reach the
        // loss through the same zero-imputed view, so the losses are
        // bit-identical
        let vae = Vae::<f64>::new(tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_a: Tensor<f64> =
            randn_like(&[2, 1, 8, 8], &mut rng).mapv(|v: f64| (v * 0.1 + 0.5).clamp(0.0, 1.0));
        let mut x_b = x_a.clone();
        x_b[[0, 0, 3, 3]] = 0.99;
        x_b[[1, 0, 5, 1]] = 0.01;
        let mut mask = Tensor::from_elem(IxDyn(&[2, 1, 8, 8]), 1.0);
        mask[[0, 0, 3, 3]] = 0.0;
        mask[[1, 0, 5, 1]] = 0.0;
        let eps: Tensor<f64> = randn_like(&[2, 1, 4, 4], &mut rng);
        let l1 = masked_elbo(&vae, &(&x_a * &mask), &mask, &eps, 1e-6).unwrap();
        let l2 = masked_elbo(&vae, &(&x_b * &mask), &mask, &eps, 1e-6).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn masked_elbo_beta_zero_perfect_recon_toy() {
        // brute-force masked reconstruction on an 8-pixel toy image
        let vals = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let x = Tensor::from_shape_vec(IxDyn(&[1, 1, 2, 4]), vals.to_vec()).unwrap();
        let mut mask = Tensor::from_elem(IxDyn(&[1, 1, 2, 4]), 1.0);
        mask[[0, 0, 0, 1]] = 0.0;
        // reconstruction equal to x on observed pixels, wrong on the missing
        let mut x_hat = x.clone();
        x_hat[[0, 0, 0, 1]] = 0.9;
        let diff = (&x - &x_hat) * &mask;
        let obs: f64 = mask.sum();
        let recon: f64 = diff.iter().map(|v| v * v).sum::<f64>() / obs;
        assert_abs_diff_eq!(recon, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn all_missing_sample_rejected() {
        let vae = Vae::<f64>::new(tiny_cfg(), 5).unwrap();
        let x = Tensor::zeros(IxDyn(&[1, 1, 8, 8]));
        let mask = Tensor::zeros(IxDyn(&[1, 1, 8, 8]));
        let eps = Tensor::zeros(IxDyn(&[1, 1, 4, 4]));
        assert!(matches!(
            masked_elbo(&vae, &x, &mask, &eps, 1e-6),
            Err(Error::AllMissingSample { index: 0 })
        ));
    }

    #[test]
    fn latent_scale_definitional() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let unit: Tensor<f64> = randn_like(&[40_000], &mut rng);
        let s = latent_scale_from(&unit).unwrap();
        assert!((s - 1.0).abs() < 0.02, "scale {s}");
        let doubled = &unit * 2.0;
        let s2 = latent_scale_from(&doubled).unwrap();
        assert!((s2 - 0.5).abs() < 0.01, "scale {s2}");
        let constant = Tensor::from_elem(IxDyn(&[1000]), 3.0f64);
        assert!(matches!(latent_scale_from(&constant), Err(Error::DegenerateLatents { .. })));
    }

    #[test]
    fn latent_scale_requires_samples() {
        let vae = Vae::<f64>::new(tiny_cfg(), 7).unwrap();
        let x = Tensor::zeros(IxDyn(&[10, 1, 8, 8]));
        assert!(matches!(latent_scale(&vae, &x), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn scale_roundtrip_decode_invariance() {
        let vae = Vae::<f64>::new(tiny_cfg(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Tensor<f64> = randn_like(&[2, 1, 4, 4], &mut rng);
        let scale = 2.5f64;
        let z_scaled = &z * scale;
        let back = &z_scaled / scale;
        let a = vae.decode(&z).unwrap();
        let b = vae.decode(&back).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn vae_training_reduces_loss_tiny() {
        let mut vae = Vae::<f64>::new(tiny_cfg(), 10).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(11);
        // blobs: two-mode synthetic images
        let n = 64;
        let mut data = Tensor::zeros(IxDyn(&[n, 1, 8, 8]));
        for i in 0..n {
            let cx = if i % 2 == 0 { 2 } else { 5 };
            for dy in 0..3 {
                for dx in 0..3 {
                    data[[i, 0, cx + dy - 1, cx + dx - 1]] = 0.9;
                }
            }
        }
        let masks = crate::data::mcar_mask(n, (1, 8, 8), 0.3, 5).unwrap();
        let masks_f = masks.masks.mapv(|m| m as f64).into_dyn();
        let data_imp = &data * &masks_f;
        let cfg = TrainConfig { batch_size: 16, epochs: 30, learning_rate: 2e-3, seed: 12, missing_rate: 0.3 };
        let report = train_vae_on(&mut vae, &data_imp, &masks_f, &cfg).unwrap();
        let first = report.loss_trace[0];
        let last = *report.loss_trace.last().unwrap();
        assert!(last < first, "vae loss did not decrease: {first} -> {last}");
        let _ = rng;
    }

    #[test]
    fn epochs_zero_keeps_init() {
        let mut vae = Vae::<f64>::new(tiny_cfg(), 13).unwrap();
        let before = vae.params.value(lacuna_nn::ParamId(0)).clone();
        let data = Tensor::zeros(IxDyn(&[4, 1, 8, 8]));
        let masks = Tensor::from_elem(IxDyn(&[4, 1, 8, 8]), 1.0);
        let cfg = TrainConfig { batch_size: 2, epochs: 0, learning_rate: 1e-3, seed: 1, missing_rate: 0.0 };
        let report = train_vae_on(&mut vae, &data, &masks, &cfg).unwrap();
        assert!(report.loss_trace.is_empty());
        assert_eq!(vae.params.value(lacuna_nn::ParamId(0)), &before);
    }
}
