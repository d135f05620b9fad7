//! Cell-level pipeline: training, sampling, imputation, and evaluation for
//! one (model, missing-rate, seed) grid cell, with manifest-based resume.

use crate::config::{train_config, ModelKind, Resolved};
use crate::manifest::{hash_bytes, step_is_done, Manifest};
use anyhow::{anyhow, bail, Context, Result};
use lacuna_core::ckpt::{load_checkpoint, save_checkpoint, CheckpointMeta, CKPT_FORMAT_VERSION};
use lacuna_core::data::{load_idx, mcar_mask, zero_impute, DatasetSplit, ImageBatch, MaskSet, SplitRole};
use lacuna_core::eval::{
    feature_stats, frechet_distance, imputation_mse, inception_score, train_classifier, Classifier,
    FeatureStats, MetricsReport,
};
use lacuna_core::impute::{
    em_impute_train, guided_impute_latent, guided_impute_pixel, replacement_impute, EmConfig,
    ImputationRequest, ImputeMethod,
};
use lacuna_core::score::{train_score, LossKind, ScoreModel};
use lacuna_core::sde::{sample_denoised, DiffusionSchedule, ScoreFn};
use lacuna_core::vae::{encode_dataset_latents, latent_scale, train_vae, Vae};
use lacuna_nn::{ParamSet, Tensor};
use ndarray::IxDyn;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

type F = f32;

/// Shared state across commands: resolved config, dataset hashes, cached data.
pub struct Ctx {
    pub r: Resolved,
    train_data: std::sync::OnceLock<ImageBatch>,
    test_data: std::sync::OnceLock<ImageBatch>,
    data_hash: std::sync::OnceLock<String>,
}

impl Ctx {
    pub fn new(r: Resolved) -> Self {
        Self {
            r,
            train_data: std::sync::OnceLock::new(),
            test_data: std::sync::OnceLock::new(),
            data_hash: std::sync::OnceLock::new(),
        }
    }

    pub fn mnist_paths(&self) -> [PathBuf; 4] {
        let d = &self.r.data_dir;
        [
            d.join("train-images-idx3-ubyte"),
            d.join("train-labels-idx1-ubyte"),
            d.join("t10k-images-idx3-ubyte"),
            d.join("t10k-labels-idx1-ubyte"),
        ]
    }

    pub fn train_data(&self) -> Result<&ImageBatch> {
        if self.train_data.get().is_none() {
            let [imgs, labels, _, _] = self.mnist_paths();
            let data = load_idx(&imgs, Some(&labels))?;
            let _ = self.train_data.set(data);
        }
        Ok(self.train_data.get().unwrap())
    }

    pub fn test_data(&self) -> Result<&ImageBatch> {
        if self.test_data.get().is_none() {
            let [_, _, imgs, labels] = self.mnist_paths();
            let data = load_idx(&imgs, Some(&labels))?;
            let _ = self.test_data.set(data);
        }
        Ok(self.test_data.get().unwrap())
    }

    /// One hash covering the four MNIST files plus the resolved subset size.
    pub fn data_hash(&self) -> Result<&String> {
        if self.data_hash.get().is_none() {
            let mut acc = String::new();
            for p in self.mnist_paths() {
                acc.push_str(&crate::manifest::hash_file(&p)?);
            }
            acc.push_str(&format!("|subset={}", self.r.train_subset));
            let _ = self.data_hash.set(hash_bytes(acc.as_bytes()));
        }
        Ok(self.data_hash.get().unwrap())
    }

    pub fn cell_dir(&self, model: &str, rate: f64, seed: u64) -> PathBuf {
        self.r.output_dir.join(model).join(format!("mr{rate:.2}")).join(format!("seed{seed}"))
    }

    /// Training subset (first `train_subset` images) with persistent masks.
    pub fn train_split(&self, rate: f64, seed: u64) -> Result<DatasetSplit> {
        let data = self.train_data()?;
        let n = self.r.train_subset.min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        let images = data.select(&idx);
        let (c, h, w) = images.shape_chw();
        let masks = mcar_mask(n, (c, h, w), rate, seed as u32)?;
        Ok(DatasetSplit::new(images, masks, SplitRole::Train)?)
    }

    /// Test images with an independent mask stream (seed offset by 1000).
    pub fn test_split(&self, rate: f64, seed: u64, count: usize) -> Result<DatasetSplit> {
        let data = self.test_data()?;
        let n = count.min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        let images = data.select(&idx);
        let (c, h, w) = images.shape_chw();
        let masks = mcar_mask(n, (c, h, w), rate, (seed + 1000) as u32)?;
        Ok(DatasetSplit::new(images, masks, SplitRole::Test)?)
    }
}

fn to_f32_dyn(b: &ImageBatch) -> Tensor<F> {
    b.data.clone().into_dyn()
}

fn masks_f32(m: &MaskSet) -> Tensor<F> {
    m.masks.mapv(|v| v as f32).into_dyn()
}

// ---- artifact helpers ----

/// Save raw arrays in the checkpoint container (kind "tensors").
pub fn save_tensors(path: &Path, name: &str, t: &Tensor<F>, seed: u64) -> Result<()> {
    let mut params = ParamSet::<F>::new();
    params.add(name, t.clone());
    let meta = CheckpointMeta {
        format_version: CKPT_FORMAT_VERSION,
        kind: "tensors".into(),
        seed,
        config: serde_json::json!({}),
        loss_trace: vec![],
        latent_scale: None,
        params: vec![],
    };
    save_checkpoint(path, &meta, &params)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Tensor<F>> {
    let (_, params) = load_checkpoint::<F>(path)?;
    Ok(params.value(lacuna_nn::ParamId(0)).clone())
}

/// Write a grayscale grid PNG of `[N,1,H,W]` images in `[0,1]`.
pub fn grid_png(images: &Tensor<F>, path: &Path) -> Result<()> {
    let s = images.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let pad = 2usize;
    let (iw, ih) = (cols * (w + pad) + pad, rows * (h + pad) + pad);
    let mut img = image::GrayImage::from_pixel(iw as u32, ih as u32, image::Luma([32u8]));
    let xs = images.as_slice().unwrap();
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let v = (xs[(i * h + y) * w + x].clamp(0.0, 1.0) * 255.0) as u8;
                img.put_pixel(
                    (pad + c * (w + pad) + x) as u32,
                    (pad + r * (h + pad) + y) as u32,
                    image::Luma([v]),
                );
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_score_model(path: &Path) -> Result<ScoreModel<F>> {
    let (meta, params) = load_checkpoint::<F>(path)?;
    if meta.kind != "score" {
        bail!("MethodModelMismatch: {} is a '{}' checkpoint, expected 'score'", path.display(), meta.kind);
    }
    Ok(ScoreModel::from_checkpoint(&meta, params)?)
}

fn load_vae_model(path: &Path) -> Result<Vae<F>> {
    let (meta, params) = load_checkpoint::<F>(path)?;
    if meta.kind != "vae" {
        bail!("MethodModelMismatch: {} is a '{}' checkpoint, expected 'vae'", path.display(), meta.kind);
    }
    Ok(Vae::from_checkpoint(&meta, params)?)
}

fn load_classifier_model(path: &Path) -> Result<Classifier<F>> {
    let (meta, params) = load_checkpoint::<F>(path)?;
    if meta.kind != "classifier" {
        bail!("MethodModelMismatch: {} is a '{}' checkpoint, expected 'classifier'", path.display(), meta.kind);
    }
    Ok(Classifier::from_checkpoint(&meta, params)?)
}

// ---- commands ----

/// Generate and persist the MCAR masks for the whole grid.
pub fn cmd_prepare_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.r.output_dir.join("masks");
    std::fs::create_dir_all(&dir)?;
    let train = ctx.train_data()?;
    let test = ctx.test_data()?;
    let (c, h, w) = train.shape_chw();
    let n_train = ctx.r.train_subset.min(train.len());
    let n_test = ctx.r.n_impute_images.min(test.len());
    let mut written = Vec::new();
    for &rate in &ctx.r.cfg.missing_rates {
        for &seed in &ctx.r.cfg.seeds {
            let m = mcar_mask(n_train, (c, h, w), rate, seed as u32)?;
            let p = dir.join(format!("train_mr{rate:.2}_seed{seed}.mask"));
            let mut f = std::fs::File::create(&p)?;
            m.write_to(&mut f)?;
            written.push(p);
        }
    }
    for &seed in &ctx.r.cfg.seeds {
        let rate = ctx.r.cfg.test_missing_rate;
        let m = mcar_mask(n_test, (c, h, w), rate, (seed + 1000) as u32)?;
        let p = dir.join(format!("test_mr{rate:.2}_seed{seed}.mask"));
        let mut f = std::fs::File::create(&p)?;
        m.write_to(&mut f)?;
        written.push(p);
    }
    let mut manifest = Manifest::new(
        "prepare-data",
        serde_json::json!({
            "missing_rates": ctx.r.cfg.missing_rates,
            "seeds": ctx.r.cfg.seeds,
            "test_missing_rate": ctx.r.cfg.test_missing_rate,
            "n_train": n_train, "n_test": n_test,
        }),
    );
    manifest.input_hash("data", ctx.data_hash()?);
    for p in &written {
        manifest.output_file(p.file_name().unwrap().to_str().unwrap(), p)?;
    }
    manifest.write(&dir)?;
    println!("wrote {} mask files under {}", written.len(), dir.display());
    Ok(())
}

/// Train (or reuse) the evaluation classifier; returns the checkpoint path.
pub fn ensure_classifier(ctx: &Ctx) -> Result<PathBuf> {
    let dir = ctx.r.output_dir.join("classifier");
    let ckpt = dir.join("model.ckpt");
    let cfg = train_config(ctx.r.batch_size, ctx.r.epochs_classifier, ctx.r.lr_classifier, 42, 0.0);
    let params = serde_json::json!({"train": cfg});
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), ctx.data_hash()?.clone());
    if step_is_done(&dir, "train-classifier", &params, &inputs) {
        return Ok(ckpt);
    }
    let t0 = Instant::now();
    let train = ctx.train_data()?;
    let clf: Classifier<F> = train_classifier(train, &cfg)?;
    let test = ctx.test_data()?;
    let acc = clf.accuracy(&to_f32_dyn(test), test.labels.as_ref().unwrap())?;
    println!("classifier test accuracy: {:.4} ({:.0}s)", acc, t0.elapsed().as_secs_f64());
    save_checkpoint(&ckpt, &clf.checkpoint_meta(Some(&cfg)), &clf.params)?;
    let mut manifest = Manifest::new("train-classifier", params);
    manifest.inputs = inputs;
    manifest.output_file("model.ckpt", &ckpt)?;
    manifest.write(&dir)?;
    Ok(ckpt)
}

/// Reference feature statistics over the full test set, cached beside the
/// classifier.
pub fn reference_stats(ctx: &Ctx, clf_path: &Path) -> Result<FeatureStats> {
    let dir = ctx.r.output_dir.join("classifier");
    let cache = dir.join("ref_stats.json");
    let clf_hash = crate::manifest::hash_file(clf_path)?;
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Cache {
        clf_hash: String,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
        count: usize,
    }
    if let Ok(text) = std::fs::read_to_string(&cache) {
        if let Ok(c) = serde_json::from_str::<Cache>(&text) {
            if c.clf_hash == clf_hash {
                let d = c.mean.len();
                return Ok(FeatureStats {
                    mean: ndarray::Array1::from_vec(c.mean),
                    cov: ndarray::Array2::from_shape_fn((d, d), |(i, j)| c.cov[i][j]),
                    count: c.count,
                });
            }
        }
    }
    let clf = load_classifier_model(clf_path)?;
    let test = ctx.test_data()?;
    let (_, feats) = clf.probs_and_features(&to_f32_dyn(test))?;
    let stats = feature_stats(&feats)?;
    let c = Cache {
        clf_hash,
        mean: stats.mean.to_vec(),
        cov: (0..stats.mean.len())
            .map(|i| (0..stats.mean.len()).map(|j| stats.cov[[i, j]]).collect())
            .collect(),
        count: stats.count,
    };
    std::fs::write(&cache, serde_json::to_string(&c)?)?;
    Ok(stats)
}

/// Train (or reuse) the VAE for one (rate, seed) cell; returns ckpt path.
pub fn cmd_train_vae(ctx: &Ctx, rate: f64, seed: u64) -> Result<PathBuf> {
    let dir = ctx.cell_dir("ldm", rate, seed).join("vae");
    let ckpt = dir.join("vae.ckpt");
    let cfg = train_config(ctx.r.batch_size, ctx.r.epochs_vae, ctx.r.lr_vae, seed, rate);
    let params = serde_json::json!({"train": cfg, "vae": ctx.r.vae, "rate": rate});
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), ctx.data_hash()?.clone());
    if step_is_done(&dir, "train-vae", &params, &inputs) {
        println!("train-vae mr={rate:.2} seed={seed}: up to date");
        return Ok(ckpt);
    }
    let t0 = Instant::now();
    let split = ctx.train_split(rate, seed)?;
    let mut vae: Vae<F> = train_vae(&cfg, &ctx.r.vae, &split)?;
    // latent standardization over a fixed subset of the (zero-imputed) data
    let imputed = split.zero_imputed()?;
    let scale_n = 4096.min(imputed.len()).max(256);
    let idx: Vec<usize> = (0..scale_n).collect();
    let sample = imputed.select(&idx);
    let scale = latent_scale(&vae, &to_f32_dyn(&sample))?;
    vae.latent_scale = Some(scale);
    save_checkpoint(&ckpt, &vae.checkpoint_meta(Some(&cfg)), &vae.params)?;
    write_timing(&dir, t0.elapsed().as_secs_f64())?;
    let mut manifest = Manifest::new("train-vae", params);
    manifest.inputs = inputs;
    manifest.output_file("vae.ckpt", &ckpt)?;
    manifest.write(&dir)?;
    println!(
        "train-vae mr={rate:.2} seed={seed}: scale={scale:.3} loss={:.5} ({:.0}s)",
        vae.loss_trace.last().unwrap_or(&f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Space {
    Pixel,
    Latent,
}

/// Train (or reuse) a score network; pixel space uses the masked objective,
/// latent space trains the full objective on scaled VAE latents.
pub fn cmd_train_score(ctx: &Ctx, space: Space, rate: f64, seed: u64) -> Result<PathBuf> {
    match space {
        Space::Pixel => {
            let dir = ctx.cell_dir("ddpm", rate, seed);
            let ckpt = dir.join("score.ckpt");
            let cfg = train_config(ctx.r.batch_size, ctx.r.epochs_pixel, ctx.r.lr_pixel, seed, rate);
            let params = serde_json::json!({
                "train": cfg, "net": ctx.r.pixel_net, "schedule": ctx.r.cfg.schedule, "rate": rate,
            });
            let mut inputs = BTreeMap::new();
            inputs.insert("data".to_string(), ctx.data_hash()?.clone());
            if step_is_done(&dir, "train-score-pixel", &params, &inputs) {
                println!("train-score pixel mr={rate:.2} seed={seed}: up to date");
                return Ok(ckpt);
            }
            let t0 = Instant::now();
            let split = ctx.train_split(rate, seed)?;
            let model: ScoreModel<F> =
                train_score(&cfg, &ctx.r.pixel_net, &ctx.r.cfg.schedule, &split, LossKind::Masked)?;
            save_checkpoint(&ckpt, &model.checkpoint_meta("score", Some(&cfg)), &model.params)?;
            write_timing(&dir, t0.elapsed().as_secs_f64())?;
            let mut manifest = Manifest::new("train-score-pixel", params);
            manifest.inputs = inputs;
            manifest.output_file("score.ckpt", &ckpt)?;
            manifest.write(&dir)?;
            println!(
                "train-score pixel mr={rate:.2} seed={seed}: loss={:.5} ({:.0}s)",
                model.loss_trace.last().unwrap_or(&f64::NAN),
                t0.elapsed().as_secs_f64()
            );
            Ok(ckpt)
        }
        Space::Latent => {
            let vae_ckpt = cmd_train_vae(ctx, rate, seed)?;
            let dir = ctx.cell_dir("ldm", rate, seed);
            let ckpt = dir.join("score.ckpt");
            let cfg = train_config(ctx.r.batch_size, ctx.r.epochs_latent, ctx.r.lr_latent, seed, rate);
            let params = serde_json::json!({
                "train": cfg, "net": ctx.r.latent_net, "schedule": ctx.r.cfg.schedule, "rate": rate,
            });
            let mut inputs = BTreeMap::new();
            inputs.insert("data".to_string(), ctx.data_hash()?.clone());
            inputs.insert("vae".to_string(), crate::manifest::hash_file(&vae_ckpt)?);
            if step_is_done(&dir, "train-score-latent", &params, &inputs) {
                println!("train-score latent mr={rate:.2} seed={seed}: up to date");
                return Ok(ckpt);
            }
            let t0 = Instant::now();
            let vae = load_vae_model(&vae_ckpt)?;
            let scale = vae
                .latent_scale
                .ok_or_else(|| anyhow!("vae checkpoint lacks latent scale"))?;
            let split = ctx.train_split(rate, seed)?;
            let imputed = split.zero_imputed()?;
            let latents = encode_dataset_latents(&vae, &to_f32_dyn(&imputed), seed ^ 0x1a7e)?;
            let scaled = &latents * (scale as f32);
            let mut model = ScoreModel::<F>::new(ctx.r.latent_net.clone(), ctx.r.cfg.schedule, seed)?;
            lacuna_core::score::train_score_on(&mut model, &scaled, None, &cfg)?;
            save_checkpoint(&ckpt, &model.checkpoint_meta("score", Some(&cfg)), &model.params)?;
            write_timing(&dir, t0.elapsed().as_secs_f64())?;
            let mut manifest = Manifest::new("train-score-latent", params);
            manifest.inputs = inputs;
            manifest.output_file("score.ckpt", &ckpt)?;
            manifest.write(&dir)?;
            println!(
                "train-score latent mr={rate:.2} seed={seed}: loss={:.5} ({:.0}s)",
                model.loss_trace.last().unwrap_or(&f64::NAN),
                t0.elapsed().as_secs_f64()
            );
            Ok(ckpt)
        }
    }
}

/// EM loop: initialize from the masked-objective pixel model, then alternate
/// replacement imputation and full-objective retraining.
pub fn cmd_train_em(ctx: &Ctx, rate: f64, seed: u64) -> Result<PathBuf> {
    let init_ckpt = cmd_train_score(ctx, Space::Pixel, rate, seed)?;
    let dir = ctx.cell_dir("em", rate, seed);
    let ckpt = dir.join("score.ckpt");
    let m_cfg = train_config(ctx.r.batch_size, ctx.r.em_epochs, ctx.r.lr_pixel, seed ^ 0xe8, rate);
    let params = serde_json::json!({
        "rounds": ctx.r.em_rounds, "m_step": m_cfg, "subset": ctx.r.em_subset,
        "impute_steps": ctx.r.em_impute_steps, "rate": rate,
    });
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), ctx.data_hash()?.clone());
    inputs.insert("init".to_string(), crate::manifest::hash_file(&init_ckpt)?);
    if step_is_done(&dir, "train-em", &params, &inputs) {
        println!("train-em mr={rate:.2} seed={seed}: up to date");
        return Ok(ckpt);
    }
    let t0 = Instant::now();
    let mut model = load_score_model(&init_ckpt)?;
    let split = ctx.train_split(rate, seed)?;
    let n = ctx.r.em_subset.min(split.images.len());
    let idx: Vec<usize> = (0..n).collect();
    let sub_imgs = split.images.select(&idx);
    let sub_masks = split.masks.select(&idx);
    let imputed = zero_impute(&sub_imgs, &sub_masks)?;
    let em_cfg = EmConfig {
        rounds: ctx.r.em_rounds,
        m_step: m_cfg,
        impute_steps: ctx.r.em_impute_steps,
        impute_batch: 128,
        seed: seed ^ 0xe11,
    };
    let completed = em_impute_train(&mut model, &to_f32_dyn(&imputed), &masks_f32(&sub_masks), &em_cfg)?;
    save_checkpoint(&ckpt, &model.checkpoint_meta("score", Some(&em_cfg.m_step)), &model.params)?;
    save_tensors(&dir.join("train_imputations.ckpt"), "imputations", &completed, seed)?;
    write_timing(&dir, t0.elapsed().as_secs_f64())?;
    let mut manifest = Manifest::new("train-em", params);
    manifest.inputs = inputs;
    manifest.output_file("score.ckpt", &ckpt)?;
    manifest.output_file("train_imputations.ckpt", &dir.join("train_imputations.ckpt"))?;
    manifest.write(&dir)?;
    println!("train-em mr={rate:.2} seed={seed}: done ({:.0}s)", t0.elapsed().as_secs_f64());
    Ok(ckpt)
}

fn ensure_model_ckpts(ctx: &Ctx, model: ModelKind, rate: f64, seed: u64) -> Result<CellModels> {
    match model {
        ModelKind::Ddpm => {
            let score = cmd_train_score(ctx, Space::Pixel, rate, seed)?;
            Ok(CellModels { score, vae: None })
        }
        ModelKind::Ldm => {
            let score = cmd_train_score(ctx, Space::Latent, rate, seed)?;
            let vae = ctx.cell_dir("ldm", rate, seed).join("vae").join("vae.ckpt");
            Ok(CellModels { score, vae: Some(vae) })
        }
        ModelKind::Em => {
            let score = cmd_train_em(ctx, rate, seed)?;
            Ok(CellModels { score, vae: None })
        }
    }
}

pub struct CellModels {
    pub score: PathBuf,
    pub vae: Option<PathBuf>,
}

/// Draw unconditional samples for a cell; writes raw arrays plus a PNG grid.
pub fn cmd_sample(ctx: &Ctx, model: ModelKind, rate: f64, seed: u64, count: Option<usize>) -> Result<PathBuf> {
    let models = ensure_model_ckpts(ctx, model, rate, seed)?;
    let dir = ctx.cell_dir(model.id(), rate, seed);
    let out = dir.join("samples.ckpt");
    let n = count.unwrap_or(ctx.r.n_eval_samples);
    let steps = ctx.r.sample_steps;
    let params = serde_json::json!({"n": n, "steps": steps, "seed": seed});
    let mut inputs = BTreeMap::new();
    inputs.insert("score".to_string(), crate::manifest::hash_file(&models.score)?);
    if let Some(v) = &models.vae {
        inputs.insert("vae".to_string(), crate::manifest::hash_file(v)?);
    }
    if step_is_done(&dir.join("samples"), "sample", &params, &inputs) {
        println!("sample {} mr={rate:.2} seed={seed}: up to date", model.id());
        return Ok(out);
    }
    let t0 = Instant::now();
    let score = load_score_model(&models.score)?;
    let schedule = DiffusionSchedule { num_steps: steps, ..score.schedule };
    let images = match model {
        ModelKind::Ddpm | ModelKind::Em => {
            sample_images(&score, &schedule, &[1, 28, 28], n, seed)?
        }
        ModelKind::Ldm => {
            let vae = load_vae_model(models.vae.as_ref().unwrap())?;
            let scale = vae.latent_scale.ok_or_else(|| anyhow!("vae lacks latent scale"))? as f32;
            let zc = vae.config.latent_channels;
            let zs = vae.config.latent_spatial;
            let latents = sample_images(&score, &schedule, &[zc, zs, zs], n, seed)?;
            let mut decoded = Tensor::zeros(IxDyn(&[n, 1, 28, 28]));
            let row = 28 * 28;
            for start in (0..n).step_by(128) {
                let end = (start + 128).min(n);
                let idx: Vec<usize> = (start..end).collect();
                let zb = lacuna_core::score::select_rows(&latents, &idx) * (1.0 / scale);
                let xb = vae.decode(&zb)?;
                decoded.as_slice_mut().unwrap()[start * row..end * row]
                    .copy_from_slice(xb.as_slice().unwrap());
            }
            decoded
        }
    };
    let images = images.mapv(|v| v.clamp(0.0, 1.0));
    save_tensors(&out, "samples", &images, seed)?;
    let png = dir.join("samples.png");
    let preview = 64.min(n);
    let idx: Vec<usize> = (0..preview).collect();
    grid_png(&lacuna_core::score::select_rows(&images, &idx), &png)?;
    write_timing(&dir.join("samples"), t0.elapsed().as_secs_f64())?;
    let mut manifest = Manifest::new("sample", params);
    manifest.inputs = inputs;
    manifest.output_file("../samples.ckpt", &out)?;
    manifest.output_file("../samples.png", &png)?;
    manifest.write(&dir.join("samples"))?;
    println!("sample {} mr={rate:.2} seed={seed}: {n} samples ({:.0}s)", model.id(), t0.elapsed().as_secs_f64());
    Ok(out)
}

/// Reverse-diffuse `n` chains in deterministic chunks.
fn sample_images(
    score: &ScoreModel<F>,
    schedule: &DiffusionSchedule,
    item_shape: &[usize],
    n: usize,
    seed: u64,
) -> Result<Tensor<F>> {
    let row: usize = item_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let mut out = Tensor::zeros(IxDyn(&shape));
    for (ci, start) in (0..n).step_by(128).enumerate() {
        let bn = 128.min(n - start);
        let mut cshape = vec![bn];
        cshape.extend_from_slice(item_shape);
        let chunk = sample_denoised(score, &cshape, schedule, seed.wrapping_add(ci as u64 * 7919))?;
        out.as_slice_mut().unwrap()[start * row..(start + bn) * row]
            .copy_from_slice(chunk.as_slice().unwrap());
    }
    Ok(out)
}

pub fn method_for_model(model: ModelKind) -> ImputeMethod {
    match model {
        ModelKind::Ddpm => ImputeMethod::GuidancePixel,
        ModelKind::Ldm => ImputeMethod::GuidanceLatent,
        ModelKind::Em => ImputeMethod::Replacement,
    }
}

/// Impute the held-out test images at the configured test missing rate.
pub fn cmd_impute(
    ctx: &Ctx,
    model: ModelKind,
    method: ImputeMethod,
    rate: f64,
    seed: u64,
    count: Option<usize>,
) -> Result<PathBuf> {
    if method == ImputeMethod::GuidanceLatent && model != ModelKind::Ldm {
        bail!("MethodModelMismatch: guidance_latent requires the ldm model");
    }
    if method == ImputeMethod::GuidanceLatent && model == ModelKind::Ldm {
        // fine
    } else if model == ModelKind::Ldm {
        bail!("MethodModelMismatch: ldm supports only the guidance_latent method (latent space has no missing dimensions)");
    }
    let models = ensure_model_ckpts(ctx, model, rate, seed)?;
    let dir = ctx.cell_dir(model.id(), rate, seed);
    let method_tag = format!("{method:?}").to_lowercase();
    let out = dir.join(format!("imputed_{method_tag}.ckpt"));
    let n = count.unwrap_or(ctx.r.n_impute_images);
    let steps = ctx.r.impute_steps;
    let test_rate = ctx.r.cfg.test_missing_rate;
    let params = serde_json::json!({
        "n": n, "steps": steps, "seed": seed, "method": method_tag, "test_rate": test_rate,
    });
    let mut inputs = BTreeMap::new();
    inputs.insert("score".to_string(), crate::manifest::hash_file(&models.score)?);
    if let Some(v) = &models.vae {
        inputs.insert("vae".to_string(), crate::manifest::hash_file(v)?);
    }
    inputs.insert("data".to_string(), ctx.data_hash()?.clone());
    let manifest_dir = dir.join(format!("impute_{method_tag}"));
    if step_is_done(&manifest_dir, "impute", &params, &inputs) {
        println!("impute {} {method_tag} mr={rate:.2} seed={seed}: up to date", model.id());
        return Ok(out);
    }
    let t0 = Instant::now();
    let split = ctx.test_split(test_rate, seed, n)?;
    let x_obs = to_f32_dyn(&split.zero_imputed()?);
    let mask = masks_f32(&split.masks);
    let score = load_score_model(&models.score)?;
    let request = ImputationRequest {
        x_obs: x_obs.clone(),
        mask: mask.clone(),
        steps,
        seed: seed ^ 0x1337,
        method,
    };
    let imputed = match method {
        ImputeMethod::Replacement | ImputeMethod::Em => {
            replacement_impute(&score, &score.schedule.clone(), &request)?.x_imputed
        }
        ImputeMethod::GuidancePixel => {
            guided_impute_pixel(&score, &score.schedule.clone(), &request)?.0.x_imputed
        }
        ImputeMethod::GuidanceLatent => {
            let vae = load_vae_model(models.vae.as_ref().unwrap())?;
            guided_impute_latent(&vae, &score, &score.schedule.clone(), &request)?.0.x_imputed
        }
    };
    let imputed = imputed.mapv(|v| v.clamp(0.0, 1.0));
    // keep observed pixels bit-exact after the clamp to [0,1]
    let imputed = lacuna_core::impute::clamp_observed(&x_obs, &mask, &imputed);
    save_tensors(&out, "imputed", &imputed, seed)?;
    let png = dir.join(format!("imputed_{method_tag}.png"));
    let preview = 64.min(n);
    let idx: Vec<usize> = (0..preview).collect();
    grid_png(&lacuna_core::score::select_rows(&imputed, &idx), &png)?;
    let truth = to_f32_dyn(&split.images);
    let (mse_all, mse_missing) = imputation_mse(&truth, &imputed, &mask)?;
    write_timing(&manifest_dir, t0.elapsed().as_secs_f64())?;
    let mut manifest = Manifest::new("impute", params);
    manifest.inputs = inputs;
    manifest.output_file(&format!("../imputed_{method_tag}.ckpt"), &out)?;
    manifest.output_file(&format!("../imputed_{method_tag}.png"), &png)?;
    manifest.write(&manifest_dir)?;
    println!(
        "impute {} {method_tag} mr={rate:.2} seed={seed}: mse_all={mse_all:.5} mse_missing={} ({:.0}s)",
        model.id(),
        mse_missing.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
        t0.elapsed().as_secs_f64()
    );
    Ok(out)
}

/// Compute FID/IS on stored samples and MSE on stored imputations for a cell,
/// appending a row to metrics.csv (+ jsonl mirror).
pub fn cmd_evaluate(ctx: &Ctx, model: ModelKind, rate: f64, seed: u64) -> Result<MetricsReport> {
    let clf_path = ensure_classifier(ctx)?;
    let samples_path = cmd_sample(ctx, model, rate, seed, None)?;
    let method = method_for_model(model);
    let imputed_path = cmd_impute(ctx, model, method, rate, seed, None)?;

    let clf = load_classifier_model(&clf_path)?;
    let reference = reference_stats(ctx, &clf_path)?;
    let samples = load_tensors(&samples_path)?;
    let (probs, feats) = clf.probs_and_features(&samples)?;
    let gen_stats = feature_stats(&feats)?;
    let fid = frechet_distance(&gen_stats, &reference)?;
    let is_score = inception_score(&probs)?;

    let n = ctx.r.n_impute_images;
    let split = ctx.test_split(ctx.r.cfg.test_missing_rate, seed, n)?;
    let imputed = load_tensors(&imputed_path)?;
    let truth = to_f32_dyn(&split.images);
    let mask = masks_f32(&split.masks);
    let (mse_all, mse_missing) = imputation_mse(&truth, &imputed, &mask)?;

    let dir = ctx.cell_dir(model.id(), rate, seed);
    let wall = read_timings(&[
        dir.clone(),
        dir.join("samples"),
        dir.join(format!("impute_{}", format!("{method:?}").to_lowercase())),
        ctx.cell_dir("ldm", rate, seed).join("vae"),
    ]);
    let report = MetricsReport {
        model_id: model.id().into(),
        train_missing_rate: rate,
        test_missing_rate: ctx.r.cfg.test_missing_rate,
        seed,
        fid,
        is_score,
        mse_all: Some(mse_all),
        mse_missing,
        wall_time_s: wall,
    };
    report.append(&ctx.r.output_dir.join("metrics.csv"))?;
    println!(
        "evaluate {} mr={rate:.2} seed={seed}: fid={fid:.3} is={is_score:.3} mse_all={mse_all:.5}",
        model.id()
    );
    Ok(report)
}

/// Run the full (model x rate x seed) grid; cells whose manifests verify are
/// skipped. `jobs` worker threads, each cell isolated.
pub fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    // metrics.csv is append-only; start fresh so the sweep owns its rows
    let metrics = ctx.r.output_dir.join("metrics.csv");
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let jsonl = metrics.with_extension("jsonl");
    if jsonl.exists() {
        std::fs::remove_file(&jsonl)?;
    }
    ensure_classifier(ctx)?;
    let cells: Vec<(ModelKind, f64, u64)> = ctx
        .r
        .cfg
        .models
        .iter()
        .flat_map(|&m| {
            ctx.r.cfg.missing_rates.iter().flat_map(move |&r| {
                ctx.r.cfg.seeds.iter().map(move |&s| (m, r, s))
            })
        })
        .collect();
    let jobs = ctx.r.cfg.jobs.max(1);
    if jobs == 1 {
        for (m, r, s) in &cells {
            cmd_evaluate(ctx, *m, *r, *s)?;
        }
    } else {
        // bounded worker pool over the cell queue; metrics rows are written
        // by the coordinator to keep the CSV order deterministic
        let queue = std::sync::Mutex::new(cells.clone().into_iter());
        let failures = std::sync::Mutex::new(Vec::<String>::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some((m, r, s)) = next else { break };
                    if let Err(e) = cmd_evaluate(ctx, m, r, s) {
                        failures.lock().unwrap().push(format!("{} mr={r:.2} seed={s}: {e}", m.id()));
                    }
                });
            }
        });
        let failures = failures.into_inner().unwrap();
        if !failures.is_empty() {
            bail!("sweep failures: {}", failures.join("; "));
        }
    }
    println!("sweep complete: {} cells", cells.len());
    Ok(())
}

/// Aggregate metrics.csv into per-figure CSVs (mean over seeds).
pub fn cmd_export_plots(ctx: &Ctx) -> Result<()> {
    let metrics = ctx.r.output_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics)
        .map_err(|e| anyhow!("no metrics at {}: {e}", metrics.display()))?;
    #[derive(Default, Clone)]
    struct Acc {
        fid: Vec<f64>,
        is: Vec<f64>,
        mse_all: Vec<f64>,
        mse_missing: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 9 {
            continue;
        }
        let key = (f[0].to_string(), f[1].to_string());
        let acc = groups.entry(key).or_default();
        acc.fid.push(f[4].parse().unwrap_or(f64::NAN));
        acc.is.push(f[5].parse().unwrap_or(f64::NAN));
        if let Ok(v) = f[6].parse() {
            acc.mse_all.push(v);
        }
        if let Ok(v) = f[7].parse() {
            acc.mse_missing.push(v);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let dir = ctx.r.output_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut fig1 = String::from("model,train_missing_rate,fid_mean,is_mean,n_seeds\n");
    let mut fig3 = String::from("model,train_missing_rate,test_missing_rate,mse_all_mean,mse_missing_mean,fid_mean,is_mean,n_seeds\n");
    for ((model, rate), acc) in &groups {
        fig1.push_str(&format!(
            "{model},{rate},{},{},{}\n",
            mean(&acc.fid),
            mean(&acc.is),
            acc.fid.len()
        ));
        fig3.push_str(&format!(
            "{model},{rate},{},{},{},{},{},{}\n",
            ctx.r.cfg.test_missing_rate,
            mean(&acc.mse_all),
            mean(&acc.mse_missing),
            mean(&acc.fid),
            mean(&acc.is),
            acc.mse_all.len()
        ));
    }
    std::fs::write(dir.join("sample_quality.csv"), fig1)?;
    std::fs::write(dir.join("imputation_quality.csv"), fig3)?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Timing sidecar (not part of the deterministic artifact set).
fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("timing.json"), format!("{{\"seconds\": {seconds}}}"))?;
    Ok(())
}

fn read_timings(dirs: &[PathBuf]) -> f64 {
    let mut total = 0.0;
    for d in dirs {
        if let Ok(text) = std::fs::read_to_string(d.join("timing.json")) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                total += v["seconds"].as_f64().unwrap_or(0.0);
            }
        }
    }
    total
}
