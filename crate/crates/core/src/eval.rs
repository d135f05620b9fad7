//! Quantitative evaluation: CNN classifier training, classifier-feature
//! Fréchet distance, Inception Score, and imputation MSE.

use crate::ckpt::{CheckpointMeta, CKPT_FORMAT_VERSION};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::net::{Conv, Linear};
use crate::score::{select_rows, TrainConfig};
use lacuna_nn::{Adam, Id, ParamSet, Scalar, Tape, Tensor};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 10;
pub const FEATURE_DIM: usize = 64;

/// CNN classifier: two 3x3 conv layers (32, 64 channels) with max pooling,
/// then two fully connected layers with a 64-unit hidden layer whose
/// activations double as the evaluation features.
pub struct Classifier<F: Scalar> {
    pub params: ParamSet<F>,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    conv1: Conv,
    conv2: Conv,
    fc1: Linear,
    fc2: Linear,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv::new(&mut params, "conv1", 1, 32, 3, 1, false, &mut rng);
        let conv2 = Conv::new(&mut params, "conv2", 32, 64, 3, 1, false, &mut rng);
        let fc1 = Linear::new(&mut params, "fc1", 64 * 7 * 7, FEATURE_DIM, false, &mut rng);
        let fc2 = Linear::new(&mut params, "fc2", FEATURE_DIM, NUM_CLASSES, false, &mut rng);
        Self { params, seed, loss_trace: Vec::new(), conv1, conv2, fc1, fc2 }
    }

    /// Graph forward to (features, logits).
    fn forward_graph(&self, tape: &mut Tape<F>, x: Id) -> (Id, Id) {
        let h = self.conv1.forward(tape, &self.params, x);
        let h = tape.relu(h);
        let h = tape.maxpool2(h);
        let h = self.conv2.forward(tape, &self.params, h);
        let h = tape.relu(h);
        let h = tape.maxpool2(h);
        let b = tape.value(h).shape()[0];
        let flat = tape.reshape(h, &[b, 64 * 7 * 7]);
        let f = self.fc1.forward(tape, &self.params, flat);
        let f = tape.relu(f);
        let logits = self.fc2.forward(tape, &self.params, f);
        (f, logits)
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != [1, 28, 28] {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 28, 28],
                found: x.shape().to_vec(),
                context: "classifier input (excluding batch)".into(),
            });
        }
        Ok(())
    }

    /// Softmax class probabilities `[N, 10]` and penultimate features `[N, 64]`.
    pub fn probs_and_features(&self, x: &Tensor<F>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut probs = Array2::zeros((n, NUM_CLASSES));
        let mut feats = Array2::zeros((n, FEATURE_DIM));
        for start in (0..n).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
            let xb = select_rows(x, &idx);
            let mut tape = Tape::new(false);
            let xid = tape.leaf(xb);
            let (f_id, logit_id) = self.forward_graph(&mut tape, xid);
            let lsm = tape.log_softmax(logit_id);
            let lp = tape.value(lsm);
            let fv = tape.value(f_id);
            for (row, &i) in idx.iter().enumerate() {
                for k in 0..NUM_CLASSES {
                    probs[[i, k]] = lp[[row, k]].f64().exp();
                }
                for k in 0..FEATURE_DIM {
                    feats[[i, k]] = fv[[row, k]].f64();
                }
            }
        }
        Ok((probs, feats))
    }

    pub fn accuracy(&self, images: &Tensor<F>, labels: &[u8]) -> Result<f64> {
        let (probs, _) = self.probs_and_features(images)?;
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == y as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    pub fn checkpoint_meta(&self, train: Option<&TrainConfig>) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CKPT_FORMAT_VERSION,
            kind: "classifier".into(),
            seed: self.seed,
            config: serde_json::json!({ "train": train }),
            loss_trace: self.loss_trace.clone(),
            latent_scale: None,
            params: vec![],
        }
    }

    pub fn from_checkpoint(meta: &CheckpointMeta, params: ParamSet<F>) -> Result<Self> {
        let mut c = Self::new(meta.seed);
        if c.params.len() != params.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        c.params = params;
        c.loss_trace = meta.loss_trace.clone();
        Ok(c)
    }
}

/// Train the evaluation classifier on labeled complete data.
pub fn train_classifier<F: Scalar>(dataset: &ImageBatch, cfg: &TrainConfig) -> Result<Classifier<F>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = dataset.labels.as_ref().ok_or(Error::EmptyDataset)?;
    let mut clf = Classifier::new(cfg.seed);
    let data = dataset.data.mapv(|v| F::c(v as f64)).into_dyn();
    let n = data.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&clf.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = select_rows(&data, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let mut tape = Tape::new(true);
            let xid = tape.leaf(xb);
            let (_, logits) = clf.forward_graph(&mut tape, xid);
            let lp = tape.log_softmax(logits);
            let loss = tape.nll(lp, &yb);
            let loss_val = tape.scalar_value(loss).f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: steps });
            }
            let mut grads = tape.backward(loss);
            let pgrads = tape.param_grads(&mut grads, &clf.params);
            opt.step(&mut clf.params, &pgrads);
            epoch_loss += loss_val;
            steps += 1;
        }
        clf.loss_trace.push(epoch_loss / steps.max(1) as f64);
    }
    Ok(clf)
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

/// Mean and unbiased covariance of row-feature vectors (two-pass,
/// deterministic reduction order).
pub fn feature_stats(features: &Array2<f64>) -> Result<FeatureStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut mean = Array1::<f64>::zeros(d);
    for row in features.rows() {
        mean += &row;
    }
    mean /= n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        let c = &row - &mean;
        for i in 0..d {
            let ci = c[i];
            for j in i..d {
                cov[[i, j]] += ci * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[[i, j]] / (n as f64 - 1.0);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(FeatureStats { mean, cov, count: n })
}

const PSD_TOL: f64 = 1e-6;

/// Symmetric PSD square root via eigendecomposition; eigenvalues in
/// `(-PSD_TOL, 0)` are clipped to zero, anything lower is an error.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::NonPsd { eigenvalue: *v });
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between Gaussian fits:
/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the cross
/// term computed in symmetric form `sqrt(S_a)^T S_b sqrt(S_a)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.mean.len()],
            found: vec![b.mean.len()],
            context: "frechet feature dims".into(),
        });
    }
    let d = a.mean.len();
    let to_dm = |m: &Array2<f64>| DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    let sa = to_dm(&a.cov);
    let sb = to_dm(&b.cov);
    let ra = sqrtm_psd(&sa)?;
    // validate b's covariance the same way
    let _ = sqrtm_psd(&sb)?;
    let inner = &ra * &sb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut tr_cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOL {
            return Err(Error::NonPsd { eigenvalue: v });
        }
        tr_cross += v.max(0.0).sqrt();
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[[i, i]]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_cross)
}

/// Inception score over one split:
/// `exp( mean_i KL(p(y|x_i) || mean_j p(y|x_j)) )`.
pub fn inception_score(probs: &Array2<f64>) -> Result<f64> {
    let (n, k) = probs.dim();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::NotNormalized { row: i, sum: s });
        }
    }
    let mut marginal = Array1::<f64>::zeros(k);
    for row in probs.rows() {
        marginal += &row;
    }
    marginal /= n as f64;
    let mut mean_kl = 0.0;
    for row in probs.rows() {
        let mut kl = 0.0;
        for j in 0..k {
            let p = row[j];
            if p > 0.0 {
                kl += p * (p / marginal[j]).ln();
            }
        }
        mean_kl += kl;
    }
    mean_kl /= n as f64;
    Ok(mean_kl.exp())
}

/// MSE over all pixels and over missing pixels only (absent when nothing is
/// missing).
pub fn imputation_mse<F: Scalar>(
    x_true: &Tensor<F>,
    x_imputed: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<(f64, Option<f64>)> {
    if x_true.shape() != x_imputed.shape() || x_true.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: x_true.shape().to_vec(),
            found: x_imputed.shape().to_vec(),
            context: "imputation_mse".into(),
        });
    }
    let t = x_true.as_slice().unwrap();
    let v = x_imputed.as_slice().unwrap();
    let m = mask.as_slice().unwrap();
    let mut sum_all = 0.0;
    let mut sum_miss = 0.0;
    let mut n_miss = 0usize;
    for i in 0..t.len() {
        let d = (t[i] - v[i]).f64();
        sum_all += d * d;
        if m[i] == F::zero() {
            sum_miss += d * d;
            n_miss += 1;
        }
    }
    let mse_all = sum_all / t.len() as f64;
    let mse_missing = (n_miss > 0).then(|| sum_miss / n_miss as f64);
    Ok((mse_all, mse_missing))
}

/// One evaluation record, mirrored to CSV and JSON.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub model_id: String,
    pub train_missing_rate: f64,
    pub test_missing_rate: f64,
    pub seed: u64,
    pub fid: f64,
    pub is_score: f64,
    pub mse_all: Option<f64>,
    pub mse_missing: Option<f64>,
    pub wall_time_s: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "model_id,train_mr,test_mr,seed,fid,is,mse_all,mse_missing,wall_time_s";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.model_id,
            self.train_missing_rate,
            self.test_missing_rate,
            self.seed,
            self.fid,
            self.is_score,
            fmt(self.mse_all),
            fmt(self.mse_missing),
            self.wall_time_s
        )
    }

    /// Append to a CSV (writing the fixed header first when the file is new)
    /// and mirror the row into a JSON-lines file alongside it.
    pub fn append(&self, csv_path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !csv_path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(csv_path)?;
        if fresh {
            writeln!(f, "{METRICS_CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        let json_path = csv_path.with_extension("jsonl");
        let mut jf = std::fs::OpenOptions::new().create(true).append(true).open(json_path)?;
        writeln!(jf, "{}", serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    #[test]
    fn feature_stats_brute_force() {
        let f = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 5.0, 5.0, 11.0]).unwrap();
        let s = feature_stats(&f).unwrap();
        assert_abs_diff_eq!(s.mean[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean[1], 6.0, epsilon = 1e-12);
        // unbiased covariance by hand
        let cov00 = ((1.0f64 - 3.0).powi(2) + 0.0 + (5.0f64 - 3.0).powi(2)) / 2.0;
        let cov01 = ((1.0 - 3.0) * (2.0 - 6.0) + 0.0 + (5.0 - 3.0) * (11.0 - 6.0)) / 2.0;
        assert_abs_diff_eq!(s.cov[[0, 0]], cov00, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov[[0, 1]], cov01, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov[[1, 0]], cov01, epsilon = 1e-12);
    }

    #[test]
    fn feature_stats_identical_and_permutation() {
        let f = Array2::from_shape_vec((2, 3), vec![0.5; 6]).unwrap();
        let s = feature_stats(&f).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        let a = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let b = Array2::from_shape_vec((3, 2), vec![2.0, 2.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let sa = feature_stats(&a).unwrap();
        let sb = feature_stats(&b).unwrap();
        assert_abs_diff_eq!(sa.mean[0], sb.mean[0], epsilon = 1e-12);
        assert_abs_diff_eq!(sa.cov[[0, 1]], sb.cov[[0, 1]], epsilon = 1e-12);
        assert!(matches!(
            feature_stats(&Array2::zeros((1, 2))),
            Err(Error::TooFewSamples { .. })
        ));
    }

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: Array1::from_vec(vec![mean]),
            cov: Array2::from_shape_vec((1, 1), vec![var]).unwrap(),
            count: 100,
        }
    }

    #[test]
    fn frechet_1d_closed_forms() {
        // N(0,1) vs N(1,1): (0-1)^2 + 1 + 1 - 2 = 1
        let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-6);
        // N(0,1) vs N(0,4): 0 + 1 + 4 - 2*2 = 1
        let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-6);
        // identical -> 0, symmetry, nonnegativity
        let a = stats_1d(0.3, 2.0);
        assert_abs_diff_eq!(frechet_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-9);
        let b = stats_1d(-1.0, 0.5);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-9);
        assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_rejects_non_psd() {
        let bad = FeatureStats {
            mean: Array1::zeros(2),
            cov: Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap(),
            count: 10,
        };
        let good = FeatureStats {
            mean: Array1::zeros(2),
            cov: Array2::eye(2),
            count: 10,
        };
        assert!(matches!(frechet_distance(&bad, &good), Err(Error::NonPsd { .. })));
    }

    #[test]
    fn frechet_monotone_under_interpolation() {
        // moving a Gaussian toward the reference decreases the distance
        let reference = stats_1d(0.0, 1.0);
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let lam = 1.0 - k as f64 / 4.0;
            let s = stats_1d(2.0 * lam, 1.0 + lam);
            let d = frechet_distance(&s, &reference).unwrap();
            assert!(d <= prev + 1e-12, "not monotone at {k}: {d} > {prev}");
            prev = d;
        }
        assert_abs_diff_eq!(prev, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn inception_score_extremes() {
        let uniform = Array2::from_elem((6, 10), 0.1);
        assert_abs_diff_eq!(inception_score(&uniform).unwrap(), 1.0, epsilon = 1e-9);
        // balanced one-hot rows: exp(ln 10) = 10
        let mut onehot = Array2::zeros((10, 10));
        for i in 0..10 {
            onehot[[i, i]] = 1.0;
        }
        assert_abs_diff_eq!(inception_score(&onehot).unwrap(), 10.0, epsilon = 1e-9);
        // permutation invariance
        let mut probs = Array2::from_elem((4, 10), 0.05);
        for i in 0..4 {
            probs[[i, i]] = 0.55;
        }
        let a = inception_score(&probs).unwrap();
        let perm_rows: Vec<_> = [2, 0, 3, 1].iter().map(|&i| probs.row(i).to_owned()).collect();
        let views: Vec<_> = perm_rows.iter().map(|r| r.view()).collect();
        let permuted = ndarray::stack(ndarray::Axis(0), &views).unwrap();
        let b = inception_score(&permuted).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!((1.0..=10.0).contains(&a));
        // unnormalized rows rejected
        let bad = Array2::from_elem((2, 10), 0.2);
        assert!(matches!(inception_score(&bad), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn imputation_mse_cases() {
        let truth = Tensor::from_shape_vec(IxDyn(&[1, 4]), vec![0.5f64, 0.5, 0.5, 0.5]).unwrap();
        let mut imputed = truth.clone();
        let mask = Tensor::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let (all, miss) = imputation_mse(&truth, &imputed, &mask).unwrap();
        assert_eq!((all, miss), (0.0, Some(0.0)));
        // one wrong missing pixel with error 0.5: mse_missing 0.25, mse_all 0.0625
        imputed[[0, 3]] = 1.0;
        let (all, miss) = imputation_mse(&truth, &imputed, &mask).unwrap();
        assert_abs_diff_eq!(all, 0.0625, epsilon = 1e-12);
        assert_abs_diff_eq!(miss.unwrap(), 0.25, epsilon = 1e-12);
        // clamp invariant implies mse_all = mse_missing * (#missing/#total)
        assert_abs_diff_eq!(all, miss.unwrap() * (1.0 / 4.0), epsilon = 1e-12);
        // nothing missing -> mse_missing absent
        let full = Tensor::from_elem(IxDyn(&[1, 4]), 1.0f64);
        let (_, miss) = imputation_mse(&truth, &imputed, &full).unwrap();
        assert!(miss.is_none());
    }

    #[test]
    fn untrained_classifier_is_chance_level() {
        let clf = Classifier::<f32>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let x = lacuna_nn::tape::randn_like::<f32>(&[n, 1, 28, 28], &mut rng)
            .mapv(|v: f32| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10) as u8).collect();
        let acc = clf.accuracy(&x, &labels).unwrap();
        assert!(acc < 0.35, "untrained accuracy suspiciously high: {acc}");
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let report = MetricsReport {
            model_id: "ddpm".into(),
            train_missing_rate: 0.3,
            test_missing_rate: 0.5,
            seed: 42,
            fid: 12.5,
            is_score: 7.25,
            mse_all: Some(0.01),
            mse_missing: None,
            wall_time_s: 3.5,
        };
        report.append(&path).unwrap();
        report.append(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert!(lines[1].starts_with("ddpm,0.3,0.5,42,12.5,7.25,0.01,,"));
        let jsonl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let back: MetricsReport = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
