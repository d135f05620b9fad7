use lacuna_core::score::*;
use lacuna_core::sde::DiffusionSchedule;
use lacuna_nn::tape::randn_like;
use lacuna_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    lacuna_nn::tune_allocator();
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // desk pixel net f32
    let mut model = ScoreModel::<f32>::new(ScoreNetConfig::pixel_desk(), schedule, 1).unwrap();
    let x: Tensor<f32> = randn_like(&[64, 1, 28, 28], &mut rng);
    let cfg = TrainConfig { batch_size: 64, epochs: 1, learning_rate: 2e-4, seed: 1, missing_rate: 0.0 };
    // warmup + timed train steps (64*4 images = 4 steps)
    let x256: Tensor<f32> = randn_like(&[256, 1, 28, 28], &mut rng);
    let t0 = Instant::now();
    train_score_on(&mut model, &x256, None, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("pixel desk train: {:.1} ms/img ({} params)", dt / 256.0 * 1e3, model.params.total_elems());

    // eval forward (sampling step cost)
    let times = vec![0.5f64; 64];
    let t0 = Instant::now();
    let iters = 8;
    for _ in 0..iters {
        let _ = model.score_forward(&x, &times).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("pixel desk eval: {:.2} ms/img", dt / (64.0 * iters as f64) * 1e3);

    // latent desk net f32
    let mut lmodel = ScoreModel::<f32>::new(ScoreNetConfig::latent_desk(), schedule, 1).unwrap();
    let z256: Tensor<f32> = randn_like(&[256, 2, 7, 7], &mut rng);
    let t0 = Instant::now();
    train_score_on(&mut lmodel, &z256, None, &cfg).unwrap();
    println!("latent desk train: {:.2} ms/img ({} params)", t0.elapsed().as_secs_f64() / 256.0 * 1e3, lmodel.params.total_elems());

    // classifier-scale conv stack via eval::train_classifier on 256 images
    use lacuna_core::data::ImageBatch;
    use ndarray::Array4;
    let imgs = ImageBatch {
        data: Array4::from_elem((256, 1, 28, 28), 0.3f32),
        labels: Some((0..256).map(|i| (i % 10) as u8).collect()),
    };
    let t0 = Instant::now();
    let _ = lacuna_core::eval::train_classifier::<f32>(&imgs, &cfg).unwrap();
    println!("classifier train: {:.2} ms/img", t0.elapsed().as_secs_f64() / 256.0 * 1e3);
}
