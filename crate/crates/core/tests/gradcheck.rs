use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smartcast_core::lstm::{
    backward, gradient_check, gradient_check_with, seq2seq_forward, GradCheckOptions, Loss, ModelShape, Seq2SeqModel,
    Seq2SeqParams,
};

fn sample(shape: &ModelShape, len: usize, seed: u64) -> (Seq2SeqModel, Vec<f64>, Vec<f64>) {
    let model = Seq2SeqModel::init(shape, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = (0..len * shape.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = (0..shape.horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
    (model, x, y)
}

fn soil_toy() -> ModelShape {
    ModelShape {
        input_dim: 4,
        encoder_hidden: 8,
        decoder_hidden: 8,
        dense_hidden: 8,
        horizon: 3,
    }
}

fn index_toy() -> ModelShape {
    ModelShape {
        input_dim: 2,
        encoder_hidden: 5,
        decoder_hidden: 5,
        dense_hidden: 5,
        horizon: 1,
    }
}

#[test]
fn soil_toy_full_sweep() {
    let (m, x, y) = sample(&soil_toy(), 6, 1);
    let r = gradient_check(&m, &x, &y, &GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{:?}", r.worst);
    assert_eq!(r.checked, m.params.num_params());
    assert_eq!(r.per_tensor.len(), 28);
}

#[test]
fn index_toy_full_sweep_both_losses() {
    for loss in [Loss::Mse, Loss::Mae] {
        let (m, x, y) = sample(&index_toy(), 5, 2);
        let opts = GradCheckOptions {
            loss,
            ..Default::default()
        };
        let r = gradient_check(&m, &x, &y, &opts).unwrap();
        assert!(r.passed, "{loss:?} {:?}", r.worst);
    }
}

#[test]
fn minimum_has_zero_gradient() {
    let (m, x, _) = sample(&soil_toy(), 6, 3);
    let (pred, cache) = seq2seq_forward(&m, &x).unwrap();
    let g = backward(&m, &cache, &pred, Loss::Mse).unwrap();
    assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
}

#[test]
fn head_out_bias_gradient() {
    let (m, x, y) = sample(&soil_toy(), 6, 4);
    let (pred, cache) = seq2seq_forward(&m, &x).unwrap();
    let g = backward(&m, &cache, &y, Loss::Mse).unwrap();
    let expect: f64 = pred.iter().zip(&y).map(|(p, t)| 2.0 / 3.0 * (p - t)).sum();
    assert!((g.head_out.bias[0] - expect).abs() < 1e-14);
}

#[test]
fn stale_cache_rejected() {
    let (mut m, x, y) = sample(&index_toy(), 5, 5);
    let (_, cache) = seq2seq_forward(&m, &x).unwrap();
    m.params.decoder.b[0][0] += 0.01;
    assert!(backward(&m, &cache, &y, Loss::Mse).is_err());
}

#[test]
fn doubled_entry_is_flagged() {
    let (m, x, y) = sample(&soil_toy(), 6, 6);
    let (_, cache) = seq2seq_forward(&m, &x).unwrap();
    let mut g: Seq2SeqParams = backward(&m, &cache, &y, Loss::Mse).unwrap();
    g.encoder.w[2].data[5] *= 2.0;
    let r = gradient_check_with(&m, &x, &y, &g, &GradCheckOptions::default()).unwrap();
    assert!(!r.passed);
    let worst = r.worst.unwrap();
    assert_eq!(worst.tensor, "encoder.W_o");
    assert_eq!(worst.index, 5);
}
