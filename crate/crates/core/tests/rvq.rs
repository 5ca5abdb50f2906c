use gelina_core::motion::{MotionSequence, FEATURE_DIM, MOTION_FPS};
use gelina_core::rvq::{GestureTokenizer, RvqCodebooks, RvqConfig};
use gelina_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_books(seed: u64) -> RvqCodebooks<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RvqCodebooks::random(4, 16, 6, 0.8, &mut rng)
}

proptest! {
    #[test]
    fn residual_energy_never_increases(
        seed in 0u64..1000,
        latent in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let q = random_books(seed).quantize(&latent, 4).unwrap();
        let input: f64 = latent.iter().map(|v| v * v).sum();
        prop_assert!(q.residual_energy[0] <= input);
        for w in q.residual_energy.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn shallow_quantization_is_a_prefix(
        seed in 0u64..1000,
        latent in proptest::collection::vec(-3.0f64..3.0, 12),
        levels in 1usize..=4,
    ) {
        let books = random_books(seed);
        let full = books.quantize(&latent, 4).unwrap();
        let part = books.quantize(&latent, levels).unwrap();
        prop_assert_eq!(&part.tokens.levels[..], &full.tokens.levels[..levels]);
        prop_assert_eq!(&part.residual_energy[..], &full.residual_energy[..levels]);
    }
}

#[test]
fn selected_codewords_sum_to_the_quantized_latent() {
    let books = random_books(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let latent: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let q = books.quantize(&latent, 4).unwrap();
    let lookup = books.lookup(&q.tokens).unwrap();
    for (a, b) in lookup.iter().zip(&q.quantized) {
        assert!((a - b).abs() < 1e-12);
    }
    let err: f64 = latent.iter().zip(&q.quantized).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((err - q.residual_energy[3]).abs() < 1e-9);
}

fn tiny_tokenizer() -> GestureTokenizer<f64> {
    GestureTokenizer::new(
        RvqConfig {
            levels: 2,
            codebook_size: 6,
            latent_dim: 4,
            hidden: 6,
            ..RvqConfig::desk()
        },
        21,
    )
    .unwrap()
}

fn generic_batch(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<_> = (0..2)
        .map(|_| {
            let data = (0..8 * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            MotionSequence::new(data, MOTION_FPS).unwrap()
        })
        .collect();
    GestureTokenizer::batch_tensor(&clips).unwrap()
}

/// Gradient through the straight-through quantizer equals the finite-difference
/// gradient of `decoder(encoder(θ) + fixed offset)`, the offset being the
/// quantizer correction at the current parameters.
#[test]
fn straight_through_matches_identity_at_quantized_point() {
    let mut tok = tiny_tokenizer();
    let batch = generic_batch(22);
    let (grads, offset) = {
        let mut g = Graph::new(tok.params());
        let pass = tok.forward(&mut g, &batch, None).unwrap();
        let offset = Tensor::new(
            pass.latents.shape().to_vec(),
            pass.quantized
                .data()
                .iter()
                .zip(pass.latents.data())
                .map(|(q, z)| q - z)
                .collect(),
        );
        (g.backward(pass.reconstruction), offset)
    };
    let oracle = |tok: &GestureTokenizer<f64>| {
        let mut g = Graph::inference(tok.params());
        let pass = tok.forward(&mut g, &batch, Some(&offset)).unwrap();
        g.value(pass.reconstruction).data()[0]
    };
    let encoder: Vec<_> = tok
        .params()
        .ids()
        .filter(|&id| tok.params().name(id).starts_with("enc."))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut nonzero = 0;
    for _ in 0..20 {
        let id = encoder[rng.random_range(0..encoder.len())];
        let i = rng.random_range(0..tok.params().get(id).len());
        let orig = tok.params().get(id).data()[i];
        let h = 1e-6;
        tok.params_mut().get_mut(id).data_mut()[i] = orig + h;
        let plus = oracle(&tok);
        tok.params_mut().get_mut(id).data_mut()[i] = orig - h;
        let minus = oracle(&tok);
        tok.params_mut().get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let auto = grads.param(id).unwrap().data()[i];
        let rel = (numeric - auto).abs() / numeric.abs().max(auto.abs()).max(1e-8);
        assert!(rel < 1e-4, "{} [{i}]: {auto} vs {numeric}", tok.params().name(id));
        if auto != 0.0 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 0, "encoder gradient vanished");
}
