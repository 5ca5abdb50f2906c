mod common;

use common::{random_flow_batch, tiny_flow_config, ExactField};
use gelina_core::flow::{euler_sample, flow_losses, FlowConfig, FlowNet, VelocityField};
use gelina_core::Error;
use gelina_tensor::gradcheck::probe;
use gelina_tensor::{AdamW, Graph, Tensor};

#[test]
fn endpoints_of_the_path_are_exact() {
    let cfg = tiny_flow_config();
    let mut b = random_flow_batch(&cfg, 2, 2, 1);
    b.t = vec![0.0, 1.0];
    let xt = b.interpolant();
    let half = xt.len() / 2;
    assert_eq!(&xt.data()[..half], &b.x0.data()[..half]);
    assert_eq!(&xt.data()[half..], &b.x1.data()[half..]);
}

#[test]
fn exact_field_gives_zero_losses() {
    let cfg = tiny_flow_config();
    let b = random_flow_batch(&cfg, 2, 3, 2);
    let field = ExactField::new(b.x0.clone(), b.x1.clone());
    let mut g = Graph::inference(field.params());
    let l = flow_losses(&mut g, &field, &b, &cfg).unwrap();
    for v in [l.fm, l.vel, l.geo, l.total] {
        assert!(g.value(v).data()[0].abs() < 1e-12, "{}", g.value(v).data()[0]);
    }
}

#[test]
fn euler_recovers_data_under_the_exact_field() {
    let cfg = tiny_flow_config();
    let b = random_flow_batch(&cfg, 1, 3, 3);
    let field = ExactField::new(b.x0.clone(), b.x1.clone());
    for steps in [1, 10, 100] {
        let x = euler_sample(&field, &b.x1, &b.cond, steps).unwrap();
        let err = x
            .data()
            .iter()
            .zip(b.x0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{steps} steps: {err}");
    }
}

#[test]
fn single_step_is_one_full_euler_step() {
    let cfg = tiny_flow_config();
    let net = FlowNet::<f64>::new(cfg.clone(), 4).unwrap();
    let b = random_flow_batch(&cfg, 1, 2, 5);
    let x = euler_sample(&net, &b.x1, &b.cond, 1).unwrap();
    let mut g = Graph::inference(net.params());
    let xt = g.constant(b.x1.clone());
    let c = g.constant(b.cond.clone());
    let v = net.velocity(&mut g, xt, &[1.0], c).unwrap();
    let expect: Vec<f64> = b.x1.data().iter().zip(g.value(v).data()).map(|(a, v)| a - v).collect();
    assert_eq!(x.data(), expect.as_slice());
}

#[test]
fn one_frame_is_too_short_for_the_velocity_term() {
    let cfg = tiny_flow_config();
    let mut b = random_flow_batch(&cfg, 1, 1, 6);
    b.x0 = Tensor::new(vec![1, 1, 157], b.x0.data()[..157].to_vec());
    b.x1 = b.x0.clone();
    let field = ExactField::new(b.x0.clone(), b.x1.clone());
    let mut g = Graph::inference(field.params());
    assert!(matches!(
        flow_losses(&mut g, &field, &b, &cfg),
        Err(Error::SequenceTooShort(1))
    ));
}

#[test]
fn constant_offset_is_invisible_to_the_velocity_term() {
    let cfg = tiny_flow_config();
    let b = random_flow_batch(&cfg, 1, 2, 7);
    // x0_hat = x0 + 0.3 everywhere: field = (x_t - x0 - 0.3) / t
    let t = b.t[0];
    let xt = b.interpolant();
    let d: Vec<f64> = xt
        .data()
        .iter()
        .zip(b.x0.data())
        .map(|(x, a)| (x - a - 0.3) / t)
        .collect();
    let field = ExactField::new(Tensor::new(b.x0.shape().to_vec(), vec![0.0; d.len()]), Tensor::new(b.x0.shape().to_vec(), d));
    let mut g = Graph::inference(field.params());
    let l = flow_losses(&mut g, &field, &b, &cfg).unwrap();
    assert!(g.value(l.vel).data()[0] < 1e-20);
    assert!(g.value(l.fm).data()[0] > 0.0);
}

#[test]
fn losses_are_nonnegative_and_bounded() {
    let cfg = tiny_flow_config();
    let net = FlowNet::<f64>::new(cfg.clone(), 8).unwrap();
    for seed in 0..5 {
        let b = random_flow_batch(&cfg, 2, 2, 10 + seed);
        let mut g = Graph::inference(net.params());
        let l = flow_losses(&mut g, &net, &b, &cfg).unwrap();
        let v = |x| g.value(x).data()[0];
        assert!(v(l.fm) >= 0.0 && v(l.vel) >= 0.0);
        assert!((0.0..=std::f64::consts::PI.powi(2)).contains(&v(l.geo)));
        assert!(v(l.total) >= v(l.fm));
        let zero = FlowConfig {
            lambda_vel: 0.0,
            lambda_geo: 0.0,
            ..cfg.clone()
        };
        let mut g = Graph::inference(net.params());
        let l = flow_losses(&mut g, &net, &b, &zero).unwrap();
        assert_eq!(g.value(l.total).data()[0], g.value(l.fm).data()[0]);
    }
}

#[test]
fn each_loss_term_matches_finite_differences() {
    let cfg = tiny_flow_config();
    let net = FlowNet::<f64>::new(cfg.clone(), 9).unwrap();
    assert!(net.num_params() <= 5000, "{} parameters", net.num_params());
    let b = random_flow_batch(&cfg, 2, 2, 11);
    let ids: Vec<_> = net.params().ids().collect();
    for term in 0..3 {
        let probes = probe(net.params(), &ids, 20, 1e-6, 12 + term as u64, |g| {
            let l = flow_losses(g, &net, &b, &cfg).unwrap();
            [l.fm, l.vel, l.geo][term]
        });
        for p in &probes {
            assert!(p.rel_error(1e-6) < 1e-3, "term {term}: {p:?}");
        }
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = FlowConfig {
        hidden: 16,
        heads: 2,
        kernel: 3,
        ..tiny_flow_config()
    };
    let fb = random_flow_batch(&cfg, 2, 2, 13);
    let pairs: Vec<_> = (0..2)
        .map(|i| {
            let per = fb.x0.len() / 2;
            let m = Tensor::new(vec![8, 157], fb.x0.data()[i * per..(i + 1) * per].to_vec());
            let c = Tensor::new(vec![2, 2], fb.cond.data()[i * 4..(i + 1) * 4].to_vec());
            (m, c)
        })
        .collect();
    let run = || {
        let mut net = FlowNet::<f64>::new(cfg.clone(), 14).unwrap();
        let mut opt = AdamW::new(0.0);
        (0..120)
            .map(|s| net.train_step(&pairs, &mut opt, 3e-3, s).unwrap().total)
            .collect::<Vec<_>>()
    };
    let a = run();
    let head: f64 = a[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = a[110..].iter().sum::<f64>() / 10.0;
    assert!(a.iter().all(|v| v.is_finite()));
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(a, run());
}
