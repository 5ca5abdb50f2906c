use gelina_tensor::optim::warmup_lr;
use gelina_tensor::{AdamW, Graph, ParamStore, Tensor};

#[test]
fn adamw_minimizes_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(vec![3], vec![3.0, -2.0, 0.5]));
    let target = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]);
    let mut opt = AdamW::new(0.0);
    for _ in 0..2000 {
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(p);
            let t = g.constant(target.clone());
            let d = g.sub(v, t);
            let sq = g.square(d);
            let l = g.sum_all(sq);
            g.backward(l)
        };
        opt.step(&mut store, &grads, 0.01);
    }
    for &x in store.get(p).data() {
        assert!((x - 1.0).abs() < 1e-3, "{x}");
    }
}

#[test]
fn warmup_is_linear_then_constant() {
    assert_eq!(warmup_lr(1.0, 0, 4), 0.25);
    assert_eq!(warmup_lr(1.0, 3, 4), 1.0);
    assert_eq!(warmup_lr(1.0, 100, 4), 1.0);
    assert_eq!(warmup_lr(2.0, 0, 0), 2.0);
}
