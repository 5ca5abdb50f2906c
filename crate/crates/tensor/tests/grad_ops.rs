use gelina_tensor::gradcheck::probe;
use gelina_tensor::nn::{Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use gelina_tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_probes(probes: &[gelina_tensor::gradcheck::Probe], tol: f64) {
    for p in probes {
        assert!(
            p.rel_error(1e-6) < tol,
            "{}[{}]: autodiff {} vs numeric {}",
            p.param,
            p.index,
            p.autodiff,
            p.numeric
        );
    }
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::randn(vec![2, 4, 3], 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(vec![2, 4, 3], 1.0, &mut rng));
    let e = store.add("e", Tensor::randn(vec![2, 3], 1.0, &mut rng));
    let probes = probe(&store, &[a, b, e], 30, 1e-5, 7, |g| {
        let (va, vb, ve) = (g.param(a), g.param(b), g.param(e));
        let s = g.sub(va, vb);
        let m = g.mul(s, va);
        let t = g.tanh(m);
        let sl = g.silu(vb);
        let ge = g.gelu(va);
        let ab = g.abs(sl);
        let x = g.add(t, ab);
        let x = g.add(x, ge);
        let x = g.add_per_batch(x, ve);
        let x = g.scale_per_batch(x, &[0.5, -1.5]);
        let d = g.temporal_diff(x);
        let sq = g.square(d);
        let u = g.upsample(x, 2);
        let mt = g.mean_time(u);
        let l1 = g.mean_all(sq);
        let l2 = g.sum_all(mt);
        let l2 = g.scale(l2, 0.1);
        g.add(l1, l2)
    });
    assert_probes(&probes, 1e-6);
}

#[test]
fn linear_layer_norm_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 5, 6, true, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    store.get_mut(ln.gamma).data_mut()[0] = 1.7;
    let x = store.add("x", Tensor::randn(vec![4, 5], 1.0, &mut rng));
    let ids: Vec<ParamId> = store.ids().collect();
    let probes = probe(&store, &ids, 40, 1e-5, 3, |g| {
        let vx = g.param(x);
        let h = lin.forward(g, vx);
        let h = ln.forward(g, h);
        let left = g.slice_cols(h, 0, 2);
        let right = g.slice_cols(h, 2, 4);
        let c = g.concat_cols(&[right, left]);
        let top = g.slice_rows(c, 0, 1);
        let c2 = g.concat_rows(&[c, top]);
        let rows = g.gather_rows(c2, &[4, 0, 0, 2]);
        let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let wv = g.constant(Tensor::new(vec![6], w));
        let rows = g.mul_row(rows, wv);
        let sq = g.square(rows);
        g.mean_all(sq)
    });
    assert_probes(&probes, 1e-6);
}

#[test]
fn attention_causal_and_cross() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng);
    let x = store.add("x", Tensor::randn(vec![7, 8], 1.0, &mut rng));
    let mem = store.add("mem", Tensor::randn(vec![5, 8], 1.0, &mut rng));
    let ids: Vec<ParamId> = store.ids().collect();
    let segs = [AttnSegment::square(0, 4), AttnSegment::square(4, 3)];
    let cross = [
        AttnSegment { q_start: 0, q_len: 4, k_start: 0, k_len: 2 },
        AttnSegment { q_start: 4, q_len: 3, k_start: 2, k_len: 3 },
    ];
    let probes = probe(&store, &ids, 60, 1e-5, 5, |g| {
        let vx = g.param(x);
        let vm = g.param(mem);
        let h = attn.forward(g, vx, vx, &segs, true);
        let h2 = attn.forward(g, h, vm, &cross, false);
        let sq = g.square(h2);
        g.mean_all(sq)
    });
    assert_probes(&probes, 1e-5);
}

#[test]
fn conv_and_feedforward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv1d::new(&mut store, "conv", 3, 4, 4, 2, 1, &mut rng);
    let ff = FeedForward::new(&mut store, "ff", 4, 6, &mut rng);
    let x = store.add("x", Tensor::randn(vec![2, 8, 3], 1.0, &mut rng));
    let ids: Vec<ParamId> = store.ids().collect();
    let probes = probe(&store, &ids, 40, 1e-5, 9, |g| {
        let vx = g.param(x);
        let h = conv.forward(g, vx);
        assert_eq!(g.shape(h), &[2, 4, 4]);
        let h = ff.forward(g, h);
        let r = g.relu(h);
        let sq = g.square(r);
        g.sum_all(sq)
    });
    assert_probes(&probes, 1e-5);
}

#[test]
fn cross_entropy_zero_weight_rows_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let logits = store.add("logits", Tensor::randn(vec![3, 5], 2.0, &mut rng));
    let probes = probe(&store, &[logits], 15, 1e-5, 2, |g| {
        let l = g.param(logits);
        g.cross_entropy(l, &[1, 4, 0], &[0.5, 0.0, 0.25])
    });
    assert_probes(&probes, 1e-6);
    let mut g = Graph::new(&store);
    let l = g.param(logits);
    let loss = g.cross_entropy(l, &[1, 4, 0], &[0.5, 0.0, 0.25]);
    let grads = g.backward(loss);
    let gl = grads.param(logits).unwrap();
    assert!(gl.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn inference_graph_matches_recording_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng);
    let x = Tensor::<f32>::randn(vec![6, 8], 1.0, &mut rng);
    let run = |g: &mut Graph<'_, f32>| {
        let vx = g.constant(x.clone());
        let h = attn.forward(g, vx, vx, &[AttnSegment::square(0, 6)], true);
        g.value(h).clone()
    };
    let a = run(&mut Graph::new(&store));
    let b = run(&mut Graph::inference(&store));
    assert_eq!(a, b);
}

#[test]
fn causal_attention_rows_match_incremental_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, heads, n) = (8, 2, 5);
    let q = Tensor::<f32>::randn(vec![n, d], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(vec![n, d], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(vec![n, d], 1.0, &mut rng);
    let (full, _) = gelina_tensor::kernels::attention_forward(
        q.data(), k.data(), v.data(), d, heads, &[AttnSegment::square(0, n)], true, n,
    );
    for i in 0..n {
        let seg = AttnSegment { q_start: 0, q_len: 1, k_start: 0, k_len: i + 1 };
        let (row, _) = gelina_tensor::kernels::attention_forward(
            q.row(i), &k.data()[..(i + 1) * d], &v.data()[..(i + 1) * d], d, heads, &[seg], true, 1,
        );
        assert_eq!(&full[i * d..(i + 1) * d], &row[..]);
    }
}
