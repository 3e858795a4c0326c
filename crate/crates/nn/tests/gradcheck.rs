//! Central finite-difference checks for every differentiable op.

use audiocap_nn::layers::{BiLstm, ConvBlock, MultiHeadSelfAttention, TransformerBlock};
use audiocap_nn::{Graph, NodeId, ParamBuilder, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Checks d f / d inputs against central differences.
fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::detached();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let mut g = Graph::detached();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == k {
                            x.data_mut()[i] += delta;
                        }
                        g.constant(x)
                    })
                    .collect();
                let out = f(&mut g, &ids);
                g.value(out).to_scalar()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
            assert!(err < tol, "input {k} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum so every output element gets a distinct cotangent.
fn weighted_sum(g: &mut Graph<'_>, x: NodeId) -> NodeId {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let w = g.constant(w);
    let y = g.mul(x, w);
    g.sum_all(y)
}

#[test]
fn elementwise_ops() {
    check(
        vec![rand_tensor(&[3, 4], 1), rand_tensor(&[3, 4], 2), rand_tensor(&[4], 3)],
        |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.mul(a, v[2]);
            let c = g.sub(b, v[0]);
            let d = g.tanh(c);
            let e = g.sigmoid(v[1]);
            let f = g.mul(d, e);
            let r = g.exp(f);
            let s = g.affine(r, 0.5, 2.0);
            let l = g.ln(s);
            weighted_sum(g, l)
        },
        1e-6,
    );
}

#[test]
fn relu_abs_clamp_away_from_kinks() {
    let x = Tensor::new(vec![6], vec![-1.3, -0.4, 0.3, 0.8, 1.7, 2.5]);
    check(
        vec![x],
        |g, v| {
            let a = g.relu(v[0]);
            let b = g.abs(v[0]);
            let c = g.clamp(v[0], -0.5, 2.0);
            let s = g.add(a, b);
            let s = g.add(s, c);
            weighted_sum(g, s)
        },
        1e-6,
    );
}

#[test]
fn softmax_and_log_softmax() {
    check(
        vec![rand_tensor(&[2, 3, 5], 4)],
        |g, v| {
            let a = g.softmax(v[0]);
            let b = g.log_softmax(v[0]);
            let s = g.add(a, b);
            weighted_sum(g, s)
        },
        1e-6,
    );
}

#[test]
fn matmul_variants() {
    check(
        vec![rand_tensor(&[2, 3, 4], 5), rand_tensor(&[4, 5], 6), rand_tensor(&[2, 5, 4], 7)],
        |g, v| {
            let a = g.matmul(v[0], v[1]);
            let b = g.matmul_t(v[0], v[2], true);
            let s = g.add(a, b);
            weighted_sum(g, s)
        },
        1e-6,
    );
    check(
        vec![rand_tensor(&[2, 3, 4], 8), rand_tensor(&[2, 4, 2], 9)],
        |g, v| {
            let a = g.matmul(v[0], v[1]);
            weighted_sum(g, a)
        },
        1e-6,
    );
}

#[test]
fn shape_ops() {
    check(
        vec![rand_tensor(&[2, 3, 4], 10), rand_tensor(&[2, 2, 4], 11)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let n = g.narrow(c, 1, 1, 3);
            let p = g.permute(n, &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let s = g.sum_axis(r, 0);
            let m = g.max_axis(v[0], 2);
            let ms = weighted_sum(g, m);
            let ss = weighted_sum(g, s);
            g.add(ms, ss)
        },
        1e-6,
    );
}

#[test]
fn gather_scatters_back() {
    check(
        vec![rand_tensor(&[5, 3], 12)],
        |g, v| {
            let r = g.gather(v[0], &[4, 1, 1, 0]);
            weighted_sum(g, r)
        },
        1e-6,
    );
}

#[test]
fn conv_and_pool() {
    check(
        vec![rand_tensor(&[2, 2, 6, 5], 13), rand_tensor(&[3, 2, 3, 3], 14), rand_tensor(&[3], 15)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1);
            let p = g.max_pool2(y);
            weighted_sum(g, p)
        },
        1e-5,
    );
}

#[test]
fn conv_without_padding() {
    check(
        vec![rand_tensor(&[1, 2, 5, 5], 16), rand_tensor(&[2, 2, 3, 3], 17)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 0);
            weighted_sum(g, y)
        },
        1e-6,
    );
}

#[test]
fn layer_norm_grad() {
    check(
        vec![rand_tensor(&[3, 6], 18), rand_tensor(&[6], 19), rand_tensor(&[6], 20)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            weighted_sum(g, y)
        },
        1e-5,
    );
}

/// Parameter gradients of composite layers versus central differences.
fn check_params(store: &ParamStore, input: Tensor, f: impl Fn(&mut Graph<'_>, NodeId) -> NodeId) {
    let mut g = Graph::train(store);
    let x = g.constant(input.clone());
    let y = f(&mut g, x);
    let loss = weighted_sum(&mut g, y);
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads);
    assert!(!pg.is_empty());
    let h = 1e-6;
    for (pid, grad) in pg {
        let n = grad.numel();
        for i in (0..n).step_by((n / 7).max(1)) {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(pid).data_mut()[i] += delta;
                let mut g = Graph::train(&s);
                let x = g.constant(input.clone());
                let y = f(&mut g, x);
                let l = weighted_sum(&mut g, y);
                g.value(l).to_scalar()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            assert!(err < 1e-5, "{} [{i}]: analytic {a} numeric {numeric}", store.name(pid));
        }
    }
}

#[test]
fn conv_block_with_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("c"), 2, 3);
    check_params(&store, rand_tensor(&[2, 2, 4, 6], 22), |g, x| block.forward(g, x));
}

#[test]
fn bilstm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("l"), 3, 2, 2);
    check_params(&store, rand_tensor(&[2, 4, 3], 24), |g, x| {
        let out = lstm.forward(g, x);
        let s = g.concat(&[out.h, out.c], 1);
        let o = g.reshape(out.outputs, &[2, 16]);
        g.concat(&[s, o], 1)
    });
}

#[test]
fn attention_and_transformer_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let (mhsa, block) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let a = MultiHeadSelfAttention::new(&mut pb.pp("a"), 4, 2);
        let b = TransformerBlock::new(&mut pb.pp("t"), 4, 2, 8);
        (a, b)
    };
    check_params(&store, rand_tensor(&[2, 3, 4], 26), |g, x| {
        let y = mhsa.forward(g, x);
        block.forward(g, y)
    });
}

#[test]
fn batch_norm_running_stats_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("c"), 1, 2);
    let mut g = Graph::train(&store);
    let x = g.constant(rand_tensor(&[2, 1, 4, 4], 28));
    block.forward(&mut g, x);
    let updates = g.take_buffer_updates();
    assert_eq!(updates.len(), 2);
    // running mean moves 10% towards the batch mean
    let rm = &updates[0].value;
    assert!(rm.data().iter().all(|v| v.is_finite()));
    assert!(rm.data().iter().any(|v| *v != 0.0));
    // inference graph never queues updates
    let mut gi = Graph::inference(&store);
    let x = gi.constant(rand_tensor(&[2, 1, 4, 4], 28));
    block.forward(&mut gi, x);
    assert!(gi.take_buffer_updates().is_empty());
}
