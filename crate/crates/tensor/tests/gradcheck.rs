use cagan_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Projects a tensor-valued node onto a fixed random direction so every op can be
/// checked through a scalar.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(g.shape(v), &mut rng, -1.0, 1.0);
    let r = g.input(r);
    let p = g.mul(v, r);
    g.sum_all(p)
}

/// Compares reverse-mode gradients for every input against central differences.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vs);
        (g, vs, out)
    };
    let (g, vs, out) = eval(&inputs);
    let grads = g.backward(out);
    let h = 1e-6;
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            numeric[j] = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(1e-3, f64::max);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        assert!(
            err / scale < 1e-4,
            "input {i}: max error {err} (scale {scale})\nanalytic {:?}\nnumeric {:?}",
            analytic.data(),
            numeric
        );
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = rand_tensor(&[2, 3], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[2, 3], &mut r, 0.5, 1.5);
    check(vec![a, b], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let t = g.tanh(m);
        let sg = g.sigmoid(t);
        let e = g.exp(sg);
        let l = g.log(v[1]);
        let q = g.square(l);
        let lr = g.leaky_relu(v[0], 0.2);
        let rl = g.relu(v[0]);
        let sc = g.scale(rl, 3.0);
        let all = g.add(e, q);
        let all = g.add(all, lr);
        let all = g.add(all, sc);
        let all = g.add_scalar(all, 0.3);
        project(g, all, 1)
    });
}

#[test]
fn reductions_reshape_concat() {
    let mut r = rng();
    let a = rand_tensor(&[2, 2, 3, 3], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[2, 1, 3, 3], &mut r, -1.0, 1.0);
    check(vec![a, b], |g, v| {
        let c = g.concat(&[v[0], v[1]]);
        let m = g.mean_per_sample(c);
        let rs = g.reshape(c, &[2, 27]);
        let p = project(g, rs, 3);
        let q = project(g, m, 4);
        let mean = g.mean_all(v[1]);
        let s = g.add(p, q);
        g.add(s, mean)
    });
}

#[test]
fn conv2d_with_stride_and_padding() {
    let mut r = rng();
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 0, 1)] {
        let x = rand_tensor(&[2, 3, 6, 6], &mut r, -1.0, 1.0);
        let w = rand_tensor(&[4, 3, k, k], &mut r, -0.5, 0.5);
        let b = rand_tensor(&[4], &mut r, -0.5, 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            project(g, y, 5)
        });
    }
}

#[test]
fn conv_transpose2d() {
    let mut r = rng();
    for &(stride, pad, k, op) in &[(2, 1, 4, 0), (2, 1, 3, 1), (1, 1, 3, 0)] {
        let x = rand_tensor(&[2, 3, 3, 3], &mut r, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut r, -0.5, 0.5);
        let b = rand_tensor(&[2], &mut r, -0.5, 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, op);
            project(g, y, 6)
        });
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng();
    let x = rand_tensor(&[1, 2, 6, 6], &mut r, -1.0, 1.0);
    let y = rand_tensor(&[1, 3, 3, 3], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 4, 4], &mut r, -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, yv, wv) = (g.input(x.clone()), g.input(y.clone()), g.input(w.clone()));
    let cx = g.conv2d(xv, wv, None, 2, 1);
    // conv_transpose weight layout is [Ci, Co, k, k]; the same buffer read as
    // [Co_fwd, Ci_fwd, k, k] gives the adjoint.
    let wt = g.input(w.clone().reshape([3, 2, 4, 4]));
    let ty = g.conv_transpose2d(yv, wt, None, 2, 1, 0);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn broadcast_conv_matches_tiled_conv() {
    let mut r = rng();
    let cond = rand_tensor(&[2, 3], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[4, 3, 3, 3], &mut r, -1.0, 1.0);
    let (h, wd) = (5, 4);
    let tiled = Tensor::from_fn([2, 3, h, wd], |i| cond.data()[i / (h * wd)]);
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
        let mut g = Graph::new();
        let (cv, wv, tv) = (g.input(cond.clone()), g.input(w.clone()), g.input(tiled.clone()));
        let a = g.broadcast_conv(cv, wv, h, wd, stride, pad);
        let b = g.conv2d(tv, wv, None, stride, pad);
        assert_eq!(g.shape(a), g.shape(b));
        let err = g.value(a).zip_map(g.value(b), |x, y| x - y).max_abs();
        assert!(err < 1e-12, "stride {stride} pad {pad}: {err}");
    }
    check(vec![cond, w], |g, v| {
        let y = g.broadcast_conv(v[0], v[1], h, wd, 2, 1);
        project(g, y, 8)
    });
}

#[test]
fn linear_and_pooling() {
    let mut r = rng();
    let x = rand_tensor(&[2, 2, 4, 4], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut r, -1.0, 1.0);
    check(vec![x, w, b], |g, v| {
        let mp = g.max_pool2(v[0]);
        let ap = g.avg_pool2(v[0]);
        let up = g.upsample2(ap);
        let gp = g.global_avg_pool(v[0]);
        let lin = g.linear(gp, v[1], Some(v[2]));
        let a = project(g, mp, 9);
        let b2 = project(g, up, 10);
        let c = project(g, lin, 11);
        let s = g.add(a, b2);
        g.add(s, c)
    });
}

#[test]
fn instance_and_batch_norm() {
    let mut r = rng();
    let x = rand_tensor(&[3, 2, 3, 3], &mut r, -1.0, 2.0);
    let gamma = rand_tensor(&[2], &mut r, 0.5, 1.5);
    let beta = rand_tensor(&[2], &mut r, -0.5, 0.5);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let y = g.instance_norm(v[0], v[1], v[2], 1e-5);
        project(g, y, 12)
    });
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5);
        project(g, y, 13)
    });
    check(vec![x, gamma, beta], |g, v| {
        let y = g.fixed_norm(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5);
        project(g, y, 14)
    });
}

#[test]
fn classification_losses() {
    let mut r = rng();
    let logits = rand_tensor(&[3, 4], &mut r, -2.0, 2.0);
    let target = Tensor::new([3, 4], vec![1., 0., 0., 0., 0., 0., 1., 0., 0.2, 0.3, 0.5, 0.]);
    let t2 = target.clone();
    check(vec![logits.clone()], move |g, v| {
        g.softmax_cross_entropy(v[0], t2.clone(), Some(vec![1.0, 2.0, 0.5]))
    });
    let bt = Tensor::new([3, 4], vec![1., 0., 1., 0., 0., 0., 1., 1., 0., 1., 0., 0.]);
    let w = rand_tensor(&[3, 4], &mut r, 0.5, 2.0);
    check(vec![logits], move |g, v| {
        g.bce_with_logits(v[0], bt.clone(), Some(w.clone()))
    });
}

#[test]
fn heteroscedastic_likelihood() {
    let mut r = rng();
    let logits = rand_tensor(&[3, 4], &mut r, -2.0, 2.0);
    let logvar = rand_tensor(&[3, 4], &mut r, -2.0, 1.0);
    let noise = rand_tensor(&[5, 3, 4], &mut r, -2.0, 2.0);
    let onehot = Tensor::new([3, 4], vec![1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0.]);
    let multi = Tensor::new([3, 4], vec![1., 0., 1., 0., 0., 0., 1., 1., 0., 1., 0., 0.]);
    for (target, exclusive) in [(onehot, true), (multi, false)] {
        let n = noise.clone();
        check(vec![logits.clone(), logvar.clone()], move |g, v| {
            g.heteroscedastic_nll(
                v[0],
                v[1],
                n.clone(),
                target.clone(),
                Some(vec![1.0, 0.5, 2.0]),
                exclusive,
            )
        });
    }
}

#[test]
fn heteroscedastic_with_zero_variance_matches_cross_entropy() {
    let mut r = rng();
    let logits = rand_tensor(&[4, 3], &mut r, -2.0, 2.0);
    let target = Tensor::new([4, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0.]);
    let mut g = Graph::new();
    let l = g.input(logits);
    let lv = g.input(Tensor::full([4, 3], -80.0));
    let noise = rand_tensor(&[3, 4, 3], &mut r, -1.0, 1.0);
    let h = g.heteroscedastic_nll(l, lv, noise, target.clone(), None, true);
    let ce = g.softmax_cross_entropy(l, target, None);
    assert!((g.value(h).item() - g.value(ce).item()).abs() < 1e-9);
}

#[test]
fn soft_nmi_gradient_and_range() {
    let mut r = rng();
    let x = rand_tensor(&[2, 1, 4, 4], &mut r, 0.05, 0.95);
    let y = rand_tensor(&[2, 1, 4, 4], &mut r, 0.05, 0.95);
    check(vec![x.clone(), y.clone()], |g, v| {
        let n = g.soft_nmi(v[0], v[1], 8, 1.0);
        project(g, n, 15)
    });
    let mut g = Graph::new();
    let (xv, yv) = (g.input(x.clone()), g.input(y));
    let same = g.soft_nmi(xv, xv, 8, 0.5);
    let diff = g.soft_nmi(xv, yv, 8, 0.5);
    for k in 0..2 {
        let s = g.value(same).data()[k];
        let d = g.value(diff).data()[k];
        assert!((1.0..=2.0 + 1e-12).contains(&d), "nmi {d}");
        assert!(s > d, "self nmi {s} should exceed cross nmi {d}");
    }
}

#[test]
fn frozen_store_yields_no_param_gradient() {
    let mut r = rng();
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", rand_tensor(&[2, 3], &mut r, -1.0, 1.0));
    let mut g = Graph::new();
    g.freeze(&store);
    let x = g.input_with_grad(rand_tensor(&[4, 3], &mut r, -1.0, 1.0));
    let w = g.param(&store, id);
    let y = g.linear(x, w, None);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.for_store(&store)[0].is_none());
    assert!(grads.get(x).is_some());
}
