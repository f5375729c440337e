use super::gradcheck::{finite_difference, max_relative_error};
use super::layers::{multi_head_attention, Attention, Transformer};
use super::*;
use crate::error::{Error, Result};
use crate::rng;

const FD_STEP: f64 = 1e-5;

/// Checks `sum(build(inputs) * R)` against finite differences for random inputs.
fn check_op<F>(shapes: &[(usize, usize)], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = rng::seeded(seed);
    let mut store = ParameterStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("in{i}"), Tensor::randn(&[r, c], 1.0, &mut rng)))
        .collect();
    let eval = |store: &ParameterStore, rng_seed: u64| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let weights = Tensor::randn(&shape, 1.0, &mut rng::seeded(rng_seed));
        let w = g.constant(weights);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        Ok((g, loss))
    };
    let (g, loss) = eval(&store, seed + 1).unwrap();
    store.zero_grad();
    g.backward(loss, &mut store).unwrap();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    let numeric = finite_difference(&mut store, &ids, FD_STEP, |s| {
        let (g, loss) = eval(s, seed + 1)?;
        Ok(g.value(loss).data()[0])
    })
    .unwrap();
    max_relative_error(&analytic, &numeric, 1e-4)
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let checks: Vec<(&str, f64)> = vec![
        ("matmul", check_op(&[(3, 4), (4, 2)], 1, |g, v| g.matmul(v[0], v[1]))),
        ("matmul_nt", check_op(&[(3, 4), (5, 4)], 2, |g, v| g.matmul_nt(v[0], v[1]))),
        ("transpose", check_op(&[(3, 4)], 3, |g, v| Ok(g.transpose(v[0])))),
        ("add", check_op(&[(2, 3), (2, 3)], 4, |g, v| g.add(v[0], v[1]))),
        ("sub", check_op(&[(2, 3), (2, 3)], 5, |g, v| g.sub(v[0], v[1]))),
        ("mul", check_op(&[(2, 3), (2, 3)], 6, |g, v| g.mul(v[0], v[1]))),
        ("add_row", check_op(&[(4, 3), (1, 3)], 7, |g, v| g.add_row(v[0], v[1]))),
        ("mul_row", check_op(&[(4, 3), (1, 3)], 8, |g, v| g.mul_row(v[0], v[1]))),
        ("scale", check_op(&[(2, 2)], 9, |g, v| Ok(g.scale(v[0], -1.7)))),
        ("gelu", check_op(&[(3, 5)], 10, |g, v| Ok(g.gelu(v[0])))),
        ("softmax_rows", check_op(&[(3, 5)], 11, |g, v| Ok(g.softmax_rows(v[0])))),
        (
            "layer_norm",
            check_op(&[(4, 6), (1, 6), (1, 6)], 12, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("gather_rows", check_op(&[(4, 3)], 13, |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]))),
        ("concat_rows", check_op(&[(2, 3), (1, 3)], 14, |g, v| g.concat_rows(&[v[0], v[1], v[0]]))),
        ("concat_cols", check_op(&[(2, 3), (2, 1)], 15, |g, v| g.concat_cols(&[v[1], v[0]]))),
        ("slice_cols", check_op(&[(3, 6)], 16, |g, v| g.slice_cols(v[0], 2, 3))),
        ("col_sum", check_op(&[(4, 3)], 17, |g, v| Ok(g.col_sum(v[0])))),
        ("sum_squares", check_op(&[(2, 3)], 18, |g, v| Ok(g.sum_squares(v[0])))),
        ("mse", check_op(&[(2, 3), (2, 3)], 19, |g, v| g.mse(v[0], v[1]))),
        ("reshape", check_op(&[(2, 6)], 20, |g, v| g.reshape(v[0], 3, 4))),
        (
            "multi_head_attention",
            check_op(&[(5, 8), (5, 8), (5, 8)], 21, |g, v| multi_head_attention(g, v[0], v[1], v[2], 2)),
        ),
    ];
    for (name, err) in checks {
        assert!(err < 1e-6, "{name}: max relative error {err:e}");
    }
}

#[test]
fn composed_transformer_gradient() {
    let mut rng = rng::seeded(3);
    let mut store = ParameterStore::new();
    let x = store.add("x", Tensor::randn(&[5, 8], 1.0, &mut rng));
    let tf = Transformer::new(&mut store, "tf", 8, 2, 2, &mut rng).unwrap();
    // Larger init than the default so every path carries signal.
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        if store.name(id).ends_with("weight") {
            store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
        }
    }
    let target = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let f = |s: &ParameterStore| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let xv = g.param(s, x);
        let y = tf.forward(&mut g, s, xv)?;
        let t = g.constant(target.clone());
        let l = g.mse(y, t)?;
        Ok((g, l))
    };
    let (g, l) = f(&store).unwrap();
    store.zero_grad();
    g.backward(l, &mut store).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    let numeric = finite_difference(&mut store, &ids, FD_STEP, |s| {
        let (g, l) = f(s)?;
        Ok(g.value(l).data()[0])
    })
    .unwrap();
    let err = max_relative_error(&analytic, &numeric, 1e-4);
    assert!(err < 1e-4, "composed relative error {err:e}");
}

#[test]
fn scalar_chain_rule_example() {
    // d/dw (w*x - y)^2 at w=2, x=3, y=5 is 2 * (6 - 5) * 3 = 6.
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::scalar(2.0));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let x = g.constant(Tensor::scalar(3.0));
    let y = g.constant(Tensor::scalar(5.0));
    let wx = g.mul(wv, x).unwrap();
    let loss = g.mse(wx, y).unwrap();
    assert_eq!(g.value(loss).data()[0], 1.0);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).data()[0], 6.0);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::scalar(2.0));
    let mut g = Graph::new();
    let _ = g.param(&store, w);
    let c = g.constant(Tensor::scalar(4.0));
    let loss = g.sum_squares(c);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w).data()[0], 0.0);
}

#[test]
fn backward_without_forward_errors() {
    let mut store = ParameterStore::new();
    let g = Graph::new();
    let mut other = Graph::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(v, &mut store), Err(Error::NoForward)));
}

#[test]
fn simple_op_values() {
    let mut g = Graph::new();
    let row = g.constant(Tensor::matrix(2, 4, vec![3.0; 8]).unwrap());
    let s = g.softmax_rows(row);
    assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let mut store = ParameterStore::new();
    let gamma = store.add("g", Tensor::full(&[1, 4], 1.0));
    let beta = store.add("b", Tensor::zeros(&[1, 4]));
    let gv = g.param(&store, gamma);
    let bv = g.param(&store, beta);
    for eps in [1e-5, 1e-2, 1.0] {
        let ln = g.layer_norm(row, gv, bv, eps).unwrap();
        assert!(g.value(ln).data().iter().all(|&v| v == 0.0));
    }

    let z = g.constant(Tensor::scalar(0.0));
    let gz = g.gelu(z);
    assert_eq!(g.value(gz).data()[0], 0.0);
    let m = g.mse(row, row).unwrap();
    assert_eq!(g.value(m).data()[0], 0.0);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = rng::seeded(9);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[6, 7], 5.0, &mut rng));
    let s = g.softmax_rows(x);
    for r in 0..6 {
        let row = g.value(s).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = rng::seeded(5);
    let mut store = ParameterStore::new();
    let attn = Attention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = attn.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(y).shape(), &[6, 8]);
    let xp = g.gather_rows(xv, &perm).unwrap();
    let yp = attn.forward(&mut g, &store, xp).unwrap();
    let y_then_p = g.gather_rows(y, &perm).unwrap();
    assert!(g.value(yp).max_abs_diff(g.value(y_then_p)) < 1e-12);

    assert!(Attention::new(&mut store, "bad", 8, 3, &mut rng).is_err());
    let q = g.constant(Tensor::zeros(&[2, 6]));
    assert!(multi_head_attention(&mut g, q, q, q, 4).is_err());
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let mut rng = rng::seeded(1);
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::randn(&[3, 3], 1.0, &mut rng));
    let before = store.value(p).clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut store, 1e-2).unwrap();
    let factor = 1.0 - 1e-2 * 1e-2;
    for (a, b) in store.value(p).data().iter().zip(before.data()) {
        assert_eq!(*a, b * factor);
    }
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::full(&[1, 4], 0.5));
    store.grad_mut(p).data_mut().copy_from_slice(&[3.0, -0.2, 1e-3, -40.0]);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    opt.step(&mut store, 0.1).unwrap();
    // m_hat = g and v_hat = g^2 after one step, so |update| = lr * |g| / (|g| + eps).
    for (&v, &g) in store.value(p).data().iter().zip(&[3.0, -0.2, 1e-3, -40.0f64]) {
        let expected = 0.5 - 0.1 * g / (g.abs() + 1e-8);
        assert!((v - expected).abs() < 1e-15);
        assert!(((0.5 - v).abs() - 0.1).abs() < 1e-5);
    }
}

#[test]
fn adamw_zero_lr_is_identity_and_runs_are_deterministic() {
    let run = |lr: f64| {
        let mut rng = rng::seeded(42);
        let mut store = ParameterStore::new();
        let p = store.add("p", Tensor::randn(&[4, 4], 1.0, &mut rng));
        let mut opt = AdamW::new(AdamWConfig::default());
        let start = store.value(p).clone();
        for _ in 0..10 {
            store.zero_grad();
            let g = Tensor::randn(&[4, 4], 1.0, &mut rng);
            store.grad_mut(p).data_mut().copy_from_slice(g.data());
            opt.step(&mut store, lr).unwrap();
        }
        (start, store.value(p).clone())
    };
    let (start, end) = run(0.0);
    assert_eq!(start, end);
    assert_eq!(run(1e-2).1, run(1e-2).1);
}

#[test]
fn schedule_endpoints() {
    let s = LrSchedule::new(1e-2, 400, 4000).unwrap();
    assert_eq!(s.lr_at(0).unwrap(), 0.0);
    assert_eq!(s.lr_at(400).unwrap(), 1e-2);
    assert!(s.lr_at(4000).unwrap().abs() < 1e-18);
    assert!((s.lr_at(400 + 1800).unwrap() - 5e-3).abs() < 1e-15);
    assert!((s.lr_at(200).unwrap() - 5e-3).abs() < 1e-15);
    assert!(matches!(s.lr_at(4001), Err(Error::InvalidArgument(_))));
    assert!(LrSchedule::new(1.0, 10, 10).is_err());
    let no_warm = LrSchedule::new(2.0, 0, 10).unwrap();
    assert_eq!(no_warm.lr_at(0).unwrap(), 2.0);
    // Monotone decay after warmup.
    let lrs: Vec<f64> = (400..=4000).map(|t| s.lr_at(t).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}
