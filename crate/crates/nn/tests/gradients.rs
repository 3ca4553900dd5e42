use gaidrl_nn::{
    attention_forward, dense_forward, grad_check, init_params, Activation, AttentionVars, Graph,
    LayerSpec, Mlp, ParamCursor, ParamSet, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Independent finite-difference oracle: perturbs one scalar at a time and
/// re-evaluates the loss with a plain forward pass.
fn central_difference(params: &ParamSet, loss: &dyn Fn(&ParamSet) -> f64, step: f64) -> Vec<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::new();
    for t in 0..params.len() {
        let mut grads = Vec::new();
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig;
            grads.push((up - down) / (2.0 * step));
        }
        out.push(grads);
    }
    out
}

#[test]
fn two_layer_mlp_backward_matches_finite_differences() {
    let mlp = Mlp::new(&[4, 6, 3], Activation::Tanh, Activation::Identity, 21).unwrap();
    let x = random_rows(1, 5, 4);
    let target = random_rows(2, 5, 3);
    let loss_of = |p: &ParamSet| -> f64 {
        let mut m = mlp.clone();
        m.params_mut().copy_from(p).unwrap();
        let y = m.predict(x.clone()).unwrap();
        y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 15.0
    };
    let fd = central_difference(mlp.params(), &loss_of, 1e-5);

    let g = Graph::new();
    let vars = g.bind(mlp.params());
    let xi = g.input(x.clone());
    let y = mlp.forward(&g, &vars, xi).unwrap();
    let t = g.input(target.clone());
    let l = g.mse(y, t).unwrap();
    let grads = g.backward(l).unwrap().for_vars(&vars);
    for (ad, fd) in grads.iter().zip(&fd) {
        for (a, f) in ad.data().iter().zip(fd) {
            assert!((a - f).abs() / f.abs().max(1e-8) <= 1e-4, "{a} vs {f}");
        }
    }
}

#[test]
fn linear_network_is_exact() {
    let p = init_params(&LayerSpec::dense(3, 2, Activation::Identity), 4).unwrap();
    let x = random_rows(5, 4, 3);
    let err = grad_check(&p, 1e-5, |g, v| {
        let xi = g.input(x.clone());
        let y = dense_forward(g, v[0], v[1], xi, Activation::Identity)?;
        g.sum(y)
    })
    .unwrap();
    assert!(err <= 1e-8, "linear grad_check error {err}");
}

fn mlp_loss(mlp: &Mlp, x: &Tensor, target: &Tensor) -> impl Fn(&Graph, &[Var]) -> Result<Var> {
    let (mlp, x, target) = (mlp.clone(), x.clone(), target.clone());
    move |g, v| {
        let xi = g.input(x.clone());
        let y = mlp.forward(g, v, xi)?;
        let t = g.input(target.clone());
        g.mse(y, t)
    }
}

#[test]
fn tanh_mlp_grad_check_ten_seeds() {
    for seed in 0..10 {
        let mlp = Mlp::new(&[5, 8, 3], Activation::Tanh, Activation::Tanh, seed).unwrap();
        let x = random_rows(100 + seed, 6, 5);
        let t = random_rows(200 + seed, 6, 3);
        let err = grad_check(mlp.params(), 1e-5, mlp_loss(&mlp, &x, &t)).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn relu_mlp_grad_check_ten_seeds() {
    for seed in 0..10 {
        let mlp = Mlp::new(&[5, 8, 3], Activation::Relu, Activation::Identity, seed).unwrap();
        let x = random_rows(300 + seed, 6, 5);
        let t = random_rows(400 + seed, 6, 3);
        let err = grad_check(mlp.params(), 1e-5, mlp_loss(&mlp, &x, &t)).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn layer_norm_grad_check_ten_seeds() {
    for seed in 0..10 {
        let mut p = init_params(&LayerSpec::layer_norm(6), seed).unwrap();
        // move gain and shift off their trivial initial values
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let x = random_rows(500 + seed, 4, 6);
        let w = random_rows(600 + seed, 4, 6);
        let err = grad_check(&p, 1e-5, |g, v| {
            let xi = g.input(x.clone());
            let y = g.layer_norm(xi, v[0], v[1])?;
            let wi = g.input(w.clone());
            let z = g.mul(y, wi)?;
            let z = g.tanh(z)?;
            g.sum(z)
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn attention_block_grad_check_ten_seeds() {
    let (batch, seq, d, heads) = (2, 4, 8, 2);
    for seed in 0..10 {
        let p = init_params(&LayerSpec::attention(d, heads), seed).unwrap();
        let x = random_rows(700 + seed, batch * seq, d);
        let w = random_rows(800 + seed, batch * seq, d);
        let err = grad_check(&p, 1e-5, |g, v| {
            let av = AttentionVars::from_cursor(&mut ParamCursor::new(v))?;
            let xi = g.input(x.clone());
            let y = attention_forward(g, &av, xi, batch, heads)?;
            let wi = g.input(w.clone());
            let z = g.mul(y, wi)?;
            let z = g.tanh(z)?;
            g.sum(z)
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn attention_input_gradients_match_finite_differences() {
    // tokens as a trainable leaf: checks dQ/dK/dV routing into the input
    let (batch, seq, d, heads) = (1, 3, 4, 2);
    let p = init_params(&LayerSpec::attention(d, heads), 3).unwrap();
    let mut tokens = ParamSet::new();
    tokens.push("x", random_rows(9, batch * seq, d));
    let frozen = p.clone();
    let err = grad_check(&tokens, 1e-5, |g, v| {
        let pv = g.bind_frozen(&frozen);
        let av = AttentionVars::from_cursor(&mut ParamCursor::new(&pv))?;
        let y = attention_forward(g, &av, v[0], batch, heads)?;
        let y = g.square(y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_rejects_large_epsilon() {
    let p = init_params(&LayerSpec::dense(2, 2, Activation::Identity), 1).unwrap();
    assert!(grad_check(&p, 1e-2, |g, v| g.sum(v[0])).is_err());
}
