use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{derive_seed, ParamCursor, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    LayerNorm,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub heads: usize,
}

impl LayerSpec {
    pub fn dense(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            input_dim,
            output_dim,
            activation,
            heads: 1,
        }
    }

    pub fn layer_norm(dim: usize) -> Self {
        Self {
            kind: LayerKind::LayerNorm,
            input_dim: dim,
            output_dim: dim,
            activation: Activation::Identity,
            heads: 1,
        }
    }

    pub fn attention(model_dim: usize, heads: usize) -> Self {
        Self {
            kind: LayerKind::Attention,
            input_dim: model_dim,
            output_dim: model_dim,
            activation: Activation::Identity,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.heads == 0 {
            return Err(NnError::Config(format!("non-positive dimension in {self:?}")));
        }
        match self.kind {
            LayerKind::Dense => Ok(()),
            LayerKind::LayerNorm | LayerKind::Attention if self.input_dim != self.output_dim => {
                Err(NnError::Config(format!(
                    "{:?} needs equal input and output dims, got {} and {}",
                    self.kind, self.input_dim, self.output_dim
                )))
            }
            LayerKind::Attention if self.output_dim % self.heads != 0 => Err(NnError::Config(
                format!("model dim {} not divisible by {} heads", self.output_dim, self.heads),
            )),
            _ => Ok(()),
        }
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Fresh parameters for one layer. Weights are Glorot-uniform, biases and
/// layer-norm shifts are zero, layer-norm gains are one.
///
/// Attention layers hold, in order: `ln.gamma`, `ln.beta`, then `w`/`b` pairs
/// for the query, key, value, and output projections. The key projection has
/// no bias: softmax over keys is invariant to it.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    match spec.kind {
        LayerKind::Dense => {
            p.push("w", glorot_uniform(&mut rng, spec.input_dim, spec.output_dim));
            p.push("b", Tensor::zeros(&[spec.output_dim]));
        }
        LayerKind::LayerNorm => {
            p.push("gamma", Tensor::filled(&[spec.input_dim], 1.0));
            p.push("beta", Tensor::zeros(&[spec.input_dim]));
        }
        LayerKind::Attention => {
            let d = spec.input_dim;
            p.push("ln.gamma", Tensor::filled(&[d], 1.0));
            p.push("ln.beta", Tensor::zeros(&[d]));
            for name in ["q", "k", "v", "o"] {
                p.push(format!("w{name}"), glorot_uniform(&mut rng, d, d));
                if name != "k" {
                    p.push(format!("b{name}"), Tensor::zeros(&[d]));
                }
            }
        }
    }
    Ok(p)
}

pub fn apply_activation(g: &Graph, x: Var, activation: Activation) -> Result<Var> {
    match activation {
        Activation::Identity => Ok(x),
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
        Activation::Softmax => g.softmax(x),
    }
}

/// `activation(x · W + b)` for a batch of row vectors.
pub fn dense_forward(g: &Graph, w: Var, b: Var, x: Var, activation: Activation) -> Result<Var> {
    let (_, cols) = g.dims2(x);
    let (fan_in, _) = g.dims2(w);
    if cols != fan_in {
        return Err(NnError::Shape(format!(
            "dense: input width {cols}, layer expects {fan_in}"
        )));
    }
    let z = g.matmul(x, w)?;
    let z = g.add_row(z, b)?;
    apply_activation(g, z, activation)
}

/// Graph handles for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn from_cursor(c: &mut ParamCursor<'_>) -> Result<Self> {
        let v = c.take(9)?;
        Ok(Self {
            ln_gamma: v[0],
            ln_beta: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
        })
    }
}

/// Pre-norm self-attention block: `x + Wo · MHA(LN(x))`.
///
/// `tokens` is `[batch * seq, model]`; each consecutive run of `seq` rows is one
/// sequence.
pub fn attention_forward(
    g: &Graph,
    p: &AttentionVars,
    tokens: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let (rows, _) = g.dims2(tokens);
    if rows == 0 || batch == 0 || rows % batch != 0 {
        return Err(NnError::Shape(format!(
            "attention over {rows} token rows in {batch} sequences"
        )));
    }
    let h = g.layer_norm(tokens, p.ln_gamma, p.ln_beta)?;
    let q = dense_forward(g, p.wq, p.bq, h, Activation::Identity)?;
    let k = g.matmul(h, p.wk)?;
    let v = dense_forward(g, p.wv, p.bv, h, Activation::Identity)?;
    let a = g.attention(q, k, v, batch, heads)?;
    let o = dense_forward(g, p.wo, p.bo, a, Activation::Identity)?;
    g.add(tokens, o)
}

/// Pre-norm cross-attention: queries `[batch * q_len, model]` attend to a
/// `context` of `[batch * kv_len, model]`; residual on the queries.
pub fn cross_attention_forward(
    g: &Graph,
    p: &AttentionVars,
    queries: Var,
    context: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let h = g.layer_norm(queries, p.ln_gamma, p.ln_beta)?;
    let q = dense_forward(g, p.wq, p.bq, h, Activation::Identity)?;
    let k = g.matmul(context, p.wk)?;
    let v = dense_forward(g, p.wv, p.bv, context, Activation::Identity)?;
    let a = g.attention(q, k, v, batch, heads)?;
    let o = dense_forward(g, p.wo, p.bo, a, Activation::Identity)?;
    g.add(queries, o)
}

/// Multi-layer perceptron with one hidden activation and one output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: ParamSet,
}

impl Mlp {
    /// `dims` lists the input width, every hidden width, then the output width.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnError::Config("an MLP needs at least input and output dims".into()));
        }
        let mut params = ParamSet::new();
        for (i, w) in dims.windows(2).enumerate() {
            let act = if i + 2 == dims.len() { output } else { hidden };
            let spec = LayerSpec::dense(w[0], w[1], act);
            params.extend_prefixed(&format!("l{i}"), init_params(&spec, derive_seed(seed, i as u64))?);
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut c = ParamCursor::new(vars);
        self.forward_cursor(g, &mut c, x)
    }

    pub fn forward_cursor(&self, g: &Graph, c: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let act = if i + 1 == layers { self.output } else { self.hidden };
            let w = c.next_var()?;
            let b = c.next_var()?;
            h = dense_forward(g, w, b, h, act)?;
        }
        Ok(h)
    }

    /// Forward pass on plain rows without building gradients.
    pub fn predict(&self, x: Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let xi = g.input(x);
        let y = self.forward(&g, &p, xi)?;
        Ok(g.value(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn fresh_dense_bias_is_zero() {
        let p = init_params(&LayerSpec::dense(5, 3, Activation::Relu), 11).unwrap();
        assert!(p.get("b").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = LayerSpec::attention(8, 2);
        let a = init_params(&spec, 3).unwrap();
        let b = init_params(&spec, 3).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn glorot_bound_holds() {
        let p = init_params(&LayerSpec::dense(4, 8, Activation::Identity), 7).unwrap();
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn zero_dimension_is_config_error() {
        let r = init_params(&LayerSpec::dense(0, 3, Activation::Identity), 1);
        assert!(matches!(r, Err(NnError::Config(_))));
        let r = init_params(&LayerSpec::attention(6, 4), 1);
        assert!(matches!(r, Err(NnError::Config(_))));
    }

    #[test]
    fn dense_identity_and_constant_cases() {
        let g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let w = g.input(identity(3));
        let b = g.input(Tensor::zeros(&[3]));
        let y = dense_forward(&g, w, b, x, Activation::Identity).unwrap();
        assert_eq!(g.value(y), g.value(x).reshape(vec![2, 3]).unwrap());

        let w0 = g.input(Tensor::zeros(&[3, 2]));
        let c = g.input(Tensor::row(vec![0.25, -4.0]));
        let y = dense_forward(&g, w0, c, x, Activation::Identity).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0, 0.25, -4.0]);

        let wt = g.input(Tensor::filled(&[3, 2], 0.9));
        let y = dense_forward(&g, wt, c, x, Activation::Tanh).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        let w = g.input(Tensor::zeros(&[3, 1]));
        let b = g.input(Tensor::zeros(&[1]));
        assert!(matches!(
            dense_forward(&g, w, b, x, Activation::Identity),
            Err(NnError::Shape(_))
        ));
    }

    fn attention_setup(seed: u64) -> ParamSet {
        init_params(&LayerSpec::attention(8, 2), seed).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut p = attention_setup(5);
        *p.get_mut("wv").unwrap() = identity(8);
        *p.get_mut("wo").unwrap() = identity(8);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = Graph::new();
        let vars = g.bind_frozen(&p);
        let av = AttentionVars::from_cursor(&mut ParamCursor::new(&vars)).unwrap();
        let t = g.input(Tensor::row(x.clone()));
        let y = attention_forward(&g, &av, t, 1, 2).unwrap();
        // residual + identity-projected value of the normalized token
        let ln = g.layer_norm(t, av.ln_gamma, av.ln_beta).unwrap();
        let expect: Vec<f64> = x.iter().zip(g.value(ln).data()).map(|(a, b)| a + b).collect();
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_simplex_and_equivariant() {
        let p = attention_setup(9);
        let seq = 5;
        let tokens: Vec<Vec<f64>> = (0..seq)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64 * 0.37).cos()).collect())
            .collect();
        let run = |rows: &[Vec<f64>]| {
            let g = Graph::new();
            let vars = g.bind_frozen(&p);
            let av = AttentionVars::from_cursor(&mut ParamCursor::new(&vars)).unwrap();
            let t = g.input(Tensor::from_rows(rows).unwrap());
            let h = g.layer_norm(t, av.ln_gamma, av.ln_beta).unwrap();
            let q = dense_forward(&g, av.wq, av.bq, h, Activation::Identity).unwrap();
            let k = g.matmul(h, av.wk).unwrap();
            let v = dense_forward(&g, av.wv, av.bv, h, Activation::Identity).unwrap();
            let a = g.attention(q, k, v, 1, 2).unwrap();
            let w = g.attention_weights(a).unwrap();
            let y = attention_forward(&g, &av, t, 1, 2).unwrap();
            (g.value(y), w)
        };
        let (y, w) = run(&tokens);
        for row in w.data().chunks(seq) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| tokens[i].clone()).collect();
        let (yp, _) = run(&permuted);
        for (out_row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = yp.data()[out_row * 8 + c];
                let b = y.data()[src * 8 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_empty_sequence() {
        let p = attention_setup(1);
        let g = Graph::new();
        let vars = g.bind_frozen(&p);
        let av = AttentionVars::from_cursor(&mut ParamCursor::new(&vars)).unwrap();
        let t = g.input(Tensor::row(vec![0.0; 8]));
        assert!(matches!(attention_forward(&g, &av, t, 0, 2), Err(NnError::Shape(_))));
        assert!(matches!(attention_forward(&g, &av, t, 2, 2), Err(NnError::Shape(_))));
    }

    #[test]
    fn mlp_predict_matches_graph_forward() {
        let m = Mlp::new(&[3, 5, 2], Activation::Relu, Activation::Tanh, 4).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let y = m.predict(x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}
