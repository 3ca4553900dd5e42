//! Reverse-diffusion action sampler.

use gaidrl_nn::{Activation, Graph, Mlp, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::transformer::{TokenLayout, TransformerConfig, TransformerDenoiser};
use crate::error::{Error, Result};

pub const TIME_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// `steps` betas spaced linearly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            k => (0..k).map(|i| start + (end - start) * i as f64 / (k - 1) as f64).collect(),
        };
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `k` is 1-based.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Closed-form forward marginal `sqrt(ab_k) a + sqrt(1 - ab_k) eps`.
    pub fn noised(&self, a: f64, k: usize, eps: f64) -> f64 {
        let ab = self.alpha_bar(k);
        ab.sqrt() * a + (1.0 - ab).sqrt() * eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    /// Weight of the denoising regularizer toward buffer actions.
    pub eta: f64,
    /// Logit scale applied to the squashed sample in the discrete heads.
    pub logit_scale: f64,
    pub transformer: TransformerConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_start: 1e-4,
            beta_end: 0.1,
            hidden: 64,
            eta: 0.05,
            logit_scale: 5.0,
            transformer: TransformerConfig {
                model_dim: 32,
                heads: 2,
                blocks: 1,
            },
        }
    }
}

/// Sinusoidal embedding of timestep `k`.
pub fn time_embedding(k: usize) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    let half = TIME_EMBED_DIM / 2;
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out[2 * i] = (k as f64 * freq).sin();
        out[2 * i + 1] = (k as f64 * freq).cos();
    }
    out
}

fn time_rows(ks: &[usize]) -> Tensor {
    let data = ks.iter().flat_map(|&k| time_embedding(k)).collect();
    Tensor::matrix(ks.len(), TIME_EMBED_DIM, data).expect("time rows")
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("gaussian shape")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    /// `eps(x, s, t)` as an MLP on `[x, s, embed(t)]`.
    Mlp(Mlp),
    Transformer(TransformerDenoiser),
}

/// Conditioning computed once per chain.
#[derive(Debug, Clone, Copy)]
pub enum Condition {
    Features(Var),
    Tokens(Var),
}

impl Denoiser {
    pub fn params(&self) -> &ParamSet {
        match self {
            Denoiser::Mlp(m) => m.params(),
            Denoiser::Transformer(t) => t.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Denoiser::Mlp(m) => m.params_mut(),
            Denoiser::Transformer(t) => t.params_mut(),
        }
    }

    pub fn condition(&self, g: &Graph, vars: &[Var], feats: &Tensor) -> Result<Condition> {
        match self {
            Denoiser::Mlp(_) => Ok(Condition::Features(g.input(feats.clone()))),
            Denoiser::Transformer(t) => Ok(Condition::Tokens(t.encode(g, vars, feats)?)),
        }
    }

    pub fn eps(&self, g: &Graph, vars: &[Var], cond: Condition, x: Var, ks: &[usize]) -> Result<Var> {
        let time = time_rows(ks);
        match (self, cond) {
            (Denoiser::Mlp(m), Condition::Features(s)) => {
                let t = g.input(time);
                let inp = g.concat(&[x, s, t])?;
                Ok(m.forward(g, vars, inp)?)
            }
            (Denoiser::Transformer(t), Condition::Tokens(tok)) => t.eps(g, vars, tok, x, &time),
            _ => Err(Error::Usage("conditioning does not match the denoiser".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    schedule: NoiseSchedule,
    action_dim: usize,
    feature_dim: usize,
    denoiser: Denoiser,
}

impl DiffusionPolicy {
    pub fn new(schedule: NoiseSchedule, denoiser: Denoiser, feature_dim: usize, action_dim: usize) -> Self {
        Self {
            schedule,
            action_dim,
            feature_dim,
            denoiser,
        }
    }

    pub fn with_mlp(config: &DiffusionConfig, feature_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?;
        let h = config.hidden;
        let mlp = Mlp::new(
            &[action_dim + feature_dim + TIME_EMBED_DIM, h, h, action_dim],
            Activation::Relu,
            Activation::Identity,
            seed,
        )?;
        Ok(Self::new(schedule, Denoiser::Mlp(mlp), feature_dim, action_dim))
    }

    pub fn with_transformer(
        config: &DiffusionConfig,
        layout: TokenLayout,
        action_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?;
        let den = TransformerDenoiser::new(layout, config.transformer.clone(), action_dim, TIME_EMBED_DIM, seed)?;
        Ok(Self::new(schedule, Denoiser::Transformer(den), layout.feature_dim(), action_dim))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn params(&self) -> &ParamSet {
        self.denoiser.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.denoiser.params_mut()
    }

    /// Runs the reverse chain from `x_K ~ N(0, I)` and returns `tanh(x_0)`,
    /// `[batch, action_dim]`. Gradients flow through every step when `vars`
    /// are trainable bindings.
    pub fn sample(&self, g: &Graph, vars: &[Var], feats: &Tensor, rng: &mut ChaCha8Rng) -> Result<Var> {
        let cond = self.condition(g, vars, feats)?;
        self.sample_from(g, vars, cond, feats.rows(), rng)
    }

    /// State conditioning shared by [`Self::sample_from`] and
    /// [`Self::denoise_loss_from`].
    pub fn condition(&self, g: &Graph, vars: &[Var], feats: &Tensor) -> Result<Condition> {
        let f = feats.cols();
        if f != self.feature_dim {
            return Err(Error::Usage(format!(
                "diffusion policy conditioned on {} features, got {f}",
                self.feature_dim
            )));
        }
        self.denoiser.condition(g, vars, feats)
    }

    pub fn sample_from(&self, g: &Graph, vars: &[Var], cond: Condition, b: usize, rng: &mut ChaCha8Rng) -> Result<Var> {
        let s = &self.schedule;
        let mut x = g.input(gaussian(rng, &[b, self.action_dim]));
        for k in (1..=s.steps()).rev() {
            let eps = self.denoiser.eps(g, vars, cond, x, &vec![k; b])?;
            let coef = s.beta(k) / (1.0 - s.alpha_bar(k)).sqrt();
            let mean = g.sub(x, g.scale(eps, coef)?)?;
            x = g.scale(mean, 1.0 / s.alpha(k).sqrt())?;
            if k > 1 {
                let mut z = gaussian(rng, &[b, self.action_dim]);
                let sigma = s.beta(k).sqrt();
                z.data_mut().iter_mut().for_each(|v| *v *= sigma);
                x = g.add(x, g.input(z))?;
            }
        }
        Ok(g.tanh(x)?)
    }

    /// `mean_i || eps_hat(sqrt(ab_k) a_i + sqrt(1 - ab_k) eps, s_i, k_i) - eps ||^2`
    /// with `k_i` uniform on `1..=K`.
    pub fn denoise_loss(
        &self,
        g: &Graph,
        vars: &[Var],
        feats: &Tensor,
        clean: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if feats.rows() != clean.rows() {
            return Err(Error::Usage("denoising batch shape mismatch".into()));
        }
        let cond = self.condition(g, vars, feats)?;
        self.denoise_loss_from(g, vars, cond, clean, rng)
    }

    pub fn denoise_loss_from(
        &self,
        g: &Graph,
        vars: &[Var],
        cond: Condition,
        clean: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (b, a) = clean.dims2();
        if a != self.action_dim {
            return Err(Error::Usage("denoising batch shape mismatch".into()));
        }
        let ks: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps = gaussian(rng, &[b, a]);
        let mut noisy = clean.clone();
        for (r, &k) in ks.iter().enumerate() {
            for c in 0..a {
                let i = r * a + c;
                noisy.data_mut()[i] = self.schedule.noised(clean.data()[i], k, eps.data()[i]);
            }
        }
        let xi = g.input(noisy);
        let pred = self.denoiser.eps(g, vars, cond, xi, &ks)?;
        noise_regularizer(g, pred, &eps)
    }
}

/// `mean_i || pred_i - eps_i ||^2`.
pub fn noise_regularizer(g: &Graph, pred: Var, eps: &Tensor) -> Result<Var> {
    let b = eps.rows();
    let diff = g.sub(pred, g.input(eps.clone()))?;
    let sq = g.sum(g.square(diff)?)?;
    Ok(g.scale(sq, 1.0 / b as f64)?)
}

/// One seeded draw for a single state. Records the chain with trainable
/// bindings when `differentiable` is set.
pub fn gdm_sample_action(
    policy: &DiffusionPolicy,
    state: &[f64],
    seed: u64,
    differentiable: bool,
) -> Result<Vec<f64>> {
    let g = Graph::new();
    let vars = if differentiable {
        g.bind(policy.params())
    } else {
        g.bind_frozen(policy.params())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = policy.sample(&g, &vars, &Tensor::row(state.to_vec()), &mut rng)?;
    Ok(g.value(a).into_data())
}
