//! Variational state compressor.

use gaidrl_nn::{Activation, AdamConfig, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::gaussian;
use super::fit_step;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            hidden: 128,
            beta_kl: 0.5,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    encoder: Mlp,
    decoder: Mlp,
    latent: usize,
    beta_kl: f64,
    /// Running `count`, `mean` and `m2` of every state the model trained on.
    norm: ParamSet,
}

const STD_FLOOR: f64 = 1e-3;

/// Reparameterized encoding of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl VaeModel {
    pub fn new(state_dim: usize, config: &VaeConfig, seed: u64) -> Result<Self> {
        if config.latent == 0 || config.latent >= state_dim {
            return Err(Error::Config(format!(
                "latent dim {} must be in 1..{state_dim}",
                config.latent
            )));
        }
        if !(config.beta_kl >= 0.0) {
            return Err(Error::Config("beta_kl must be nonnegative".into()));
        }
        let h = config.hidden;
        Ok(Self {
            encoder: Mlp::new(&[state_dim, h, 2 * config.latent], Activation::Tanh, Activation::Identity, seed)?,
            decoder: Mlp::new(
                &[config.latent, h, state_dim],
                Activation::Tanh,
                Activation::Identity,
                gaidrl_nn::derive_seed(seed, 1),
            )?,
            latent: config.latent,
            beta_kl: config.beta_kl,
            norm: {
                let mut n = ParamSet::new();
                n.push("count", Tensor::scalar(0.0));
                n.push("mean", Tensor::row(vec![0.0; state_dim]));
                n.push("m2", Tensor::row(vec![0.0; state_dim]));
                n
            },
        })
    }

    /// Standardization statistics; restored with the weights.
    pub fn norm(&self) -> &ParamSet {
        &self.norm
    }

    pub fn norm_mut(&mut self) -> &mut ParamSet {
        &mut self.norm
    }

    /// Folds a batch into the running statistics (Chan's parallel update).
    pub fn observe(&mut self, states: &Tensor) {
        let (b, d) = states.dims2();
        if b == 0 {
            return;
        }
        let mut bm = vec![0.0; d];
        for r in 0..b {
            for (m, x) in bm.iter_mut().zip(states.row_slice(r)) {
                *m += x / b as f64;
            }
        }
        let mut bm2 = vec![0.0; d];
        for r in 0..b {
            for ((q, x), m) in bm2.iter_mut().zip(states.row_slice(r)).zip(&bm) {
                *q += (x - m) * (x - m);
            }
        }
        let t = self.norm.tensors_mut();
        let n = t[0].item();
        let nb = b as f64;
        let tot = n + nb;
        t[0] = Tensor::scalar(tot);
        let (head, tail) = t.split_at_mut(2);
        let mean = head[1].data_mut();
        let m2 = tail[0].data_mut();
        for j in 0..d {
            let delta = bm[j] - mean[j];
            mean[j] += delta * nb / tot;
            m2[j] += bm2[j] + delta * delta * n * nb / tot;
        }
    }

    fn shift_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let t = self.norm.tensors();
        let n = t[0].item();
        let mean = t[1].data().to_vec();
        let std = if n > 1.0 {
            t[2].data().iter().map(|q| (q / n).sqrt().max(STD_FLOOR)).collect()
        } else {
            vec![1.0; mean.len()]
        };
        (mean, std)
    }

    /// States in the model's standardized coordinates.
    pub fn standardize(&self, states: &Tensor) -> Tensor {
        let (mean, std) = self.shift_scale();
        self.map_rows(states, |j, x| (x - mean[j]) / std[j])
    }

    fn destandardize(&self, states: &Tensor) -> Tensor {
        let (mean, std) = self.shift_scale();
        self.map_rows(states, |j, x| x * std[j] + mean[j])
    }

    fn map_rows(&self, states: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let (b, d) = states.dims2();
        let data = (0..b)
            .flat_map(|r| states.row_slice(r).iter().enumerate().map(|(j, &x)| f(j, x)).collect::<Vec<_>>())
            .collect();
        Tensor::matrix(b, d, data).expect("shape preserved")
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Encoder, decoder and standardization sets together.
    pub fn params_mut(&mut self) -> (&mut ParamSet, &mut ParamSet, &mut ParamSet) {
        (self.encoder.params_mut(), self.decoder.params_mut(), &mut self.norm)
    }

    pub fn encoder_params_mut(&mut self) -> &mut ParamSet {
        self.encoder.params_mut()
    }

    pub fn decoder_params_mut(&mut self) -> &mut ParamSet {
        self.decoder.params_mut()
    }

    /// `noise` of shape `[batch, latent]`; `None` gives `z = mu`.
    pub fn encode(&self, g: &Graph, vars: &[Var], x: Var, noise: Option<&Tensor>) -> Result<Encoded> {
        let out = self.encoder.forward(g, vars, x)?;
        let mu = g.slice_cols(out, 0, self.latent)?;
        let logvar = g.slice_cols(out, self.latent, self.latent)?;
        let z = match noise {
            Some(eps) => {
                let std = g.exp(g.scale(logvar, 0.5)?)?;
                g.add(mu, g.mul(std, g.input(eps.clone()))?)?
            }
            None => mu,
        };
        Ok(Encoded { mu, logvar, z })
    }

    pub fn decode(&self, g: &Graph, vars: &[Var], z: Var) -> Result<Var> {
        Ok(self.decoder.forward(g, vars, z)?)
    }

    /// Posterior means `[batch, latent]` without gradients.
    pub fn encode_mean(&self, states: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = g.bind_frozen(self.encoder.params());
        let e = self.encode(&g, &v, g.input(self.standardize(states)), None)?;
        Ok(g.value(e.mu))
    }

    pub fn reconstruct(&self, states: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let ev = g.bind_frozen(self.encoder.params());
        let dv = g.bind_frozen(self.decoder.params());
        let e = self.encode(&g, &ev, g.input(self.standardize(states)), None)?;
        Ok(self.destandardize(&g.value(self.decode(&g, &dv, e.mu)?)))
    }

    /// `(reconstruction, KL)` for a batch with fixed reparameterization noise,
    /// both summed over dimensions and averaged over rows. Reconstruction is
    /// measured in standardized coordinates.
    pub fn loss(&self, g: &Graph, ev: &[Var], dv: &[Var], states: &Tensor, noise: &Tensor) -> Result<(Var, Var)> {
        let x = g.input(self.standardize(states));
        let e = self.encode(g, ev, x, Some(noise))?;
        let d = states.cols() as f64;
        let recon = g.scale(g.mse(self.decode(g, dv, e.z)?, x)?, d)?;
        let kl = kl_divergence(g, e.mu, e.logvar)?;
        Ok((recon, kl))
    }

    pub fn beta_kl(&self) -> f64 {
        self.beta_kl
    }
}

/// `mean over rows of 0.5 * sum(exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_divergence(g: &Graph, mu: Var, logvar: Var) -> Result<Var> {
    let (b, _) = g.dims2(mu);
    let terms = g.sub(g.add(g.exp(logvar)?, g.square(mu)?)?, g.offset(logvar, 1.0)?)?;
    Ok(g.scale(g.sum(terms)?, 0.5 / b as f64)?)
}

/// `(mu, logvar, z)` for one state.
pub fn vae_encode(model: &VaeModel, state: &[f64], seed: u64, stochastic: bool) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = Graph::new();
    let v = g.bind_frozen(model.encoder.params());
    let noise = stochastic.then(|| gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[1, model.latent]));
    let e = model.encode(&g, &v, g.input(model.standardize(&Tensor::row(state.to_vec()))), noise.as_ref())?;
    Ok((g.value(e.mu).into_data(), g.value(e.logvar).into_data(), g.value(e.z).into_data()))
}

/// Model plus its optimizers and noise stream.
#[derive(Debug, Clone)]
pub struct VaeTrainer {
    pub model: VaeModel,
    enc_opt: AdamState,
    dec_opt: AdamState,
    rng: ChaCha8Rng,
}

impl VaeTrainer {
    pub fn new(model: VaeModel, learning_rate: f64, seed: u64) -> Self {
        let cfg = AdamConfig::with_lr(learning_rate);
        Self {
            enc_opt: AdamState::new(model.encoder.params(), cfg.clone()),
            dec_opt: AdamState::new(model.decoder.params(), cfg),
            rng: ChaCha8Rng::seed_from_u64(seed),
            model,
        }
    }

    pub fn steps(&self) -> u64 {
        self.enc_opt.step_count()
    }

    /// One ELBO step; returns `(reconstruction, kl)`.
    pub fn step(&mut self, states: &Tensor) -> Result<(f64, f64)> {
        self.model.observe(states);
        let noise = gaussian(&mut self.rng, &[states.rows(), self.model.latent]);
        let model = self.model.clone();
        let mut parts = (0.0, 0.0);
        let VaeModel { encoder, decoder, .. } = &mut self.model;
        fit_step(
            &mut [(encoder.params_mut(), &mut self.enc_opt), (decoder.params_mut(), &mut self.dec_opt)],
            |g, v| {
                let (recon, kl) = model.loss(g, &v[0], &v[1], states, &noise)?;
                parts = (g.item(recon), g.item(kl));
                Ok(g.add(recon, g.scale(kl, model.beta_kl)?)?)
            },
        )?;
        Ok(parts)
    }
}

/// `sum ||x - x_hat||^2 / sum ||x - mean(x)||^2` over a held-out set.
pub fn normalized_mse(states: &Tensor, recon: &Tensor) -> f64 {
    let (b, d) = states.dims2();
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(states.row_slice(r)) {
            *m += v / b as f64;
        }
    }
    let mut err = 0.0;
    let mut var = 0.0;
    for r in 0..b {
        for ((x, y), m) in states.row_slice(r).iter().zip(recon.row_slice(r)).zip(&mean) {
            err += (x - y) * (x - y);
            var += (x - m) * (x - m);
        }
    }
    err / var.max(f64::MIN_POSITIVE)
}
