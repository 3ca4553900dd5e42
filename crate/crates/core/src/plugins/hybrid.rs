//! Conditional VAE giving each way-point move its own latent space of
//! power allocations.

use gaidrl_nn::{derive_seed, glorot_uniform, Activation, AdamConfig, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::gaussian;
use super::fit_step;
use super::vae::kl_divergence;
use crate::env::Move;
use crate::error::{Error, Result};

pub const POWER_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub embed_dim: usize,
    pub latent: usize,
    pub hidden: usize,
    pub beta_kl: f64,
    pub learning_rate: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            embed_dim: 6,
            latent: 4,
            hidden: 64,
            beta_kl: 0.5,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridLatentModel {
    embed: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
    latent: usize,
    beta_kl: f64,
}

impl HybridLatentModel {
    pub fn new(state_dim: usize, config: &HybridConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.latent == 0 || config.hidden == 0 {
            return Err(Error::Config("hybrid latent dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embed = ParamSet::new();
        embed.push("table", glorot_uniform(&mut rng, Move::COUNT, config.embed_dim));
        let (e, z, h) = (config.embed_dim, config.latent, config.hidden);
        Ok(Self {
            embed,
            encoder: Mlp::new(
                &[state_dim + e + POWER_DIM, h, 2 * z],
                Activation::Tanh,
                Activation::Identity,
                derive_seed(seed, 1),
            )?,
            decoder: Mlp::new(&[state_dim + e + z, h, POWER_DIM], Activation::Tanh, Activation::Tanh, derive_seed(seed, 2))?,
            latent: z,
            beta_kl: config.beta_kl,
        })
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn embed_params(&self) -> &ParamSet {
        &self.embed
    }

    pub fn encoder_params(&self) -> &ParamSet {
        self.encoder.params()
    }

    pub fn decoder_params(&self) -> &ParamSet {
        self.decoder.params()
    }

    /// Embedding table, encoder and decoder parameters.
    pub fn params_mut(&mut self) -> [&mut ParamSet; 3] {
        [&mut self.embed, self.encoder.params_mut(), self.decoder.params_mut()]
    }

    /// `weights [batch, 5]` (one-hot or softmax) times the embedding table.
    pub fn embed(&self, g: &Graph, table: Var, weights: Var) -> Result<Var> {
        Ok(g.matmul(weights, table)?)
    }

    /// Powers in `[-1, 1]^2` from state, move embedding and latent.
    pub fn decode(&self, g: &Graph, dec: &[Var], state: Var, emb: Var, z: Var) -> Result<Var> {
        let x = g.concat(&[state, emb, z])?;
        Ok(self.decoder.forward(g, dec, x)?)
    }

    /// Frozen batch decode. `moves` are indices into the way-point set.
    pub fn decode_batch(&self, states: &Tensor, moves: &[usize], z: &Tensor) -> Result<Tensor> {
        if let Some(&m) = moves.iter().find(|&&m| m >= Move::COUNT) {
            return Err(Error::Usage(format!("move index {m} out of range 0..5")));
        }
        let g = Graph::new();
        let ev = g.bind_frozen(&self.embed);
        let dv = g.bind_frozen(self.decoder.params());
        let w = g.input(one_hot_rows(moves, Move::COUNT));
        let emb = self.embed(&g, ev[0], w)?;
        let out = self.decode(&g, &dv, g.input(states.clone()), emb, g.input(z.clone()))?;
        Ok(g.value(out))
    }

    /// `(reconstruction, kl)` of the conditional VAE on (state, move, powers).
    pub fn loss(
        &self,
        g: &Graph,
        vars: &[Vec<Var>],
        states: &Tensor,
        moves: &[usize],
        powers: &Tensor,
        noise: &Tensor,
    ) -> Result<(Var, Var)> {
        let s = g.input(states.clone());
        let w = g.input(one_hot_rows(moves, Move::COUNT));
        let emb = self.embed(g, vars[0][0], w)?;
        let p = g.input(powers.clone());
        let out = self.encoder.forward(g, &vars[1], g.concat(&[s, emb, p])?)?;
        let mu = g.slice_cols(out, 0, self.latent)?;
        let logvar = g.slice_cols(out, self.latent, self.latent)?;
        let std = g.exp(g.scale(logvar, 0.5)?)?;
        let z = g.add(mu, g.mul(std, g.input(noise.clone()))?)?;
        let recon = g.mse(self.decode(g, &vars[2], s, emb, z)?, p)?;
        Ok((recon, kl_divergence(g, mu, logvar)?))
    }

    /// Posterior means for (state, move, powers) rows.
    pub fn encode_mean(&self, states: &Tensor, moves: &[usize], powers: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let ev = g.bind_frozen(&self.embed);
        let cv = g.bind_frozen(self.encoder.params());
        let emb = self.embed(&g, ev[0], g.input(one_hot_rows(moves, Move::COUNT)))?;
        let x = g.concat(&[g.input(states.clone()), emb, g.input(powers.clone())])?;
        let out = self.encoder.forward(&g, &cv, x)?;
        Ok(g.value(g.slice_cols(out, 0, self.latent)?))
    }
}

pub fn one_hot_rows(idx: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[idx.len(), width]);
    for (r, &i) in idx.iter().enumerate() {
        t.data_mut()[r * width + i] = 1.0;
    }
    t
}

/// Decodes one (state, move, z) triple.
pub fn hybrid_latent_decode(model: &HybridLatentModel, state: &[f64], move_index: usize, z: &[f64]) -> Result<[f64; 2]> {
    if z.len() != model.latent {
        return Err(Error::Usage(format!("latent has {} entries, expected {}", z.len(), model.latent)));
    }
    let out = model.decode_batch(&Tensor::row(state.to_vec()), &[move_index], &Tensor::row(z.to_vec()))?;
    Ok([out.data()[0], out.data()[1]])
}

#[derive(Debug, Clone)]
pub struct HybridTrainer {
    pub model: HybridLatentModel,
    opts: [AdamState; 3],
    rng: ChaCha8Rng,
}

impl HybridTrainer {
    pub fn new(model: HybridLatentModel, learning_rate: f64, seed: u64) -> Self {
        let cfg = AdamConfig::with_lr(learning_rate);
        Self {
            opts: [
                AdamState::new(&model.embed, cfg.clone()),
                AdamState::new(model.encoder.params(), cfg.clone()),
                AdamState::new(model.decoder.params(), cfg),
            ],
            rng: ChaCha8Rng::seed_from_u64(seed),
            model,
        }
    }

    pub fn step(&mut self, states: &Tensor, moves: &[usize], powers: &Tensor) -> Result<(f64, f64)> {
        let noise = gaussian(&mut self.rng, &[states.rows(), self.model.latent]);
        let frozen = self.model.clone();
        let mut parts = (0.0, 0.0);
        let HybridLatentModel { embed, encoder, decoder, .. } = &mut self.model;
        let [o0, o1, o2] = &mut self.opts;
        fit_step(
            &mut [(embed, o0), (encoder.params_mut(), o1), (decoder.params_mut(), o2)],
            |g, v| {
                let (recon, kl) = frozen.loss(g, v, states, moves, powers, &noise)?;
                parts = (g.item(recon), g.item(kl));
                Ok(g.add(recon, g.scale(kl, frozen.beta_kl)?)?)
            },
        )?;
        Ok(parts)
    }
}
