//! Least-squares adversarial critic: a discriminator separates Bellman
//! targets from the critic's estimates, and the critic is trained against
//! it on top of an always-present squared-error anchor.

use gaidrl_nn::{Activation, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::fit_step;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub lambda_mse: f64,
    pub lambda_adv: f64,
    pub hidden: usize,
    /// Values enter the discriminator multiplied by this factor.
    pub value_scale: f64,
    pub learning_rate: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_adv: 0.1,
            hidden: 64,
            value_scale: 0.01,
            learning_rate: 1e-3,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::Config("GAN loss weights must be nonnegative".into()));
        }
        if !(self.value_scale > 0.0 && self.learning_rate > 0.0) || self.hidden == 0 {
            return Err(Error::Config("GAN value scale, learning rate and width must be positive".into()));
        }
        Ok(())
    }
}

/// `D(s, a, q) in (0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    net: Mlp,
    value_scale: f64,
}

impl Discriminator {
    pub fn new(input_dim: usize, config: &GanConfig, seed: u64) -> Result<Self> {
        let h = config.hidden;
        Ok(Self {
            net: Mlp::new(&[input_dim + 1, h, h, 1], Activation::Relu, Activation::Identity, seed)?,
            value_scale: config.value_scale,
        })
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    pub fn forward(&self, g: &Graph, vars: &[Var], sa: Var, q: Var) -> Result<Var> {
        let qs = g.scale(q, self.value_scale)?;
        let x = g.concat(&[sa, qs])?;
        let logit = self.net.forward(g, vars, x)?;
        Ok(g.sigmoid(logit)?)
    }

    pub fn predict(&self, sa: &Tensor, q: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = g.bind_frozen(self.params());
        let d = self.forward(&g, &v, g.input(sa.clone()), g.input(q.clone()))?;
        Ok(g.value(d))
    }
}

/// `mean (d_real - 1)^2 + mean d_fake^2`.
pub fn discriminator_loss(g: &Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = g.mean(g.square(g.offset(d_real, -1.0)?)?)?;
    let fake = g.mean(g.square(d_fake)?)?;
    Ok(g.add(real, fake)?)
}

/// Generator terms: `(lambda_adv * mean (d_fake - 1)^2 + lambda_mse * mse, adversarial, mse)`.
pub fn generator_loss(
    g: &Graph,
    d_fake: Var,
    q: Var,
    targets: Var,
    config: &GanConfig,
) -> Result<(Var, Var, Var)> {
    let adv = g.mean(g.square(g.offset(d_fake, -1.0)?)?)?;
    let mse = g.mse(q, targets)?;
    let total = g.add(g.scale(mse, config.lambda_mse)?, g.scale(adv, config.lambda_adv)?)?;
    Ok((total, adv, mse))
}

/// Losses reported by one adversarial value update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub generator: f64,
    pub adversarial: f64,
    pub mse: f64,
    pub discriminator: f64,
}

/// Discriminator step on (targets as real, current estimates as fake), then
/// a critic step on the combined generator loss. `sa` holds critic inputs.
pub fn gan_value_update(
    critic: &mut Mlp,
    critic_opt: &mut AdamState,
    disc: &mut Discriminator,
    disc_opt: &mut AdamState,
    sa: &Tensor,
    targets: &Tensor,
    config: &GanConfig,
) -> Result<GanLosses> {
    let q_now = critic.predict(sa.clone())?;
    let d = disc.clone();
    let discriminator = fit_step(&mut [(disc.net.params_mut(), disc_opt)], |g, v| {
        let s = g.input(sa.clone());
        let real = d.forward(g, &v[0], s, g.input(targets.clone()))?;
        let fake = d.forward(g, &v[0], s, g.input(q_now.clone()))?;
        discriminator_loss(g, real, fake)
    })?;

    let g = Graph::new();
    let cv = g.bind(critic.params());
    let dv = g.bind_frozen(disc.params());
    let s = g.input(sa.clone());
    let q = critic.forward(&g, &cv, s)?;
    let fake = disc.forward(&g, &dv, s, q)?;
    let y = g.input(targets.clone());
    let (total, adv, mse) = generator_loss(&g, fake, q, y, config)?;
    let grads = g.backward(total)?;
    critic_opt.update(critic.params_mut(), &grads.for_vars(&cv))?;
    Ok(GanLosses {
        generator: g.item(total),
        adversarial: g.item(adv),
        mse: g.item(mse),
        discriminator,
    })
}
