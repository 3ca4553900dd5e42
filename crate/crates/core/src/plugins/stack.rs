use serde::{Deserialize, Serialize};

use super::diffusion::DiffusionConfig;
use super::gan::GanConfig;
use super::hybrid::HybridConfig;
use super::transformer::TransformerConfig;
use super::vae::VaeConfig;
use crate::env::{ActionSpace, EnvConfig};
use crate::error::{Error, Result, Violation};
use crate::rl::{Agent, Td3Config};

/// Which plugins wrap the TD3 core. Flags form a set; wiring order is fixed
/// by [`crate::rl::Agent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancementStack {
    pub gdm_policy: bool,
    pub gan_critic: bool,
    pub transformer_actor: bool,
    pub transformer_denoiser: bool,
    pub vae_state: bool,
    pub vae_hybrid_action: bool,
    pub diffusion: DiffusionConfig,
    pub gan: GanConfig,
    pub vae: VaeConfig,
    pub hybrid: HybridConfig,
    pub transformer: TransformerConfig,
    /// Width of each latent token when attention reads the VAE latent.
    pub latent_token_width: usize,
}

impl Default for EnhancementStack {
    fn default() -> Self {
        Self {
            gdm_policy: false,
            gan_critic: false,
            transformer_actor: false,
            transformer_denoiser: false,
            vae_state: false,
            vae_hybrid_action: false,
            diffusion: DiffusionConfig::default(),
            gan: GanConfig::default(),
            vae: VaeConfig::default(),
            hybrid: HybridConfig::default(),
            transformer: TransformerConfig::default(),
            latent_token_width: 4,
        }
    }
}

impl EnhancementStack {
    pub fn vanilla() -> Self {
        Self::default()
    }

    /// Parses names such as `vanilla`, `gdm`, `gdm-gan-transformer-vae`.
    /// `transformer` means the denoiser when `gdm` is present and the actor
    /// otherwise; `latent` is the hybrid-action VAE.
    pub fn from_name(name: &str) -> Result<Self> {
        let mut s = Self::default();
        if name == "vanilla" || name.is_empty() {
            return Ok(s);
        }
        let parts: Vec<&str> = name.split('-').collect();
        let mut transformer = false;
        for p in &parts {
            match *p {
                "gdm" => s.gdm_policy = true,
                "gan" => s.gan_critic = true,
                "transformer" => transformer = true,
                "vae" => s.vae_state = true,
                "latent" => s.vae_hybrid_action = true,
                other => return Err(Error::Config(format!("unknown stack component {other:?} in {name:?}"))),
            }
        }
        if transformer {
            if s.gdm_policy {
                s.transformer_denoiser = true;
            } else {
                s.transformer_actor = true;
            }
        }
        Ok(s)
    }

    /// Canonical name, independent of how the flags were declared.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.gdm_policy {
            parts.push("gdm");
        }
        if self.gan_critic {
            parts.push("gan");
        }
        if self.transformer_actor || self.transformer_denoiser {
            parts.push("transformer");
        }
        if self.vae_state {
            parts.push("vae");
        }
        if self.vae_hybrid_action {
            parts.push("latent");
        }
        if parts.is_empty() {
            "vanilla".into()
        } else {
            parts.join("-")
        }
    }

    /// Same stack flags with this stack's plugin settings.
    pub fn with_flags_of(&self, other: &EnhancementStack) -> Self {
        Self {
            gdm_policy: other.gdm_policy,
            gan_critic: other.gan_critic,
            transformer_actor: other.transformer_actor,
            transformer_denoiser: other.transformer_denoiser,
            vae_state: other.vae_state,
            vae_hybrid_action: other.vae_hybrid_action,
            ..self.clone()
        }
    }

    pub fn violations(&self, at: &str, space: ActionSpace, obs_dim: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: String| {
            out.push(Violation {
                path: format!("{at}/{f}"),
                message: m,
            })
        };
        if self.gdm_policy && self.transformer_actor {
            bad(
                "transformer_actor",
                "transformer-actor and gdm-policy are mutually exclusive (use transformer-denoiser inside gdm)".into(),
            );
        }
        if self.transformer_denoiser && !self.gdm_policy {
            bad("transformer_denoiser", "transformer-denoiser requires gdm-policy".into());
        }
        if self.vae_hybrid_action && space != ActionSpace::Hybrid {
            bad(
                "vae_hybrid_action",
                format!("vae-hybrid-action is only valid in the hybrid action space, not {space}"),
            );
        }
        if self.vae_state && (self.vae.latent == 0 || self.vae.latent >= obs_dim) {
            bad("vae/latent", format!("must lie in 1..{obs_dim}"));
        }
        let uses_attention = self.transformer_actor || self.transformer_denoiser;
        if uses_attention {
            let t = if self.transformer_denoiser {
                &self.diffusion.transformer
            } else {
                &self.transformer
            };
            let path = if self.transformer_denoiser {
                "diffusion/transformer"
            } else {
                "transformer"
            };
            if let Err(e) = t.validate() {
                bad(path, e.to_string());
            }
            if self.vae_state && (self.latent_token_width == 0 || self.vae.latent % self.latent_token_width != 0) {
                bad(
                    "latent_token_width",
                    format!("must divide the VAE latent dim {}", self.vae.latent),
                );
            }
        }
        if self.gdm_policy {
            if self.diffusion.steps == 0 {
                bad("diffusion/steps", "must be at least 1".into());
            }
            let (b0, b1) = (self.diffusion.beta_start, self.diffusion.beta_end);
            if !(b0 > 0.0 && b0 < 1.0 && b1 > 0.0 && b1 < 1.0) {
                bad("diffusion/beta_start", "betas must lie in (0, 1)".into());
            }
            if !(self.diffusion.eta >= 0.0) {
                bad("diffusion/eta", "must be nonnegative".into());
            }
        }
        if self.gan_critic {
            if let Err(e) = self.gan.validate() {
                bad("gan", e.to_string());
            }
        }
        out
    }
}

/// Builds the agent for a stack in the configured environment's action space.
pub fn compose_stack(stack: &EnhancementStack, env: &EnvConfig, td3: &Td3Config, seed: u64) -> Result<Agent> {
    let v = stack.violations("/stack", env.action_space, env.obs_dim());
    if !v.is_empty() {
        return Err(Error::Invalid(v));
    }
    Agent::new(env, td3, stack, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in ["vanilla", "gdm", "gan", "gdm-gan", "gdm-gan-transformer", "gdm-gan-transformer-vae", "transformer"] {
            assert_eq!(EnhancementStack::from_name(n).unwrap().name(), n);
        }
        let a = EnhancementStack::from_name("vae-gan-gdm").unwrap();
        let b = EnhancementStack::from_name("gdm-gan-vae").unwrap();
        assert_eq!(a, b);
        assert!(EnhancementStack::from_name("gdm-magic").is_err());
        assert!(EnhancementStack::from_name("transformer").unwrap().transformer_actor);
        assert!(EnhancementStack::from_name("gdm-transformer").unwrap().transformer_denoiser);
    }

    #[test]
    fn exclusivity_rules() {
        let s = EnhancementStack {
            gdm_policy: true,
            transformer_actor: true,
            ..EnhancementStack::default()
        };
        let v = s.violations("/stack", ActionSpace::Continuous, 71);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "/stack/transformer_actor");
        let h = EnhancementStack {
            vae_hybrid_action: true,
            ..EnhancementStack::default()
        };
        assert_eq!(h.violations("", ActionSpace::Continuous, 71)[0].path, "/vae_hybrid_action");
        assert!(h.violations("", ActionSpace::Hybrid, 71).is_empty());
    }
}
