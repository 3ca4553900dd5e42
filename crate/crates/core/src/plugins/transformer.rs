//! Entity-token attention encoder and the two networks built on it: the
//! actor and the diffusion denoiser.

use gaidrl_nn::{
    attention_forward, cross_attention_forward, dense_forward, derive_seed, glorot_uniform, init_params,
    Activation, AttentionVars, Graph, LayerSpec, ParamCursor, ParamSet, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::GEOMETRY_FEATURES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 2,
            blocks: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        LayerSpec::attention(self.model_dim, self.heads).validate()?;
        Ok(())
    }
}

/// How a feature row is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    /// Raw observation: UAV (x, y, t), user (x, y), powers, then one
    /// (magnitude, phase) token per antenna. Antenna tokens share a
    /// projection and carry no position.
    Entities { antennas: usize },
    /// Compressed latent split into equal chunks, each with its own learned
    /// position embedding.
    Chunks { count: usize, width: usize },
}

#[derive(Debug, Clone, Copy)]
struct Group {
    count: usize,
    proj: usize,
    embed: usize,
}

impl TokenLayout {
    pub fn feature_dim(&self) -> usize {
        match *self {
            TokenLayout::Entities { antennas } => 2 * antennas + GEOMETRY_FEATURES,
            TokenLayout::Chunks { count, width } => count * width,
        }
    }

    pub fn tokens(&self) -> usize {
        self.groups().iter().map(|g| g.count).sum()
    }

    fn groups(&self) -> Vec<Group> {
        match *self {
            TokenLayout::Entities { antennas } => vec![
                Group { count: 1, proj: 0, embed: 0 },
                Group { count: 1, proj: 1, embed: 1 },
                Group { count: 1, proj: 2, embed: 2 },
                Group { count: antennas, proj: 3, embed: 3 },
            ],
            TokenLayout::Chunks { count, .. } => (0..count)
                .map(|i| Group { count: 1, proj: 0, embed: i })
                .collect(),
        }
    }

    fn projections(&self) -> Vec<usize> {
        match *self {
            TokenLayout::Entities { .. } => vec![3, 2, 2, 2],
            TokenLayout::Chunks { width, .. } => vec![width],
        }
    }

    fn embeddings(&self) -> usize {
        match *self {
            TokenLayout::Entities { .. } => 4,
            TokenLayout::Chunks { count, .. } => count,
        }
    }

    /// Token inputs per group, each `[batch * count, width]`.
    fn split(&self, feats: &Tensor) -> Result<Vec<Tensor>> {
        let (b, f) = feats.dims2();
        if f != self.feature_dim() {
            return Err(Error::Usage(format!(
                "token layout expects {} features, got {f}",
                self.feature_dim()
            )));
        }
        let x = feats.data();
        let pick = |cols: &[usize]| -> Vec<f64> {
            (0..b).flat_map(|r| cols.iter().map(move |&c| x[r * f + c])).collect()
        };
        let out = match *self {
            TokenLayout::Entities { antennas: n } => {
                let g = GEOMETRY_FEATURES;
                let mut ant = Vec::with_capacity(b * n * 2);
                for r in 0..b {
                    for i in 0..n {
                        ant.push(x[r * f + g + i]);
                        ant.push(x[r * f + g + n + i]);
                    }
                }
                vec![
                    Tensor::matrix(b, 3, pick(&[0, 1, 6]))?,
                    Tensor::matrix(b, 2, pick(&[2, 3]))?,
                    Tensor::matrix(b, 2, pick(&[4, 5]))?,
                    Tensor::matrix(b * n, 2, ant)?,
                ]
            }
            TokenLayout::Chunks { count, width } => (0..count)
                .map(|i| {
                    let cols: Vec<usize> = (i * width..(i + 1) * width).collect();
                    Tensor::matrix(b, width, pick(&cols)).map_err(Error::from)
                })
                .collect::<Result<_>>()?,
        };
        Ok(out)
    }
}

/// Token projections, type embeddings, attention blocks and a final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEncoder {
    layout: TokenLayout,
    config: TransformerConfig,
}

impl EntityEncoder {
    pub fn new(layout: TokenLayout, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { layout, config })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    fn init(&self, seed: u64, params: &mut ParamSet) -> Result<()> {
        let d = self.config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, w) in self.layout.projections().into_iter().enumerate() {
            params.push(format!("enc.proj{i}"), glorot_uniform(&mut rng, w, d));
        }
        for i in 0..self.layout.embeddings() {
            let e = glorot_uniform(&mut rng, 1, d);
            params.push(format!("enc.type{i}"), e.reshape(vec![1, d])?);
        }
        for blk in 0..self.config.blocks {
            let spec = LayerSpec::attention(d, self.config.heads);
            params.extend_prefixed(&format!("enc.blk{blk}"), init_params(&spec, derive_seed(seed, 100 + blk as u64))?);
        }
        let norm = init_params(&LayerSpec::layer_norm(d), 0)?;
        params.extend_prefixed("enc.norm", norm);
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.layout.projections().len() + self.layout.embeddings() + 9 * self.config.blocks + 2
    }

    /// Encoded tokens `[batch * tokens, model]`.
    fn forward(&self, g: &Graph, c: &mut ParamCursor<'_>, feats: &Tensor) -> Result<Var> {
        let d = self.config.model_dim;
        let (b, _) = feats.dims2();
        let projs = c.take(self.layout.projections().len())?;
        let embeds = c.take(self.layout.embeddings())?;
        let inputs = self.layout.split(feats)?;
        let mut parts = Vec::with_capacity(inputs.len());
        for (grp, x) in self.layout.groups().iter().zip(inputs) {
            let xi = g.input(x);
            let t = g.matmul(xi, projs[grp.proj])?;
            let t = g.add_row(t, embeds[grp.embed])?;
            parts.push(g.reshape(t, vec![b, grp.count * d])?);
        }
        let joined = g.concat(&parts)?;
        let mut tokens = g.reshape(joined, vec![b * self.layout.tokens(), d])?;
        for _ in 0..self.config.blocks {
            let p = AttentionVars::from_cursor(c)?;
            tokens = attention_forward(g, &p, tokens, b, self.config.heads)?;
        }
        let gamma = c.next_var()?;
        let beta = c.next_var()?;
        Ok(g.layer_norm(tokens, gamma, beta)?)
    }
}

/// Attention actor: encoder, mean pool over tokens, linear head.
/// Returns pre-activation outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerActor {
    encoder: EntityEncoder,
    output_dim: usize,
    params: ParamSet,
}

impl TransformerActor {
    pub fn new(layout: TokenLayout, config: TransformerConfig, output_dim: usize, seed: u64) -> Result<Self> {
        let encoder = EntityEncoder::new(layout, config)?;
        let mut params = ParamSet::new();
        encoder.init(derive_seed(seed, 0), &mut params)?;
        let head = init_params(
            &LayerSpec::dense(encoder.config.model_dim, output_dim, Activation::Identity),
            derive_seed(seed, 1),
        )?;
        params.extend_prefixed("head", head);
        Ok(Self {
            encoder,
            output_dim,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layout.feature_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &Graph, vars: &[Var], feats: &Tensor) -> Result<Var> {
        let (b, _) = feats.dims2();
        let mut c = ParamCursor::new(vars);
        let tokens = self.encoder.forward(g, &mut c, feats)?;
        let pooled = g.segment_mean(tokens, b)?;
        let w = c.next_var()?;
        let bias = c.next_var()?;
        Ok(dense_forward(g, w, bias, pooled, Activation::Identity)?)
    }
}

/// Denoiser whose state tokens are encoded once per chain; each denoising
/// step builds a query token from the noisy action and the timestep
/// embedding and cross-attends to them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerDenoiser {
    encoder: EntityEncoder,
    action_dim: usize,
    time_dim: usize,
    params: ParamSet,
}

impl TransformerDenoiser {
    pub fn new(
        layout: TokenLayout,
        config: TransformerConfig,
        action_dim: usize,
        time_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = config.model_dim;
        let heads = config.heads;
        let encoder = EntityEncoder::new(layout, config)?;
        let mut params = ParamSet::new();
        encoder.init(derive_seed(seed, 0), &mut params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        params.push("query.wx", glorot_uniform(&mut rng, action_dim, d));
        params.push("query.wt", glorot_uniform(&mut rng, time_dim, d));
        params.push("query.type", glorot_uniform(&mut rng, 1, d).reshape(vec![1, d])?);
        params.extend_prefixed("cross", init_params(&LayerSpec::attention(d, heads), derive_seed(seed, 2))?);
        params.extend_prefixed(
            "head0",
            init_params(&LayerSpec::dense(d, d, Activation::Relu), derive_seed(seed, 3))?,
        );
        params.extend_prefixed(
            "head1",
            init_params(&LayerSpec::dense(d, action_dim, Activation::Identity), derive_seed(seed, 4))?,
        );
        Ok(Self {
            encoder,
            action_dim,
            time_dim,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layout.feature_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encode(&self, g: &Graph, vars: &[Var], feats: &Tensor) -> Result<Var> {
        let mut c = ParamCursor::new(&vars[..self.encoder.param_count()]);
        self.encoder.forward(g, &mut c, feats)
    }

    pub fn eps(&self, g: &Graph, vars: &[Var], tokens: Var, x: Var, time: &Tensor) -> Result<Var> {
        let (b, a) = g.dims2(x);
        if a != self.action_dim || time.cols() != self.time_dim {
            return Err(Error::Usage(format!(
                "denoiser expects action width {} and time width {}, got {a} and {}",
                self.action_dim,
                self.time_dim,
                time.cols()
            )));
        }
        let mut c = ParamCursor::new(&vars[self.encoder.param_count()..]);
        let wx = c.next_var()?;
        let wt = c.next_var()?;
        let ty = c.next_var()?;
        let ti = g.input(time.clone());
        let q = g.add(g.matmul(x, wx)?, g.matmul(ti, wt)?)?;
        let q = g.add_row(q, ty)?;
        let p = AttentionVars::from_cursor(&mut c)?;
        let h = cross_attention_forward(g, &p, q, tokens, b, self.encoder.config.heads)?;
        let (w0, b0) = (c.next_var()?, c.next_var()?);
        let h = dense_forward(g, w0, b0, h, Activation::Relu)?;
        let (w1, b1) = (c.next_var()?, c.next_var()?);
        Ok(dense_forward(g, w1, b1, h, Activation::Identity)?)
    }
}
