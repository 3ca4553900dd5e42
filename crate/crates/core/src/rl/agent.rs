//! TD3 agent with the enhancement plugins wired in a fixed order: state
//! compression, then the actor (MLP, attention or diffusion), then the
//! critic update (squared error or adversarial), then the optional hybrid
//! latent decoder.

use gaidrl_nn::checkpoint::restore_group;
use gaidrl_nn::{derive_seed, Activation, AdamConfig, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::buffer::ReplayBuffer;
use super::td3::{bellman_target, soft_update, Td3Config};
use crate::env::{Action, ActionSpace, EnvConfig, Move};
use crate::error::{Error, Result};
use crate::plugins::diffusion::DiffusionPolicy;
use crate::plugins::fit_step;
use crate::plugins::gan::{gan_value_update, Discriminator};
use crate::plugins::hybrid::{one_hot_rows, HybridLatentModel, HybridTrainer};
use crate::plugins::stack::EnhancementStack;
use crate::plugins::transformer::{TokenLayout, TransformerActor};
use crate::plugins::vae::{VaeModel, VaeTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An environment action plus its critic-space encoding for the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    pub action: Action,
    pub stored: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateInfo {
    pub critic_loss: [f64; 2],
    pub actor_loss: Option<f64>,
    pub discriminator_loss: Option<[f64; 2]>,
    pub vae: Option<(f64, f64)>,
    pub latent: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
enum ActorNet {
    Mlp(Mlp),
    Transformer(TransformerActor),
    Gdm(DiffusionPolicy),
}

impl ActorNet {
    fn params(&self) -> &ParamSet {
        match self {
            ActorNet::Mlp(m) => m.params(),
            ActorNet::Transformer(t) => t.params(),
            ActorNet::Gdm(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            ActorNet::Mlp(m) => m.params_mut(),
            ActorNet::Transformer(t) => t.params_mut(),
            ActorNet::Gdm(p) => p.params_mut(),
        }
    }

    fn raw(&self, g: &Graph, vars: &[Var], feats: &Tensor, rng: &mut ChaCha8Rng) -> Result<Var> {
        match self {
            ActorNet::Mlp(m) => Ok(m.forward(g, vars, g.input(feats.clone()))?),
            ActorNet::Transformer(t) => t.forward(g, vars, feats),
            ActorNet::Gdm(p) => p.sample(g, vars, feats, rng),
        }
    }
}

struct Head {
    logits: Option<Var>,
    cont: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    space: ActionSpace,
    table: usize,
    obs_dim: usize,
    feat_dim: usize,
    actor_dim: usize,
    critic_dim: usize,
    config: Td3Config,
    stack: EnhancementStack,
    actor: ActorNet,
    actor_target: ActorNet,
    actor_opt: AdamState,
    critics: [Mlp; 2],
    critic_targets: [Mlp; 2],
    critic_opts: [AdamState; 2],
    discs: Option<([Discriminator; 2], [AdamState; 2])>,
    vae: Option<VaeTrainer>,
    latent: Option<HybridTrainer>,
    epsilon: f64,
    critic_updates: u64,
    actor_updates: u64,
    explore_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    actor_rng: ChaCha8Rng,
    eval_seed: u64,
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, ca) = a.dims2();
    let cb = b.cols();
    let mut data = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        data.extend_from_slice(a.row_slice(i));
        data.extend_from_slice(b.row_slice(i));
    }
    Tensor::matrix(r, ca + cb, data).expect("hcat rows")
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Agent {
    /// Prefer [`crate::plugins::stack::compose_stack`], which validates the stack first.
    pub fn new(env: &EnvConfig, config: &Td3Config, stack: &EnhancementStack, seed: u64) -> Result<Self> {
        config.validate()?;
        let space = env.action_space;
        let table = env.discrete_actions();
        let obs_dim = env.obs_dim();
        let latent_actions = stack.vae_hybrid_action;
        if latent_actions && space != ActionSpace::Hybrid {
            return Err(Error::Config("the hybrid action latent needs the hybrid space".into()));
        }
        let vae = if stack.vae_state {
            let model = VaeModel::new(obs_dim, &stack.vae, derive_seed(seed, 8))?;
            Some(VaeTrainer::new(model, stack.vae.learning_rate, derive_seed(seed, 9)))
        } else {
            None
        };
        let feat_dim = vae.as_ref().map_or(obs_dim, |v| v.model.latent());
        let (actor_dim, critic_dim) = match space {
            ActionSpace::Continuous => (4, 4),
            ActionSpace::Discrete => (table, table),
            ActionSpace::Hybrid => {
                let cont = if latent_actions { stack.hybrid.latent } else { 2 };
                (Move::COUNT + cont, Move::COUNT + 2)
            }
        };
        let layout = if stack.vae_state {
            let w = stack.latent_token_width.max(1);
            TokenLayout::Chunks {
                count: feat_dim / w,
                width: w,
            }
        } else {
            TokenLayout::Entities {
                antennas: env.antennas,
            }
        };
        let actor_seed = derive_seed(seed, 0);
        let actor = if stack.gdm_policy {
            if stack.transformer_denoiser {
                ActorNet::Gdm(DiffusionPolicy::with_transformer(&stack.diffusion, layout, actor_dim, actor_seed)?)
            } else {
                ActorNet::Gdm(DiffusionPolicy::with_mlp(&stack.diffusion, feat_dim, actor_dim, actor_seed)?)
            }
        } else if stack.transformer_actor {
            ActorNet::Transformer(TransformerActor::new(layout, stack.transformer.clone(), actor_dim, actor_seed)?)
        } else {
            let mut dims = vec![feat_dim];
            dims.extend(&config.hidden);
            dims.push(actor_dim);
            ActorNet::Mlp(Mlp::new(&dims, Activation::Relu, Activation::Identity, actor_seed)?)
        };
        let critic = |k: u64| -> Result<Mlp> {
            let mut dims = vec![feat_dim + critic_dim];
            dims.extend(&config.hidden);
            dims.push(1);
            Ok(Mlp::new(&dims, Activation::Relu, Activation::Identity, derive_seed(seed, k))?)
        };
        let critics = [critic(1)?, critic(2)?];
        let copt = AdamConfig::with_lr(config.critic_lr);
        let critic_opts = [
            AdamState::new(critics[0].params(), copt.clone()),
            AdamState::new(critics[1].params(), copt),
        ];
        let discs = if stack.gan_critic {
            let d = [
                Discriminator::new(feat_dim + critic_dim, &stack.gan, derive_seed(seed, 6))?,
                Discriminator::new(feat_dim + critic_dim, &stack.gan, derive_seed(seed, 7))?,
            ];
            let cfg = AdamConfig::with_lr(stack.gan.learning_rate);
            let o = [AdamState::new(d[0].params(), cfg.clone()), AdamState::new(d[1].params(), cfg)];
            Some((d, o))
        } else {
            None
        };
        let latent = if latent_actions {
            let m = HybridLatentModel::new(feat_dim, &stack.hybrid, derive_seed(seed, 10))?;
            Some(HybridTrainer::new(m, stack.hybrid.learning_rate, derive_seed(seed, 11)))
        } else {
            None
        };
        Ok(Self {
            space,
            table,
            obs_dim,
            feat_dim,
            actor_dim,
            critic_dim,
            config: config.clone(),
            stack: stack.clone(),
            actor_opt: AdamState::new(actor.params(), AdamConfig::with_lr(config.actor_lr)),
            actor_target: actor.clone(),
            actor,
            critic_targets: critics.clone(),
            critics,
            critic_opts,
            discs,
            vae,
            latent,
            epsilon: config.epsilon_start,
            critic_updates: 0,
            actor_updates: 0,
            explore_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
            target_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
            actor_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 5)),
            eval_seed: derive_seed(seed, 12),
        })
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn config(&self) -> &Td3Config {
        &self.config
    }

    pub fn stack(&self) -> &EnhancementStack {
        &self.stack
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Width of what actor and critic read in place of the raw observation.
    pub fn feature_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn actor_dim(&self) -> usize {
        self.actor_dim
    }

    pub fn critic_action_dim(&self) -> usize {
        self.critic_dim
    }

    pub fn critic_input_dim(&self) -> usize {
        self.critics[0].input_dim()
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    pub fn vae(&self) -> Option<&VaeModel> {
        self.vae.as_ref().map(|v| &v.model)
    }

    pub fn hybrid_latent(&self) -> Option<&HybridLatentModel> {
        self.latent.as_ref().map(|h| &h.model)
    }

    pub fn critic(&self, i: usize) -> &Mlp {
        &self.critics[i]
    }

    pub fn critic_target(&self, i: usize) -> &Mlp {
        &self.critic_targets[i]
    }

    pub fn actor_params(&self) -> &ParamSet {
        self.actor.params()
    }

    pub fn actor_target_params(&self) -> &ParamSet {
        self.actor_target.params()
    }

    /// Named parameter groups for checkpointing.
    pub fn checkpoint_groups(&self) -> Vec<(String, &ParamSet)> {
        let mut out: Vec<(String, &ParamSet)> = vec![
            ("actor".into(), self.actor.params()),
            ("actor_target".into(), self.actor_target.params()),
        ];
        for i in 0..2 {
            out.push((format!("critic{i}"), self.critics[i].params()));
            out.push((format!("critic{i}_target"), self.critic_targets[i].params()));
        }
        if let Some((d, _)) = &self.discs {
            out.push(("disc0".into(), d[0].params()));
            out.push(("disc1".into(), d[1].params()));
        }
        if let Some(v) = &self.vae {
            out.push(("vae_encoder".into(), v.model.encoder().params()));
            out.push(("vae_decoder".into(), v.model.decoder().params()));
            out.push(("vae_norm".into(), v.model.norm()));
        }
        if let Some(h) = &self.latent {
            out.push(("latent_embed".into(), h.model.embed_params()));
            out.push(("latent_encoder".into(), h.model.encoder_params()));
            out.push(("latent_decoder".into(), h.model.decoder_params()));
        }
        out
    }

    /// Loads parameters saved from [`Self::checkpoint_groups`] of an agent
    /// built with the same configuration. Optimizer moments start fresh.
    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut sets: Vec<(String, &mut ParamSet)> = vec![
            ("actor".into(), self.actor.params_mut()),
            ("actor_target".into(), self.actor_target.params_mut()),
        ];
        for (i, (c, t)) in self.critics.iter_mut().zip(self.critic_targets.iter_mut()).enumerate() {
            sets.push((format!("critic{i}"), c.params_mut()));
            sets.push((format!("critic{i}_target"), t.params_mut()));
        }
        if let Some((d, _)) = &mut self.discs {
            for (i, x) in d.iter_mut().enumerate() {
                sets.push((format!("disc{i}"), x.params_mut()));
            }
        }
        if let Some(v) = &mut self.vae {
            let (e, d, n) = v.model.params_mut();
            sets.push(("vae_encoder".into(), e));
            sets.push(("vae_decoder".into(), d));
            sets.push(("vae_norm".into(), n));
        }
        if let Some(h) = &mut self.latent {
            let [e, n, d] = h.model.params_mut();
            sets.push(("latent_embed".into(), e));
            sets.push(("latent_encoder".into(), n));
            sets.push(("latent_decoder".into(), d));
        }
        for (name, set) in sets {
            restore_group(entries, &name, set)?;
        }
        Ok(())
    }

    /// VAE posterior means when state compression is on, else the input.
    pub fn features(&self, obs: &Tensor) -> Result<Tensor> {
        match &self.vae {
            Some(v) => v.model.encode_mean(obs),
            None => Ok(obs.clone()),
        }
    }

    fn head(&self, g: &Graph, raw: Var) -> Result<Head> {
        let gdm = matches!(self.actor, ActorNet::Gdm(_));
        let kappa = self.stack.diffusion.logit_scale;
        let squash = |v: Var| -> Result<Var> { Ok(if gdm { v } else { g.tanh(v)? }) };
        let scale = |v: Var| -> Result<Var> { Ok(if gdm { g.scale(v, kappa)? } else { g.scale(g.tanh(v)?, kappa)? }) };
        Ok(match self.space {
            ActionSpace::Continuous => Head {
                logits: None,
                cont: Some(squash(raw)?),
            },
            ActionSpace::Discrete => Head {
                logits: Some(scale(raw)?),
                cont: None,
            },
            ActionSpace::Hybrid => {
                let l = g.slice_cols(raw, 0, Move::COUNT)?;
                let c = g.slice_cols(raw, Move::COUNT, self.actor_dim - Move::COUNT)?;
                Head {
                    logits: Some(scale(l)?),
                    cont: Some(squash(c)?),
                }
            }
        })
    }

    /// Differentiable critic-space action for the actor objective.
    fn relaxed_action(&self, g: &Graph, head: &Head, feats: Var) -> Result<Var> {
        match self.space {
            ActionSpace::Continuous => Ok(head.cont.expect("continuous head")),
            ActionSpace::Discrete => Ok(g.softmax(head.logits.expect("discrete head"))?),
            ActionSpace::Hybrid => {
                let w = g.softmax(head.logits.expect("hybrid head"))?;
                let cont = head.cont.expect("hybrid head");
                let powers = match &self.latent {
                    Some(h) => {
                        let ev = g.bind_frozen(h.model.embed_params());
                        let dv = g.bind_frozen(h.model.decoder_params());
                        let emb = h.model.embed(g, ev[0], w)?;
                        h.model.decode(g, &dv, feats, emb, cont)?
                    }
                    None => cont,
                };
                Ok(g.concat(&[w, powers])?)
            }
        }
    }

    /// Uniform action used while the buffer warms up.
    pub fn random_action(&mut self) -> AgentAction {
        let rng = &mut self.explore_rng;
        match self.space {
            ActionSpace::Continuous => {
                let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                AgentAction {
                    action: Action::Continuous { values: v },
                    stored: v.to_vec(),
                }
            }
            ActionSpace::Discrete => {
                let i = rng.random_range(0..self.table);
                self.discrete_action(i)
            }
            ActionSpace::Hybrid => {
                let m = rng.random_range(0..Move::COUNT);
                let p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                hybrid_action(m, p)
            }
        }
    }

    fn discrete_action(&self, index: usize) -> AgentAction {
        let mut stored = vec![0.0; self.table];
        stored[index] = 1.0;
        AgentAction {
            action: Action::Discrete { index },
            stored,
        }
    }

    pub fn act(&mut self, obs: &[f64], mode: Mode) -> Result<AgentAction> {
        if obs.len() != self.obs_dim {
            return Err(Error::Usage(format!(
                "observation has {} entries, agent expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        let feats = self.features(&Tensor::row(obs.to_vec()))?;
        let g = Graph::new();
        let vars = g.bind_frozen(self.actor.params());
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
        let raw = {
            let rng = match mode {
                Mode::Train => &mut self.explore_rng,
                Mode::Eval => &mut eval_rng,
            };
            self.actor.raw(&g, &vars, &feats, rng)?
        };
        let head = self.head(&g, raw)?;
        let train = mode == Mode::Train;
        let sigma = self.config.explore_noise;
        let logits = head.logits.map(|l| g.value(l).into_data());
        let cont = head.cont.map(|c| g.value(c).into_data());
        let rng = &mut self.explore_rng;
        let mut jitter = |v: Vec<f64>| -> Vec<f64> {
            if train {
                v.into_iter()
                    .map(|x| (x + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
                    .collect()
            } else {
                v
            }
        };
        let cont = cont.map(&mut jitter);
        let pick = |l: &[f64], rng: &mut ChaCha8Rng, eps: f64| -> usize {
            if train && rng.random::<f64>() < eps {
                rng.random_range(0..l.len())
            } else {
                argmax(l)
            }
        };
        Ok(match self.space {
            ActionSpace::Continuous => {
                let v = cont.expect("continuous head");
                AgentAction {
                    action: Action::Continuous {
                        values: [v[0], v[1], v[2], v[3]],
                    },
                    stored: v,
                }
            }
            ActionSpace::Discrete => {
                let i = pick(&logits.expect("discrete head"), &mut self.explore_rng, self.epsilon);
                self.discrete_action(i)
            }
            ActionSpace::Hybrid => {
                let m = pick(&logits.expect("hybrid head"), &mut self.explore_rng, self.epsilon);
                let c = cont.expect("hybrid head");
                let p = match &self.latent {
                    Some(h) => {
                        let out = h.model.decode_batch(&feats, &[m], &Tensor::row(c))?;
                        [out.data()[0], out.data()[1]]
                    }
                    None => [c[0], c[1]],
                };
                hybrid_action(m, p)
            }
        })
    }

    fn min_target_q(&self, f2: &Tensor, a2: &Tensor) -> Result<Vec<f64>> {
        let x = hcat(f2, a2);
        let q1 = self.critic_targets[0].predict(x.clone())?;
        let q2 = self.critic_targets[1].predict(x)?;
        Ok(q1.data().iter().zip(q2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Q of every table action for every row, `[rows * n]`, exploiting the
    /// one-hot input: the first layer splits into a state part computed once
    /// plus one weight row per action.
    fn table_q(critic: &Mlp, f: &Tensor, n: usize) -> Result<Vec<f64>> {
        let (b, fd) = f.dims2();
        let ts = critic.params().tensors();
        let (w0, b0) = (&ts[0], &ts[1]);
        let h = w0.cols();
        let wf = Tensor::matrix(fd, h, w0.data()[..fd * h].to_vec())?;
        let g = Graph::new();
        let fs = g.value(g.matmul(g.input(f.clone()), g.input(wf))?);
        let mut h1 = Vec::with_capacity(b * n * h);
        for r in 0..b {
            let base = fs.row_slice(r);
            for j in 0..n {
                let wa = &w0.data()[(fd + j) * h..(fd + j + 1) * h];
                h1.extend(base.iter().zip(wa).zip(b0.data()).map(|((x, y), z)| (x + y + z).max(0.0)));
            }
        }
        let mut x = g.input(Tensor::matrix(b * n, h, h1)?);
        let layers = ts.len() / 2;
        for i in 1..layers {
            let w = g.input(ts[2 * i].clone());
            let bias = g.input(ts[2 * i + 1].clone());
            let act = if i + 1 == layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            x = gaidrl_nn::dense_forward(&g, w, bias, x, act)?;
        }
        Ok(g.value(x).into_data())
    }

    fn smoothing_noise(&mut self, v: &mut [f64]) {
        let (s, c) = (self.config.target_noise, self.config.noise_clip);
        for x in v.iter_mut() {
            let n: f64 = self.target_rng.sample::<f64, _>(StandardNormal) * s;
            *x = (*x + n.clamp(-c, c)).clamp(-1.0, 1.0);
        }
    }

    /// Target-policy actions in critic space for a batch of next features.
    fn target_actions(&mut self, f2: &Tensor) -> Result<Tensor> {
        let b = f2.rows();
        if self.space == ActionSpace::Discrete {
            let n = self.table;
            let q1 = Self::table_q(&self.critic_targets[0], f2, n)?;
            let q2 = Self::table_q(&self.critic_targets[1], f2, n)?;
            let idx: Vec<usize> = (0..b)
                .map(|r| {
                    let m: Vec<f64> = (0..n).map(|j| q1[r * n + j].min(q2[r * n + j])).collect();
                    argmax(&m)
                })
                .collect();
            return Ok(one_hot_rows(&idx, n));
        }
        let g = Graph::new();
        let vars = g.bind_frozen(self.actor_target.params());
        let raw = self.actor_target.raw(&g, &vars, f2, &mut self.target_rng)?;
        let head = self.head(&g, raw)?;
        let mut cont = g.value(head.cont.expect("continuous part"));
        self.smoothing_noise(cont.data_mut());
        if self.space == ActionSpace::Continuous {
            return Ok(cont);
        }
        // hybrid: pick the move maximizing the twin-min target value
        let mut best = vec![(f64::NEG_INFINITY, 0usize); b];
        let mut cands = Vec::with_capacity(Move::COUNT);
        for m in 0..Move::COUNT {
            let moves = vec![m; b];
            let powers = match &self.latent {
                Some(h) => h.model.decode_batch(f2, &moves, &cont)?,
                None => cont.clone(),
            };
            let a = hcat(&one_hot_rows(&moves, Move::COUNT), &powers);
            let q = self.min_target_q(f2, &a)?;
            for (r, v) in q.iter().enumerate() {
                if *v > best[r].0 {
                    best[r] = (*v, m);
                }
            }
            cands.push(a);
        }
        let w = self.critic_dim;
        let mut data = Vec::with_capacity(b * w);
        for (r, &(_, m)) in best.iter().enumerate() {
            data.extend_from_slice(cands[m].row_slice(r));
        }
        Ok(Tensor::matrix(b, w, data)?)
    }

    /// One critic update, a delayed actor update with soft target updates,
    /// and one step for each auxiliary model.
    pub fn update(&mut self, buffer: &mut ReplayBuffer) -> Result<UpdateInfo> {
        let batch = buffer.sample(self.config.batch_size)?;
        let n = batch.len;
        let s = Tensor::matrix(n, batch.state_dim, batch.states)?;
        let s2 = Tensor::matrix(n, batch.state_dim, batch.next_states)?;
        let a = Tensor::matrix(n, batch.action_dim, batch.actions)?;
        if batch.action_dim != self.critic_dim {
            return Err(Error::Usage(format!(
                "buffer actions have {} entries, critic expects {}",
                batch.action_dim, self.critic_dim
            )));
        }
        let f = self.features(&s)?;
        let f2 = self.features(&s2)?;
        let a2 = self.target_actions(&f2)?;
        let q2 = self.min_target_q(&f2, &a2)?;
        let y: Vec<f64> = (0..n)
            .map(|i| bellman_target(batch.rewards[i], batch.dones[i] > 0.5, self.config.gamma, q2[i]))
            .collect();
        let y = Tensor::matrix(n, 1, y)?;
        let sa = hcat(&f, &a);
        let mut info = UpdateInfo::default();
        match &mut self.discs {
            Some((discs, dopts)) => {
                let mut dl = [0.0; 2];
                for i in 0..2 {
                    let l = gan_value_update(
                        &mut self.critics[i],
                        &mut self.critic_opts[i],
                        &mut discs[i],
                        &mut dopts[i],
                        &sa,
                        &y,
                        &self.stack.gan,
                    )?;
                    info.critic_loss[i] = l.generator;
                    dl[i] = l.discriminator;
                }
                info.discriminator_loss = Some(dl);
            }
            None => {
                for i in 0..2 {
                    info.critic_loss[i] = critic_regression(&mut self.critics[i], &mut self.critic_opts[i], &sa, &y)?;
                }
            }
        }
        self.critic_updates += 1;
        if self.critic_updates % self.config.policy_delay as u64 == 0 {
            info.actor_loss = Some(self.actor_update(&f, &a)?);
            self.actor_updates += 1;
            let tau = self.config.tau;
            soft_update(self.actor_target.params_mut(), self.actor.params(), tau)?;
            for i in 0..2 {
                soft_update(self.critic_targets[i].params_mut(), self.critics[i].params(), tau)?;
            }
        }
        if let Some(v) = &mut self.vae {
            info.vae = Some(v.step(&s)?);
        }
        if let Some(h) = &mut self.latent {
            let moves: Vec<usize> = (0..n).map(|r| argmax(&a.row_slice(r)[..Move::COUNT])).collect();
            let powers: Vec<f64> = (0..n).flat_map(|r| a.row_slice(r)[Move::COUNT..].to_vec()).collect();
            let p = Tensor::matrix(n, 2, powers)?;
            info.latent = Some(h.step(&f, &moves, &p)?);
        }
        Ok(info)
    }

    /// Buffer actions mapped into the diffusion output space.
    fn diffusion_targets(&self, f: &Tensor, a: &Tensor) -> Result<Tensor> {
        let n = a.rows();
        Ok(match self.space {
            ActionSpace::Continuous => a.clone(),
            ActionSpace::Discrete => {
                let mut t = a.clone();
                t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
                t
            }
            ActionSpace::Hybrid => {
                let moves: Vec<usize> = (0..n).map(|r| argmax(&a.row_slice(r)[..Move::COUNT])).collect();
                let powers = Tensor::matrix(n, 2, (0..n).flat_map(|r| a.row_slice(r)[Move::COUNT..].to_vec()).collect())?;
                let cont = match &self.latent {
                    Some(h) => {
                        let mut z = h.model.encode_mean(f, &moves, &powers)?;
                        z.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                        z
                    }
                    None => powers,
                };
                let mut oh = one_hot_rows(&moves, Move::COUNT);
                oh.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
                hcat(&oh, &cont)
            }
        })
    }

    fn actor_update(&mut self, f: &Tensor, a: &Tensor) -> Result<f64> {
        let gdm = matches!(self.actor, ActorNet::Gdm(_));
        let clean = if gdm && self.stack.diffusion.eta > 0.0 {
            Some(self.diffusion_targets(f, a)?)
        } else {
            None
        };
        let g = Graph::new();
        let av = g.bind(self.actor.params());
        let (raw, cond) = match &self.actor {
            ActorNet::Gdm(p) => {
                let cond = p.condition(&g, &av, f)?;
                (p.sample_from(&g, &av, cond, f.rows(), &mut self.actor_rng)?, Some(cond))
            }
            other => (other.raw(&g, &av, f, &mut self.actor_rng)?, None),
        };
        let head = self.head(&g, raw)?;
        let fv = g.input(f.clone());
        let ca = self.relaxed_action(&g, &head, fv)?;
        let x = g.concat(&[fv, ca])?;
        let c1 = g.bind_frozen(self.critics[0].params());
        let q1 = self.critics[0].forward(&g, &c1, x)?;
        let objective = if gdm {
            let c2 = g.bind_frozen(self.critics[1].params());
            let q2 = self.critics[1].forward(&g, &c2, x)?;
            g.minimum(q1, q2)?
        } else {
            q1
        };
        let mut loss = g.neg(g.mean(objective)?)?;
        if let (ActorNet::Gdm(p), Some(clean), Some(cond)) = (&self.actor, clean, cond) {
            let reg = p.denoise_loss_from(&g, &av, cond, &clean, &mut self.actor_rng)?;
            loss = g.add(loss, g.scale(reg, self.stack.diffusion.eta)?)?;
        }
        let value = g.item(loss);
        let grads = g.backward(loss)?;
        self.actor_opt.update(self.actor.params_mut(), &grads.for_vars(&av))?;
        Ok(value)
    }
}

fn hybrid_action(m: usize, p: [f64; 2]) -> AgentAction {
    let mut stored = vec![0.0; Move::COUNT + 2];
    stored[m] = 1.0;
    stored[Move::COUNT] = p[0];
    stored[Move::COUNT + 1] = p[1];
    AgentAction {
        action: Action::Hybrid {
            move_index: m,
            p_bs: p[0],
            p_uav: p[1],
        },
        stored,
    }
}

/// Squared-error regression of a critic onto fixed targets; returns the loss
/// before the step.
pub fn critic_regression(critic: &mut Mlp, opt: &mut AdamState, sa: &Tensor, targets: &Tensor) -> Result<f64> {
    let net = critic.clone();
    fit_step(&mut [(critic.params_mut(), opt)], |g, v| {
        let q = net.forward(g, &v[0], g.input(sa.clone()))?;
        Ok(g.mse(q, g.input(targets.clone()))?)
    })
}
