//! The complete policy: PointNet, action assistant, gated injection and
//! action expert, with training losses, one optimizer step and sampling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::assistant::{
    assistant_forward, loss_aux, total_loss, AssistantConfig, AssistantOutput, AssistantParams, InjectionParams,
};
use crate::diffusion::{ddim_sample, initial_noise, strided_timesteps};
use crate::error::{Error, Result};
use crate::expert::{
    expert_forward, loss_main, sample_actions, ExpertBatch, ExpertConfig, ExpertParams, InjectionProvider, NoInjection,
    Observation,
};
use crate::params::{Adam, Bound, ParamStore};
use crate::pipeline::PreparedSample;
use crate::pointnet::{PointFeatures, PointNetParams, DEFAULT_DIMS};
use crate::rng::{mix_seed, normal, rng_for};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// RNG streams used to initialize each component from one seed.
const EXPERT_STREAM: u64 = 0;
const POINTNET_STREAM: u64 = 1;
const ASSISTANT_STREAM: u64 = 2;
const INJECTION_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub expert: ExpertConfig,
    pub assistant: AssistantConfig,
    pub pointnet_dims: Vec<usize>,
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    /// Bound on (assistant + injection) / expert parameter counts.
    pub ratio_max: f64,
    /// When false the assistant still trains through the auxiliary loss
    /// but nothing is added to the expert.
    pub inject: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            expert: ExpertConfig::default(),
            assistant: AssistantConfig::default(),
            pointnet_dims: DEFAULT_DIMS.to_vec(),
            lambda: 0.5,
            ratio_max: 0.25,
            inject: true,
        }
    }
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub expert: usize,
    pub assistant: usize,
    pub injection: usize,
    pub pointnet: usize,
}

impl ParamCounts {
    pub fn of(store: &ParamStore) -> Self {
        Self {
            expert: ExpertParams::param_count(store),
            assistant: AssistantParams::param_count(store),
            injection: InjectionParams::param_count(store),
            pointnet: store.count_prefix("pointnet."),
        }
    }

    /// (assistant + injection) / expert
    pub fn ratio(&self) -> f64 {
        (self.assistant + self.injection) as f64 / self.expert as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub expert: ExpertParams,
    pub pointnet: PointNetParams,
    pub assistant: AssistantParams,
    pub injection: InjectionParams,
}

impl Policy {
    /// Creates all parameters in a fresh store. Each component draws from
    /// its own stream of `seed`, so the expert's initial weights do not
    /// depend on the assistant or injection settings.
    pub fn build(config: &PolicyConfig, seed: u64) -> Result<(Self, ParamStore)> {
        if !(config.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be ≥ 0, got {}", config.lambda)));
        }
        let mut store = ParamStore::new();
        let expert = ExpertParams::new(&mut store, &config.expert, &mut rng_for(seed, EXPERT_STREAM))?;
        let pointnet = PointNetParams::new(
            &mut store,
            "pointnet",
            &config.pointnet_dims,
            &mut rng_for(seed, POINTNET_STREAM),
        )?;
        let c = pointnet.out_dim();
        let assistant = AssistantParams::new(
            &mut store,
            &config.assistant,
            &config.expert,
            c,
            &mut rng_for(seed, ASSISTANT_STREAM),
        )?;
        let injection = InjectionParams::new(
            &mut store,
            &config.assistant,
            &config.expert,
            c,
            &mut rng_for(seed, INJECTION_STREAM),
        )?;
        let counts = ParamCounts::of(&store);
        if counts.ratio() > config.ratio_max {
            return Err(Error::config(format!(
                "assistant + injection use {} parameters, {:.4} of the expert's {} (limit {})",
                counts.assistant + counts.injection,
                counts.ratio(),
                counts.expert,
                config.ratio_max
            )));
        }
        let policy = Self {
            config: config.clone(),
            expert,
            pointnet,
            assistant,
            injection,
        };
        Ok((policy, store))
    }

    /// Expert-only parameters with the same initial weights as
    /// [`Policy::build`] produces for the expert.
    pub fn build_expert_only(config: &ExpertConfig, seed: u64) -> Result<(ExpertParams, ParamStore)> {
        let mut store = ParamStore::new();
        let expert = ExpertParams::new(&mut store, config, &mut rng_for(seed, EXPERT_STREAM))?;
        Ok((expert, store))
    }

    pub fn alphas(&self, store: &ParamStore) -> Vec<f64> {
        self.injection.alpha.iter().map(|&id| store.get(id).item()).collect()
    }

    fn needs_assistant(&self) -> bool {
        self.config.inject || self.config.lambda > 0.0
    }
}

/// A stacked training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub patches: Tensor,
    pub state: Tensor,
    /// `B·M' × 3`
    pub clouds: Tensor,
    /// Clean action chunks, `B·H × action_dim`.
    pub actions: Tensor,
    /// Injected noise, same shape as `actions`.
    pub noise: Tensor,
    pub timesteps: Vec<usize>,
}

impl TrainBatch {
    pub fn size(&self) -> usize {
        self.timesteps.len()
    }

    /// Stacks `samples`, drawing one timestep (uniform in `1..=k`) and a
    /// noise chunk per sample from `rng`.
    pub fn draw(samples: &[&PreparedSample], k: usize, rng: &mut impl Rng) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyInput("TrainBatch"))?;
        let mut timesteps = Vec::with_capacity(samples.len());
        let mut noise = Vec::with_capacity(samples.len() * first.action.len());
        for s in samples {
            timesteps.push(rng.random_range(1..=k));
            noise.extend((0..s.action.len()).map(|_| normal(rng)));
        }
        let actions = stack(samples.iter().map(|s| &s.action))?;
        Ok(Self {
            patches: stack(samples.iter().map(|s| &s.patches))?,
            state: stack(samples.iter().map(|s| &s.state))?,
            clouds: stack(samples.iter().map(|s| &s.cloud))?,
            noise: Tensor::new(actions.shape(), noise)?,
            actions,
            timesteps,
        })
    }
}

/// Row-wise concatenation of equal-width matrices.
pub fn stack<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut rows = 0;
    let mut cols = None;
    let mut data = Vec::new();
    for t in parts {
        let (r, c) = t.dims2("stack")?;
        match cols {
            None => cols = Some(c),
            Some(c0) if c0 != c => return Err(Error::shape("stack", &[rows, c0], t.shape())),
            _ => {}
        }
        rows += r;
        data.extend_from_slice(t.data());
    }
    let cols = cols.ok_or(Error::EmptyInput("stack"))?;
    Tensor::new(&[rows, cols], data)
}

#[derive(Debug, Clone)]
pub struct Losses {
    pub main: Var,
    /// `None` when the assistant is not evaluated (λ = 0 and no injection).
    pub aux: Option<Var>,
    pub total: Var,
    pub eps_hat: Var,
    pub eps_aux: Option<Var>,
}

fn encode(tape: &mut Tape, p: &Bound, policy: &Policy, clouds: &Tensor, b: usize) -> Result<PointFeatures> {
    let c = tape.constant(clouds.clone());
    policy.pointnet.encode_batch(tape, p, c, b)
}

/// Forward pass and losses for one batch on `tape`.
pub fn losses(tape: &mut Tape, p: &Bound, policy: &Policy, batch: &TrainBatch) -> Result<Losses> {
    let b = batch.size();
    let mut noisy = Vec::with_capacity(batch.actions.len());
    let per = batch.actions.len() / b.max(1);
    for (i, &t) in batch.timesteps.iter().enumerate() {
        let range = i * per..(i + 1) * per;
        let a = Tensor::vector(batch.actions.data()[range.clone()].to_vec());
        let e = Tensor::vector(batch.noise.data()[range].to_vec());
        noisy.extend(policy.expert.schedule.noisy(&a, &e, t)?.into_data());
    }
    let noisy = tape.constant(Tensor::new(batch.actions.shape(), noisy)?);
    let eps = tape.constant(batch.noise.clone());
    let state = tape.constant(batch.state.clone());

    let mut additives = None;
    let mut eps_aux = None;
    if policy.needs_assistant() {
        let f3d = encode(tape, p, policy, &batch.clouds, b)?;
        let out = assistant_forward(tape, p, &policy.assistant, &f3d, state, noisy, &batch.timesteps)?;
        if policy.config.inject {
            additives = Some(policy.injection.additives(tape, p, &out.h_aux, &f3d, b)?);
        }
        eps_aux = Some(out.eps_aux);
    }
    let expert_batch = ExpertBatch {
        patches: tape.constant(batch.patches.clone()),
        state,
        actions: noisy,
        timesteps: batch.timesteps.clone(),
    };
    let out = expert_forward(tape, p, &policy.expert, &expert_batch, additives.as_deref())?;
    let main = loss_main(tape, out.eps_hat, eps)?;
    let (aux, total) = match eps_aux {
        Some(ea) => {
            let aux = loss_aux(tape, ea, eps)?;
            (Some(aux), total_loss(tape, main, aux, policy.config.lambda)?)
        }
        None => (None, main),
    };
    Ok(Losses {
        main,
        aux,
        total,
        eps_hat: out.eps_hat,
        eps_aux,
    })
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub main: f64,
    pub aux: f64,
    pub total: f64,
}

/// Loss values for `batch` without touching the parameters.
pub fn evaluate_losses(store: &ParamStore, policy: &Policy, batch: &TrainBatch) -> Result<StepStats> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let l = losses(&mut tape, &p, policy, batch)?;
    Ok(stats(&tape, &l))
}

fn stats(tape: &Tape, l: &Losses) -> StepStats {
    StepStats {
        main: tape.value(l.main).item(),
        aux: l.aux.map_or(0.0, |a| tape.value(a).item()),
        total: tape.value(l.total).item(),
    }
}

/// One Adam update on the total loss. A non-finite loss or gradient
/// leaves `store` untouched and returns a numeric-instability error.
pub fn train_step(store: &mut ParamStore, adam: &mut Adam, policy: &Policy, batch: &TrainBatch) -> Result<StepStats> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = losses(&mut tape, &p, policy, batch)?;
    let s = stats(&tape, &l);
    if !(s.total.is_finite() && s.main.is_finite() && s.aux.is_finite()) {
        return Err(Error::NumericInstability(format!(
            "loss is not finite (main {}, aux {})",
            s.main, s.aux
        )));
    }
    let grads = tape.backward(l.total)?;
    let grads = p.collect_grads(store, &grads);
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericInstability(format!(
            "gradient of `{}` is not finite",
            store.name(store.ids().nth(i).expect("index within store"))
        )));
    }
    adam.step(store, &grads)?;
    Ok(s)
}

/// Injection source for sampling: runs PointNet and the assistant on the
/// current noisy actions and returns the gated additives.
#[derive(Debug, Clone)]
pub struct AssistantInjection<'a> {
    pub policy: &'a Policy,
    /// `B·M' × 3`
    pub clouds: &'a Tensor,
    /// `B × state_dim`
    pub state: &'a Tensor,
    /// Test hook: replaces the assistant's ε̂ before the additives are built.
    pub eps_aux_override: Option<&'a Tensor>,
}

impl InjectionProvider for AssistantInjection<'_> {
    fn additives(&self, tape: &mut Tape, p: &Bound, actions: Var, timesteps: &[usize]) -> Result<Option<Vec<Var>>> {
        let b = timesteps.len();
        let f3d = encode(tape, p, self.policy, self.clouds, b)?;
        let state = tape.constant(self.state.clone());
        let mut out: AssistantOutput = assistant_forward(tape, p, &self.policy.assistant, &f3d, state, actions, timesteps)?;
        if let Some(eps) = self.eps_aux_override {
            out.eps_aux = tape.constant(eps.clone());
        }
        Ok(Some(self.policy.injection.additives(tape, p, &out.h_aux, &f3d, b)?))
    }
}

/// Stacked observations and clouds for a group of samples.
pub fn observation(samples: &[&PreparedSample]) -> Result<(Observation, Tensor)> {
    Ok((
        Observation {
            patches: stack(samples.iter().map(|s| &s.patches))?,
            state: stack(samples.iter().map(|s| &s.state))?,
        },
        stack(samples.iter().map(|s| &s.cloud))?,
    ))
}

/// Executed actions for a batch: the expert's reverse pass, with the
/// assistant's additives when injection is enabled.
pub fn policy_sample(
    store: &ParamStore,
    policy: &Policy,
    obs: &Observation,
    clouds: &Tensor,
    seeds: &[u64],
) -> Result<Tensor> {
    if policy.config.inject {
        let provider = AssistantInjection {
            policy,
            clouds,
            state: &obs.state,
            eps_aux_override: None,
        };
        sample_actions(store, &policy.expert, obs, &provider, seeds)
    } else {
        sample_actions(store, &policy.expert, obs, &NoInjection, seeds)
    }
}

/// Sampled action chunks for `samples`, sample `i` seeded with
/// `mix_seed(seed, i)`, processed `batch` at a time.
pub fn predict(store: &ParamStore, policy: &Policy, samples: &[PreparedSample], seed: u64, batch: usize) -> Result<Vec<Tensor>> {
    let cfg = &policy.config.expert;
    let per = cfg.horizon * cfg.action_dim;
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let (obs, clouds) = observation(&refs)?;
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| mix_seed(seed, (c * batch.max(1) + i) as u64))
            .collect();
        let acts = policy_sample(store, policy, &obs, &clouds, &seeds)?;
        for i in 0..chunk.len() {
            out.push(Tensor::new(
                &[cfg.horizon, cfg.action_dim],
                acts.data()[i * per..(i + 1) * per].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Diagnostic reverse pass of the assistant alone over `K_aux` coarse
/// steps. Never used to produce executed actions.
pub fn assistant_sample(store: &ParamStore, policy: &Policy, state: &Tensor, clouds: &Tensor, seeds: &[u64]) -> Result<Tensor> {
    let cfg = &policy.config.expert;
    let b = seeds.len();
    if b == 0 {
        return Err(Error::EmptyInput("assistant_sample"));
    }
    let mut start = Vec::with_capacity(b * cfg.horizon * cfg.action_dim);
    for &s in seeds {
        start.extend(initial_noise(&[cfg.horizon, cfg.action_dim], s).into_data());
    }
    let start = Tensor::new(&[b * cfg.horizon, cfg.action_dim], start)?;
    let steps = strided_timesteps(cfg.diffusion_steps, policy.config.assistant.k_aux)?;
    ddim_sample(&policy.expert.schedule, start, &steps, |a_t, t| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let f3d = encode(&mut tape, &p, policy, clouds, b)?;
        let s = tape.constant(state.clone());
        let a = tape.constant(a_t.clone());
        let ts = alloc::vec![t; b];
        let out = assistant_forward(&mut tape, &p, &policy.assistant, &f3d, s, a, &ts)?;
        Ok(tape.value(out.eps_aux).clone())
    })
}
