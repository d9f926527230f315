//! The action expert: a transformer denoiser over action chunks,
//! conditioned on depth-free image patches and the robot state.
//!
//! Per sample the token sequence is `[patch tokens; state token; action
//! tokens]`. Batches stack the sequences of several samples by rows and
//! attention never crosses sample boundaries, so every per-sample result
//! is independent of the batch it was computed in.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{ddim_sample, initial_noise, strided_timesteps, Schedule};
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Block, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "expert";

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub layers: usize,
    pub d_main: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_main: 64,
            mlp_ratio: 2,
            horizon: 8,
            action_dim: 4,
            state_dim: 8,
            image_height: 16,
            image_width: 16,
            patch: 4,
            time_embed_dim: 16,
            diffusion_steps: 8,
            beta_start: 0.05,
            beta_end: 0.5,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_main", self.d_main),
            ("mlp_ratio", self.mlp_ratio),
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("state_dim", self.state_dim),
            ("patch", self.patch),
            ("time_embed_dim", self.time_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("expert {name} must be ≥ 1")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) || self.image_height == 0 {
            return Err(Error::config(format!(
                "image {}×{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            )));
        }
        self.schedule().map(|_| ())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Tokens per sample.
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1 + self.horizon
    }

    /// Row of the first action token within a sample's sequence.
    pub fn action_offset(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub config: ExpertConfig,
    pub schedule: Schedule,
    pub patch_embed: Linear,
    pub patch_pos: ParamId,
    pub state_embed: Linear,
    pub action_embed: Linear,
    pub action_pos: ParamId,
    pub time_embed: Linear,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl ExpertParams {
    pub fn new(store: &mut ParamStore, config: &ExpertConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_main;
        let name = |s: &str| format!("{PREFIX}.{s}");
        let patch_embed = Linear::new(store, &name("patch_embed"), config.patch * config.patch, d, rng);
        let patch_pos = store.gaussian(name("patch_pos"), &[config.n_patches(), d], 0.02, rng);
        let state_embed = Linear::new(store, &name("state_embed"), config.state_dim, d, rng);
        let action_embed = Linear::new(store, &name("action_embed"), config.action_dim, d, rng);
        let action_pos = store.gaussian(name("action_pos"), &[config.horizon, d], 0.02, rng);
        let time_embed = Linear::new(store, &name("time_embed"), config.time_embed_dim, d, rng);
        let blocks = (0..config.layers)
            .map(|l| Block::new(store, &name(&format!("block{l}")), d, d * config.mlp_ratio, rng))
            .collect();
        let ln_out = LayerNorm::new(store, &name("ln_out"), d);
        let head = Linear::new(store, &name("head"), d, config.action_dim, rng);
        Ok(Self {
            config: config.clone(),
            schedule: config.schedule()?,
            patch_embed,
            patch_pos,
            state_embed,
            action_embed,
            action_pos,
            time_embed,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn param_count(store: &ParamStore) -> usize {
        store.count_prefix(&format!("{PREFIX}."))
    }
}

/// Inputs for a batch of `B = timesteps.len()` samples, stacked by rows.
#[derive(Debug, Clone)]
pub struct ExpertBatch {
    /// `B·n_patches × patch²`
    pub patches: Var,
    /// `B × state_dim`
    pub state: Var,
    /// Noisy actions, `B·H × action_dim`.
    pub actions: Var,
    pub timesteps: Vec<usize>,
}

impl ExpertBatch {
    pub fn size(&self) -> usize {
        self.timesteps.len()
    }
}

#[derive(Debug, Clone)]
pub struct ExpertOutput {
    /// `B·H × action_dim`
    pub eps_hat: Var,
    /// Output of every block before any injection, `B·T × d_main` each.
    pub hidden: Vec<Var>,
    /// Attention probabilities per layer, `B·T × T` each.
    pub attention: Vec<Var>,
}

/// Sinusoidal embeddings of `timesteps`, each repeated `per` times.
pub(crate) fn timestep_rows(timesteps: &[usize], per: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(timesteps.len() * per * dim);
    for &t in timesteps {
        let e = timestep_embedding(t, dim);
        for _ in 0..per {
            data.extend_from_slice(e.data());
        }
    }
    Tensor::new(&[timesteps.len() * per, dim], data).expect("length matches shape")
}

/// Adds a `[n × d]` parameter to every consecutive `n`-row block of `x[B·n × d]`.
pub(crate) fn add_per_block(tape: &mut Tape, x: Var, pos: Var, b: usize) -> Result<Var> {
    let (n, d) = tape.value(pos).dims2("positional")?;
    let x3 = tape.reshape(x, &[b, n, d])?;
    let sum = tape.add(x3, pos)?;
    tape.reshape(sum, &[b * n, d])
}

/// Interleaves three row-stacked token groups into per-sample sequences
/// `[a_b; s_b; c_b]` for `b = 0..B`.
pub(crate) fn interleave(tape: &mut Tape, groups: [(Var, usize); 3], b: usize) -> Result<Var> {
    if b == 1 {
        return tape.concat(&[groups[0].0, groups[1].0, groups[2].0], 0);
    }
    let mut parts = Vec::with_capacity(3 * b);
    for i in 0..b {
        for &(v, n) in &groups {
            parts.push(tape.rows(v, i * n, n)?);
        }
    }
    tape.concat(&parts, 0)
}

/// Rows `offset..offset + len` of every `per`-row block of `x`.
pub(crate) fn gather_blocks(tape: &mut Tape, x: Var, b: usize, per: usize, offset: usize, len: usize) -> Result<Var> {
    let parts = (0..b)
        .map(|i| tape.rows(x, i * per + offset, len))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}

fn check_rows(tape: &Tape, v: Var, op: &'static str, rows: usize, cols: usize) -> Result<()> {
    let s = tape.value(v).shape();
    if s != [rows, cols] {
        return Err(Error::shape(op, s, &[rows, cols]));
    }
    Ok(())
}

/// Runs the expert. `injections`, when given, holds one additive term per
/// layer, shaped like that layer's hidden state; it is added after the
/// layer and before the next one (after the last layer, before the output
/// head).
pub fn expert_forward(
    tape: &mut Tape,
    p: &Bound,
    params: &ExpertParams,
    batch: &ExpertBatch,
    injections: Option<&[Var]>,
) -> Result<ExpertOutput> {
    let cfg = &params.config;
    let b = batch.size();
    if b == 0 {
        return Err(Error::EmptyInput("expert_forward"));
    }
    for &t in &batch.timesteps {
        if t == 0 || t > cfg.diffusion_steps {
            return Err(Error::config(format!("timestep {t} outside 1..={}", cfg.diffusion_steps)));
        }
    }
    let (np, h, d) = (cfg.n_patches(), cfg.horizon, cfg.d_main);
    check_rows(tape, batch.patches, "expert patches", b * np, cfg.patch * cfg.patch)?;
    check_rows(tape, batch.state, "expert state", b, cfg.state_dim)?;
    check_rows(tape, batch.actions, "expert actions", b * h, cfg.action_dim)?;
    if let Some(inj) = injections {
        if inj.len() != cfg.layers {
            return Err(Error::config(format!(
                "expected {} injection terms, got {}",
                cfg.layers,
                inj.len()
            )));
        }
    }

    let patch_tok = params.patch_embed.forward(tape, p, batch.patches)?;
    let patch_tok = add_per_block(tape, patch_tok, p.var(params.patch_pos), b)?;
    let state_tok = params.state_embed.forward(tape, p, batch.state)?;
    let act_tok = params.action_embed.forward(tape, p, batch.actions)?;
    let act_tok = add_per_block(tape, act_tok, p.var(params.action_pos), b)?;
    let temb = tape.constant(timestep_rows(&batch.timesteps, h, cfg.time_embed_dim));
    let temb = params.time_embed.forward(tape, p, temb)?;
    let act_tok = tape.add(act_tok, temb)?;

    let mut x = interleave(tape, [(patch_tok, np), (state_tok, 1), (act_tok, h)], b)?;
    let mut hidden = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, block) in params.blocks.iter().enumerate() {
        let (y, probs) = block.forward(tape, p, x, b)?;
        hidden.push(y);
        attention.push(probs);
        x = match injections {
            Some(inj) => {
                let got = tape.value(inj[l]).shape();
                if got != [b * cfg.tokens(), d] {
                    return Err(Error::LayerShape {
                        layer: l,
                        expected: [b * cfg.tokens(), d].to_vec(),
                        got: got.to_vec(),
                    });
                }
                tape.add(y, inj[l])?
            }
            None => y,
        };
    }
    let actions = gather_blocks(tape, x, b, cfg.tokens(), cfg.action_offset(), h)?;
    let actions = params.ln_out.forward(tape, p, actions)?;
    let eps_hat = params.head.forward(tape, p, actions)?;
    Ok(ExpertOutput {
        eps_hat,
        hidden,
        attention,
    })
}

/// Denoising objective: mean squared error over all entries.
pub fn loss_main(tape: &mut Tape, eps_hat: Var, eps: Var) -> Result<Var> {
    tape.mse_loss(eps_hat, eps)
}

/// Source of per-layer additive terms for the expert during sampling.
///
/// Implementations see the current noisy actions and timestep and may
/// return one additive per expert layer. They have no way to hand back
/// actions, so executed actions are always the expert's own.
pub trait InjectionProvider {
    fn additives(&self, tape: &mut Tape, p: &Bound, actions: Var, timesteps: &[usize]) -> Result<Option<Vec<Var>>>;
}

/// The expert on its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoInjection;

impl InjectionProvider for NoInjection {
    fn additives(&self, _: &mut Tape, _: &Bound, _: Var, _: &[usize]) -> Result<Option<Vec<Var>>> {
        Ok(None)
    }
}

/// Observations for a batch of samples to be acted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `B·n_patches × patch²`
    pub patches: Tensor,
    /// `B × state_dim`
    pub state: Tensor,
}

/// Deterministic reverse pass from `t = K` to `0`. Sample `i` starts from
/// noise drawn with `seeds[i]`; results do not depend on how samples are
/// grouped into batches.
pub fn sample_actions(
    store: &ParamStore,
    params: &ExpertParams,
    obs: &Observation,
    provider: &dyn InjectionProvider,
    seeds: &[u64],
) -> Result<Tensor> {
    let cfg = &params.config;
    let b = seeds.len();
    if b == 0 {
        return Err(Error::EmptyInput("sample_actions"));
    }
    let mut start = Vec::with_capacity(b * cfg.horizon * cfg.action_dim);
    for &s in seeds {
        start.extend(initial_noise(&[cfg.horizon, cfg.action_dim], s).into_data());
    }
    let start = Tensor::new(&[b * cfg.horizon, cfg.action_dim], start)?;
    let steps = strided_timesteps(cfg.diffusion_steps, cfg.diffusion_steps)?;
    ddim_sample(&params.schedule, start, &steps, |a_t, t| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let timesteps = alloc::vec![t; b];
        let actions = tape.constant(a_t.clone());
        let batch = ExpertBatch {
            patches: tape.constant(obs.patches.clone()),
            state: tape.constant(obs.state.clone()),
            actions,
            timesteps,
        };
        let inj = provider.additives(&mut tape, &p, actions, &batch.timesteps)?;
        let out = expert_forward(&mut tape, &p, params, &batch, inj.as_deref())?;
        let eps_hat = tape.value(out.eps_hat).clone();
        if !eps_hat.is_finite() {
            return Err(Error::NumericInstability(format!("non-finite ε̂ at t = {t}")));
        }
        Ok(eps_hat)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny() -> ExpertConfig {
        ExpertConfig {
            layers: 1,
            d_main: 8,
            horizon: 2,
            image_height: 4,
            image_width: 4,
            patch: 2,
            time_embed_dim: 4,
            diffusion_steps: 3,
            ..Default::default()
        }
    }

    fn inputs(cfg: &ExpertConfig, b: usize, tape: &mut Tape) -> ExpertBatch {
        let mk = |r: usize, c: usize, k: f64| Tensor::new(&[r, c], (0..r * c).map(|i| libm::sin(i as f64 * k)).collect()).unwrap();
        ExpertBatch {
            patches: tape.constant(mk(b * cfg.n_patches(), cfg.patch * cfg.patch, 0.3)),
            state: tape.constant(mk(b, cfg.state_dim, 0.7)),
            actions: tape.constant(mk(b * cfg.horizon, cfg.action_dim, 1.1)),
            timesteps: (0..b).map(|i| 1 + i % cfg.diffusion_steps).collect(),
        }
    }

    #[test]
    fn token_counts() {
        let cfg = ExpertConfig::default();
        assert_eq!(cfg.n_patches(), 16);
        assert_eq!(cfg.tokens(), 25);
        let doubled = ExpertConfig { horizon: 16, ..cfg.clone() };
        assert_eq!(doubled.tokens() - cfg.tokens(), 8);
        assert_eq!(doubled.n_patches(), cfg.n_patches());
    }

    #[test]
    fn zero_injection_is_bit_identical() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let params = ExpertParams::new(&mut store, &cfg, &mut rng_for(4, 0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let batch = inputs(&cfg, 2, &mut tape);
        let plain = expert_forward(&mut tape, &p, &params, &batch, None).unwrap();
        let zeros: Vec<Var> = (0..cfg.layers)
            .map(|_| tape.constant(Tensor::zeros(&[2 * cfg.tokens(), cfg.d_main])))
            .collect();
        let injected = expert_forward(&mut tape, &p, &params, &batch, Some(&zeros)).unwrap();
        assert_eq!(tape.value(plain.eps_hat), tape.value(injected.eps_hat));
        for (a, b) in plain.hidden.iter().zip(&injected.hidden) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
    }

    #[test]
    fn injection_shape_error_names_layer() {
        let cfg = ExpertConfig { layers: 2, ..tiny() };
        let mut store = ParamStore::new();
        let params = ExpertParams::new(&mut store, &cfg, &mut rng_for(4, 0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let batch = inputs(&cfg, 1, &mut tape);
        let good = tape.constant(Tensor::zeros(&[cfg.tokens(), cfg.d_main]));
        let bad = tape.constant(Tensor::zeros(&[cfg.tokens(), cfg.d_main + 1]));
        let err = expert_forward(&mut tape, &p, &params, &batch, Some(&[good, bad])).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 1, .. }));
    }

    #[test]
    fn batch_results_equal_single_results() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let params = ExpertParams::new(&mut store, &cfg, &mut rng_for(4, 0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let batch = inputs(&cfg, 3, &mut tape);
        let all = expert_forward(&mut tape, &p, &params, &batch, None).unwrap();
        let all = tape.value(all.eps_hat).clone();
        let rows = |tape: &Tape, v: Var, per: usize, i: usize| tape.value(v).data()[i * per..(i + 1) * per].to_vec();
        for i in 0..3 {
            let np = cfg.n_patches() * cfg.patch * cfg.patch;
            let single = ExpertBatch {
                patches: tape.constant(Tensor::new(&[cfg.n_patches(), cfg.patch * cfg.patch], rows(&tape, batch.patches, np, i)).unwrap()),
                state: tape.constant(Tensor::new(&[1, cfg.state_dim], rows(&tape, batch.state, cfg.state_dim, i)).unwrap()),
                actions: tape.constant(
                    Tensor::new(&[cfg.horizon, cfg.action_dim], rows(&tape, batch.actions, cfg.horizon * cfg.action_dim, i)).unwrap(),
                ),
                timesteps: alloc::vec![batch.timesteps[i]],
            };
            let out = expert_forward(&mut tape, &p, &params, &single, None).unwrap();
            let per = cfg.horizon * cfg.action_dim;
            assert_eq!(tape.value(out.eps_hat).data(), &all.data()[i * per..(i + 1) * per]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let params = ExpertParams::new(&mut store, &cfg, &mut rng_for(4, 0)).unwrap();
        let obs = Observation {
            patches: Tensor::full(&[cfg.n_patches(), 4], 0.25),
            state: Tensor::full(&[1, cfg.state_dim], 0.1),
        };
        let a = sample_actions(&store, &params, &obs, &NoInjection, &[9]).unwrap();
        let b = sample_actions(&store, &params, &obs, &NoInjection, &[9]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[cfg.horizon, cfg.action_dim]);
    }
}
