//! The action assistant and the gated injection into the expert.
//!
//! The assistant mirrors the expert at a smaller width: its token grid is
//! `[geometry tokens; state token; action tokens]`, aligned row for row
//! with the expert's `[patch tokens; state token; action tokens]`. One
//! shared block is applied once per expert layer and the `l`-th
//! application's output is `h_aux^(l)`. Injection adds
//! `α^(l) · 𝒯(h_aux^(l), f_3D)` to the expert's hidden state.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::expert::{add_per_block, gather_blocks, interleave, timestep_rows, ExpertConfig};
use crate::nn::{repeat_rows, Attention, Block, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pointnet::PointFeatures;
use crate::tape::{Tape, Var};

pub const PREFIX: &str = "assistant";
pub const INJECTION_PREFIX: &str = "inject";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionMode {
    Projection,
    CrossAttention,
}

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::Projection => "projection",
            InjectionMode::CrossAttention => "cross_attention",
        }
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(InjectionMode::Projection),
            "cross_attention" => Ok(InjectionMode::CrossAttention),
            other => Err(Error::config(format!(
                "unknown injection mode `{other}` (expected projection or cross_attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistantConfig {
    pub d_aux: usize,
    pub mlp_ratio: usize,
    /// Coarse denoising horizon, `1..=K`.
    pub k_aux: usize,
    /// Hidden width of the injection transform.
    pub d_transform: usize,
    pub mode: InjectionMode,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        Self {
            d_aux: 32,
            mlp_ratio: 2,
            k_aux: 2,
            d_transform: 16,
            mode: InjectionMode::Projection,
        }
    }
}

impl AssistantConfig {
    pub fn validate(&self, expert: &ExpertConfig) -> Result<()> {
        if self.d_aux == 0 || self.mlp_ratio == 0 || self.d_transform == 0 {
            return Err(Error::config("assistant widths must be ≥ 1"));
        }
        if self.d_aux >= expert.d_main {
            return Err(Error::config(format!(
                "d_aux ({}) must be smaller than d_main ({})",
                self.d_aux, expert.d_main
            )));
        }
        if self.k_aux == 0 || self.k_aux > expert.diffusion_steps {
            return Err(Error::config(format!(
                "k_aux ({}) must lie in 1..={}",
                self.k_aux, expert.diffusion_steps
            )));
        }
        Ok(())
    }
}

/// Coarse assistant timestep for expert timestep `t`: `ceil(t·K_aux/K)`.
pub fn assistant_timestep(t: usize, k: usize, k_aux: usize) -> usize {
    (t * k_aux).div_ceil(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistantParams {
    pub config: AssistantConfig,
    pub expert: ExpertConfig,
    pub geometry_embed: Linear,
    pub geometry_pos: ParamId,
    pub state_embed: Linear,
    pub action_embed: Linear,
    pub action_pos: ParamId,
    pub time_embed: Linear,
    pub block: Block,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl AssistantParams {
    /// `feature_dim` is the width `C` of the point features.
    pub fn new(
        store: &mut ParamStore,
        config: &AssistantConfig,
        expert: &ExpertConfig,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(expert)?;
        let d = config.d_aux;
        let name = |s: &str| format!("{PREFIX}.{s}");
        Ok(Self {
            config: config.clone(),
            expert: expert.clone(),
            geometry_embed: Linear::new(store, &name("geometry_embed"), feature_dim, d, rng),
            geometry_pos: store.gaussian(name("geometry_pos"), &[expert.n_patches(), d], 0.02, rng),
            state_embed: Linear::new(store, &name("state_embed"), expert.state_dim, d, rng),
            action_embed: Linear::new(store, &name("action_embed"), expert.action_dim, d, rng),
            action_pos: store.gaussian(name("action_pos"), &[expert.horizon, d], 0.02, rng),
            time_embed: Linear::new(store, &name("time_embed"), expert.time_embed_dim, d, rng),
            block: Block::new(store, &name("block"), d, d * config.mlp_ratio, rng),
            ln_out: LayerNorm::new(store, &name("ln_out"), d),
            head: Linear::new(store, &name("head"), d, expert.action_dim, rng),
        })
    }

    pub fn param_count(store: &ParamStore) -> usize {
        store.count_prefix(&format!("{PREFIX}."))
    }
}

#[derive(Debug, Clone)]
pub struct AssistantOutput {
    /// One `B·T × d_aux` activation per expert layer.
    pub h_aux: Vec<Var>,
    /// `B·H × action_dim`; feeds only the auxiliary loss.
    pub eps_aux: Var,
}

/// `f3d.global` is `B × C`; `state` is `B × state_dim`; `actions` is
/// `B·H × action_dim`; `timesteps` are expert timesteps.
pub fn assistant_forward(
    tape: &mut Tape,
    p: &Bound,
    params: &AssistantParams,
    f3d: &PointFeatures,
    state: Var,
    actions: Var,
    timesteps: &[usize],
) -> Result<AssistantOutput> {
    let ecfg = &params.expert;
    let b = timesteps.len();
    if b == 0 {
        return Err(Error::EmptyInput("assistant_forward"));
    }
    let (g, h) = (ecfg.n_patches(), ecfg.horizon);
    let global_shape = tape.value(f3d.global).shape();
    if global_shape.len() != 2 || global_shape[0] != b {
        return Err(Error::shape("assistant geometry", global_shape, &[b]));
    }
    let coarse: Vec<usize> = timesteps
        .iter()
        .map(|&t| {
            if t == 0 || t > ecfg.diffusion_steps {
                Err(Error::config(format!("timestep {t} outside 1..={}", ecfg.diffusion_steps)))
            } else {
                Ok(assistant_timestep(t, ecfg.diffusion_steps, params.config.k_aux))
            }
        })
        .collect::<Result<_>>()?;

    let geo = params.geometry_embed.forward(tape, p, f3d.global)?;
    let geo = repeat_rows(tape, geo, g)?;
    let geo = add_per_block(tape, geo, p.var(params.geometry_pos), b)?;
    let state_tok = params.state_embed.forward(tape, p, state)?;
    let act_tok = params.action_embed.forward(tape, p, actions)?;
    let act_tok = add_per_block(tape, act_tok, p.var(params.action_pos), b)?;
    let temb = tape.constant(timestep_rows(&coarse, h, ecfg.time_embed_dim));
    let temb = params.time_embed.forward(tape, p, temb)?;
    let act_tok = tape.add(act_tok, temb)?;

    let mut x = interleave(tape, [(geo, g), (state_tok, 1), (act_tok, h)], b)?;
    let mut h_aux = Vec::with_capacity(ecfg.layers);
    for _ in 0..ecfg.layers {
        x = params.block.forward(tape, p, x, b)?.0;
        h_aux.push(x);
    }
    let acts = gather_blocks(tape, x, b, ecfg.tokens(), ecfg.action_offset(), h)?;
    let acts = params.ln_out.forward(tape, p, acts)?;
    let eps_aux = params.head.forward(tape, p, acts)?;
    Ok(AssistantOutput { h_aux, eps_aux })
}

/// Auxiliary denoising loss, the same mean squared error as the main one.
pub fn loss_aux(tape: &mut Tape, eps_aux: Var, eps: Var) -> Result<Var> {
    crate::expert::loss_main(tape, eps_aux, eps)
}

/// `main + lambda · aux`
pub fn total_loss(tape: &mut Tape, main: Var, aux: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let weighted = tape.scale(aux, lambda);
    tape.add(main, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// `W₂·gelu(W₁·[up(h_aux) ; f_global] + b₁) + b₂`
    Projection { up: Linear, hidden: Linear, out: Linear },
    /// Queries from `h_aux`, keys and values from per-point features.
    CrossAttention(Attention),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams {
    pub mode: InjectionMode,
    /// One shape-`[]` gate per expert layer, initialized to 0.
    pub alpha: Vec<ParamId>,
    pub transforms: Vec<Transform>,
}

impl InjectionParams {
    pub fn new(
        store: &mut ParamStore,
        config: &AssistantConfig,
        expert: &ExpertConfig,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(expert)?;
        let (d, da, dt) = (expert.d_main, config.d_aux, config.d_transform);
        let mut alpha = Vec::with_capacity(expert.layers);
        let mut transforms = Vec::with_capacity(expert.layers);
        for l in 0..expert.layers {
            let name = |s: &str| format!("{INJECTION_PREFIX}.layer{l}.{s}");
            alpha.push(store.zeros(name("alpha"), &[]));
            transforms.push(match config.mode {
                InjectionMode::Projection => Transform::Projection {
                    up: Linear::new(store, &name("up"), da, d, rng),
                    hidden: Linear::new(store, &name("hidden"), d + feature_dim, dt, rng),
                    out: Linear::new(store, &name("out"), dt, d, rng),
                },
                InjectionMode::CrossAttention => {
                    Transform::CrossAttention(Attention::new(store, &name("attn"), da, feature_dim, dt, d, rng))
                }
            });
        }
        Ok(Self {
            mode: config.mode,
            alpha,
            transforms,
        })
    }

    pub fn param_count(store: &ParamStore) -> usize {
        store.count_prefix(&format!("{INJECTION_PREFIX}."))
    }

    pub fn layers(&self) -> usize {
        self.alpha.len()
    }

    /// `𝒯(h_aux^(l), f_3D)` for a batch of `groups` samples.
    pub fn transform(&self, tape: &mut Tape, p: &Bound, l: usize, h_aux: Var, f3d: &PointFeatures, groups: usize) -> Result<Var> {
        let tr = self.transforms.get(l).ok_or(Error::Size {
            op: "transform",
            requested: l + 1,
            available: self.transforms.len(),
        })?;
        match tr {
            Transform::Projection { up, hidden, out } => {
                let rows = tape.value(h_aux).shape()[0];
                if groups == 0 || !rows.is_multiple_of(groups) {
                    return Err(Error::shape("transform", &[rows], &[groups]));
                }
                let u = up.forward(tape, p, h_aux)?;
                let g = repeat_rows(tape, f3d.global, rows / groups)?;
                let cat = tape.concat(&[u, g], 1)?;
                let z = hidden.forward(tape, p, cat)?;
                let z = tape.gelu(z);
                out.forward(tape, p, z)
            }
            Transform::CrossAttention(attn) => Ok(attn.forward(tape, p, h_aux, f3d.per_point, groups)?.0),
        }
    }

    /// `α^(l) · 𝒯(h_aux^(l), f_3D)`
    pub fn additive(&self, tape: &mut Tape, p: &Bound, l: usize, h_aux: Var, f3d: &PointFeatures, groups: usize) -> Result<Var> {
        let t = self.transform(tape, p, l, h_aux, f3d, groups)?;
        tape.mul(t, p.var(self.alpha[l]))
    }

    /// `h_orig + α^(l) · 𝒯(h_aux^(l), f_3D)`
    #[allow(clippy::too_many_arguments)]
    pub fn inject(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        h_orig: Var,
        h_aux: Var,
        f3d: &PointFeatures,
        groups: usize,
    ) -> Result<Var> {
        let add = self.additive(tape, p, l, h_aux, f3d, groups)?;
        let (hs, as_) = (tape.value(h_orig).shape(), tape.value(add).shape());
        if hs != as_ {
            return Err(Error::LayerShape {
                layer: l,
                expected: hs.to_vec(),
                got: as_.to_vec(),
            });
        }
        tape.add(h_orig, add)
    }

    /// Additives for every layer.
    pub fn additives(&self, tape: &mut Tape, p: &Bound, h_aux: &[Var], f3d: &PointFeatures, groups: usize) -> Result<Vec<Var>> {
        if h_aux.len() != self.layers() {
            return Err(Error::config(format!(
                "expected {} assistant activations, got {}",
                self.layers(),
                h_aux.len()
            )));
        }
        h_aux
            .iter()
            .enumerate()
            .map(|(l, &h)| self.additive(tape, p, l, h, f3d, groups))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_timesteps() {
        let ts: Vec<usize> = (1..=8).map(|t| assistant_timestep(t, 8, 2)).collect();
        assert_eq!(ts, [1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(assistant_timestep(8, 8, 8), 8);
        assert_eq!(assistant_timestep(1, 8, 1), 1);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("projection".parse::<InjectionMode>().unwrap(), InjectionMode::Projection);
        assert_eq!(
            "cross_attention".parse::<InjectionMode>().unwrap(),
            InjectionMode::CrossAttention
        );
        assert!(matches!("film".parse::<InjectionMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let main = tape.constant(crate::Tensor::scalar(0.2));
        let aux = tape.constant(crate::Tensor::scalar(0.3));
        let t = total_loss(&mut tape, main, aux, 1.0).unwrap();
        assert!((tape.value(t).item() - 0.5).abs() < 1e-15);
        let t = total_loss(&mut tape, main, aux, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.2);
        assert!(total_loss(&mut tape, main, aux, -1.0).is_err());
    }
}
