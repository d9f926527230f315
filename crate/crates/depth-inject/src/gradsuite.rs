//! Finite-difference gradient checks over every differentiable operation
//! and every model component, each on many randomly drawn instances.
//!
//! Each instance checks `sum(w ⊙ f(x))` for a fixed random `w`, so
//! operations whose plain sum is constant (softmax, layer norm) are still
//! exercised. Model components are checked with respect to their inputs
//! and every parameter at once.

use depth_inject_core::assistant::{
    assistant_forward, total_loss, AssistantConfig, AssistantParams, InjectionMode, InjectionParams,
};
use depth_inject_core::expert::{expert_forward, ExpertBatch, ExpertConfig, ExpertParams};
use depth_inject_core::gradcheck::grad_check;
use depth_inject_core::nn::{repeat_rows, Attention, Block, LayerNorm, Linear, LN_EPS};
use depth_inject_core::pointnet::{PointFeatures, PointNetParams};
use depth_inject_core::rng::{rng_for, SeededRng};
use depth_inject_core::tape::{Tape, Var};
use depth_inject_core::{Bound, ParamStore, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> depth_inject_core::Result<Var>>;

/// One drawn instance: the inputs and the function of them to check.
struct Instance {
    inputs: Vec<Tensor>,
    op: Op,
}

type Case = fn(&mut SeededRng) -> depth_inject_core::Result<Instance>;

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn values(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn inst(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> depth_inject_core::Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        op: Box::new(op),
    }
}

/// Inputs followed by every tensor of `store`; the op receives the store
/// handles as a [`Bound`] built from the trailing variables.
fn with_params(
    mut inputs: Vec<Tensor>,
    store: &ParamStore,
    op: impl Fn(&mut Tape, &Bound, &[Var]) -> depth_inject_core::Result<Var> + 'static,
) -> Instance {
    let k = inputs.len();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    inst(inputs, move |tape, v| {
        let p = Bound::from_vars(v[k..].to_vec());
        op(tape, &p, &v[..k])
    })
}

fn tiny_expert(rng: &mut SeededRng) -> ExpertConfig {
    ExpertConfig {
        layers: dim(rng, 1, 2),
        d_main: 8,
        mlp_ratio: 2,
        horizon: dim(rng, 1, 3),
        action_dim: 2,
        state_dim: dim(rng, 1, 3),
        image_height: 4,
        image_width: 4,
        patch: 2,
        time_embed_dim: 4,
        diffusion_steps: 4,
        beta_start: 0.05,
        beta_end: 0.5,
    }
}

fn tiny_assistant(mode: InjectionMode) -> AssistantConfig {
    AssistantConfig {
        d_aux: 4,
        mlp_ratio: 2,
        k_aux: 2,
        d_transform: 4,
        mode,
    }
}

fn timesteps(rng: &mut SeededRng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| dim(rng, 1, k)).collect()
}

fn op_matmul(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    Ok(inst(vec![values(rng, &[m, k]), values(rng, &[k, n])], |t, v| t.matmul(v[0], v[1])))
}

/// Full shape, a trailing-axis suffix, or a scalar for the second operand.
fn broadcast_pair(rng: &mut SeededRng) -> Vec<Tensor> {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let second: &[usize] = match dim(rng, 0, 2) {
        0 => &[m, n],
        1 => &[n],
        _ => &[],
    };
    let b = values(rng, second);
    if dim(rng, 0, 1) == 0 {
        vec![values(rng, &[m, n]), b]
    } else {
        vec![b, values(rng, &[m, n])]
    }
}

fn op_add(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    Ok(inst(broadcast_pair(rng), |t, v| t.add(v[0], v[1])))
}

fn op_sub(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    Ok(inst(broadcast_pair(rng), |t, v| t.sub(v[0], v[1])))
}

fn op_mul(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    Ok(inst(broadcast_pair(rng), |t, v| t.mul(v[0], v[1])))
}

fn op_scale(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let c = rng.random_range(-2.0..2.0);
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![values(rng, &s)], move |t, v| Ok(t.scale(v[0], c))))
}

fn op_linear(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (m, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
    Ok(inst(
        vec![values(rng, &[m, i]), values(rng, &[i, o]), values(rng, &[o])],
        |t, v| t.linear(v[0], v[1], v[2]),
    ))
}

fn op_gelu(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![uniform(rng, &s, -3.0, 3.0)], |t, v| Ok(t.gelu(v[0]))))
}

fn op_ln(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![uniform(rng, &s, 0.2, 3.0)], |t, v| Ok(t.ln(v[0]))))
}

fn op_softmax(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 2, 6)];
    Ok(inst(vec![uniform(rng, &s, -3.0, 3.0)], |t, v| t.softmax(v[0])))
}

fn op_layernorm(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 2, 6)];
    Ok(inst(vec![values(rng, &s)], |t, v| t.layernorm(v[0], LN_EPS)))
}

fn op_concat(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let axis = dim(rng, 0, 1);
    let shared = dim(rng, 1, 4);
    let parts = dim(rng, 1, 3);
    let inputs = (0..parts)
        .map(|_| {
            let own = dim(rng, 1, 3);
            if axis == 0 {
                values(rng, &[own, shared])
            } else {
                values(rng, &[shared, own])
            }
        })
        .collect();
    Ok(inst(inputs, move |t, v| t.concat(v, axis)))
}

fn op_transpose(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 5), dim(rng, 1, 5)];
    Ok(inst(vec![values(rng, &s)], |t, v| t.transpose(v[0])))
}

fn op_reshape(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    Ok(inst(vec![values(rng, &[a * b, c])], move |t, v| t.reshape(v[0], &[a, b * c])))
}

fn op_reduce_max(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (n, c) = (dim(rng, 1, 6), dim(rng, 1, 4));
    let mut x = values(rng, &[n, c]);
    // keep every column's maximum well separated from the runner-up
    for col in 0..c {
        let r = dim(rng, 0, n - 1);
        x.data_mut()[r * c + col] = 1.5 + rng.random_range(0.0..0.5);
    }
    Ok(inst(vec![x], |t, v| t.reduce_max(v[0])))
}

fn op_sum(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![values(rng, &s)], |t, v| Ok(t.sum(v[0]))))
}

fn op_mean(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![values(rng, &s)], |t, v| t.mean(v[0])))
}

fn op_rows(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (n, c) = (dim(rng, 1, 6), dim(rng, 1, 3));
    let start = dim(rng, 0, n - 1);
    let len = dim(rng, 1, n - start);
    Ok(inst(vec![values(rng, &[n, c])], move |t, v| t.rows(v[0], start, len)))
}

fn op_broadcast_rows(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (n, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    Ok(inst(vec![values(rng, &[c])], move |t, v| t.broadcast_rows(v[0], n)))
}

fn op_mse_loss(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    Ok(inst(vec![values(rng, &s), values(rng, &s)], |t, v| t.mse_loss(v[0], v[1])))
}

fn mod_linear(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (m, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "l", i, o, rng);
    Ok(with_params(vec![values(rng, &[m, i])], &store, move |t, p, v| layer.forward(t, p, v[0])))
}

fn mod_layernorm(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (m, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d);
    for id in [ln.gain, ln.bias] {
        *store.get_mut(id) = values(rng, &[d]);
    }
    Ok(with_params(vec![values(rng, &[m, d])], &store, move |t, p, v| ln.forward(t, p, v[0])))
}

fn mod_attention(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let groups = dim(rng, 1, 2);
    let (nq, nk) = (dim(rng, 1, 3), dim(rng, 1, 4));
    let (dq, dk, w, o) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "a", dq, dk, w, o, rng);
    Ok(with_params(
        vec![values(rng, &[groups * nq, dq]), values(rng, &[groups * nk, dk])],
        &store,
        move |t, p, v| Ok(attn.forward(t, p, v[0], v[1], groups)?.0),
    ))
}

fn mod_block(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let groups = dim(rng, 1, 2);
    let (n, d) = (dim(rng, 1, 3), dim(rng, 3, 5));
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", d, 2 * d, rng);
    Ok(with_params(vec![values(rng, &[groups * n, d])], &store, move |t, p, v| {
        Ok(block.forward(t, p, v[0], groups)?.0)
    }))
}

fn mod_repeat_rows(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let (b, c, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    Ok(inst(vec![values(rng, &[b, c])], move |t, v| repeat_rows(t, v[0], n)))
}

fn mod_pointnet(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let groups = dim(rng, 1, 2);
    let m = dim(rng, 2, 5);
    let mut store = ParamStore::new();
    let dims = [3, dim(rng, 2, 5), dim(rng, 2, 5)];
    let net = PointNetParams::new(&mut store, "pointnet", &dims, rng)?;
    let cloud = values(rng, &[groups * m, 3]);
    Ok(with_params(vec![cloud], &store, move |t, p, v| {
        let f = net.encode_batch(t, p, v[0], groups)?;
        // both outputs contribute
        let g = repeat_rows(t, f.global, m)?;
        t.add(f.per_point, g)
    }))
}

fn expert_inputs(rng: &mut SeededRng, cfg: &ExpertConfig, b: usize) -> Vec<Tensor> {
    vec![
        values(rng, &[b * cfg.n_patches(), cfg.patch * cfg.patch]),
        values(rng, &[b, cfg.state_dim]),
        values(rng, &[b * cfg.horizon, cfg.action_dim]),
    ]
}

fn mod_expert(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let cfg = tiny_expert(rng);
    let b = dim(rng, 1, 2);
    let mut store = ParamStore::new();
    let params = ExpertParams::new(&mut store, &cfg, rng)?;
    let ts = timesteps(rng, b, cfg.diffusion_steps);
    let mut inputs = expert_inputs(rng, &cfg, b);
    let layers = cfg.layers;
    for _ in 0..layers {
        inputs.push(values(rng, &[b * cfg.tokens(), cfg.d_main]));
    }
    Ok(with_params(inputs, &store, move |t, p, v| {
        let batch = ExpertBatch {
            patches: v[0],
            state: v[1],
            actions: v[2],
            timesteps: ts.clone(),
        };
        Ok(expert_forward(t, p, &params, &batch, Some(&v[3..3 + layers]))?.eps_hat)
    }))
}

fn features(v: &[Var]) -> PointFeatures {
    PointFeatures {
        per_point: v[0],
        global: v[1],
    }
}

fn mod_assistant(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let cfg = tiny_expert(rng);
    let acfg = tiny_assistant(InjectionMode::Projection);
    let (b, m, c) = (dim(rng, 1, 2), dim(rng, 2, 3), dim(rng, 2, 4));
    let mut store = ParamStore::new();
    let params = AssistantParams::new(&mut store, &acfg, &cfg, c, rng)?;
    let ts = timesteps(rng, b, cfg.diffusion_steps);
    let inputs = vec![
        values(rng, &[b * m, c]),
        values(rng, &[b, c]),
        values(rng, &[b, cfg.state_dim]),
        values(rng, &[b * cfg.horizon, cfg.action_dim]),
    ];
    Ok(with_params(inputs, &store, move |t, p, v| {
        let f = features(v);
        let out = assistant_forward(t, p, &params, &f, v[2], v[3], &ts)?;
        // the eps head and every per-layer activation
        let mut acc = t.sum(out.eps_aux);
        for &h in &out.h_aux {
            let s = t.mean(h)?;
            let sq = t.mul(h, h)?;
            let sq = t.mean(sq)?;
            let both = t.add(s, sq)?;
            acc = t.add(acc, both)?;
        }
        Ok(acc)
    }))
}

fn injection_case(rng: &mut SeededRng, mode: InjectionMode) -> depth_inject_core::Result<Instance> {
    let cfg = tiny_expert(rng);
    let acfg = tiny_assistant(mode);
    let (b, m, c) = (dim(rng, 1, 2), dim(rng, 2, 3), dim(rng, 2, 4));
    let rows = b * cfg.tokens();
    let mut store = ParamStore::new();
    let inj = InjectionParams::new(&mut store, &acfg, &cfg, c, rng)?;
    for &id in &inj.alpha {
        *store.get_mut(id) = Tensor::scalar(rng.random_range(0.2..1.0));
    }
    let inputs = vec![
        values(rng, &[b * m, c]),
        values(rng, &[b, c]),
        values(rng, &[rows, acfg.d_aux]),
        values(rng, &[rows, cfg.d_main]),
    ];
    let l = dim(rng, 0, cfg.layers - 1);
    Ok(with_params(inputs, &store, move |t, p, v| {
        let f = features(v);
        inj.inject(t, p, l, v[3], v[2], &f, b)
    }))
}

fn mod_inject_projection(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    injection_case(rng, InjectionMode::Projection)
}

fn mod_inject_cross_attention(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    injection_case(rng, InjectionMode::CrossAttention)
}

/// The gate alone: `h + α·T` with respect to α, `h` and `T`, including α = 0.
fn mod_alpha_gate(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let alpha = if dim(rng, 0, 1) == 0 { 0.0 } else { rng.random_range(-1.0..1.0) };
    Ok(inst(
        vec![Tensor::scalar(alpha), values(rng, &s), values(rng, &s)],
        |t, v| {
            let g = t.mul(v[2], v[0])?;
            t.add(v[1], g)
        },
    ))
}

fn mod_total_loss(rng: &mut SeededRng) -> depth_inject_core::Result<Instance> {
    let s = [dim(rng, 1, 4), dim(rng, 1, 3)];
    let lambda = rng.random_range(0.0..2.0);
    Ok(inst(
        vec![values(rng, &s), values(rng, &s), values(rng, &s)],
        move |t, v| {
            let main = t.mse_loss(v[0], v[2])?;
            let aux = t.mse_loss(v[1], v[2])?;
            total_loss(t, main, aux, lambda)
        },
    ))
}

/// Names of every case in the suite.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", op_matmul as Case),
        ("add", op_add),
        ("sub", op_sub),
        ("mul", op_mul),
        ("scale", op_scale),
        ("linear", op_linear),
        ("gelu", op_gelu),
        ("ln", op_ln),
        ("softmax", op_softmax),
        ("layernorm", op_layernorm),
        ("concat", op_concat),
        ("transpose", op_transpose),
        ("reshape", op_reshape),
        ("reduce_max", op_reduce_max),
        ("sum", op_sum),
        ("mean", op_mean),
        ("rows", op_rows),
        ("broadcast_rows", op_broadcast_rows),
        ("mse_loss", op_mse_loss),
        ("linear_layer", mod_linear),
        ("layernorm_layer", mod_layernorm),
        ("attention", mod_attention),
        ("block", mod_block),
        ("repeat_rows", mod_repeat_rows),
        ("pointnet", mod_pointnet),
        ("expert", mod_expert),
        ("assistant", mod_assistant),
        ("inject_projection", mod_inject_projection),
        ("inject_cross_attention", mod_inject_cross_attention),
        ("alpha_gate", mod_alpha_gate),
        ("total_loss", mod_total_loss),
    ]
}

fn check(rng: &mut SeededRng, inst: Instance, cfg: &SuiteConfig) -> depth_inject_core::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.op)(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let weights = uniform(rng, &shape, 0.5, 1.5);
    let op = inst.op;
    let report = grad_check(
        move |t, v| {
            let y = op(t, v)?;
            let w = t.constant(weights.clone());
            t.mul(y, w)
        },
        &inst.inputs,
        cfg.step,
        cfg.tol,
    )?;
    Ok(report.max_rel_err)
}

/// Runs the cases whose name contains `filter` (all when `None`).
pub fn run(cfg: &SuiteConfig, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut rng = rng_for(cfg.seed, i as u64);
        let mut worst = 0.0_f64;
        for _ in 0..cfg.instances {
            let instance = case(&mut rng)?;
            worst = worst.max(check(&mut rng, instance, cfg)?);
        }
        out.push(CaseResult {
            name,
            instances: cfg.instances,
            max_rel_err: worst,
            passed: worst <= cfg.tol,
        });
    }
    Ok(out)
}
