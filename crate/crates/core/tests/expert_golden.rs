use std::path::PathBuf;

use depth_inject_core::expert::{expert_forward, ExpertBatch, ExpertConfig, ExpertParams};
use depth_inject_core::nn::{timestep_embedding, LN_EPS};
use depth_inject_core::rng::rng_for;
use depth_inject_core::{ParamId, ParamStore, Tape, Tensor};

const TIMESTEPS: [usize; 2] = [3, 8];

fn config() -> ExpertConfig {
    ExpertConfig {
        layers: 1,
        d_main: 8,
        ..ExpertConfig::default()
    }
}

fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (0.37 * i as f64 + phase).sin()).collect()).unwrap()
}

struct Inputs {
    patches: Tensor,
    state: Tensor,
    actions: Tensor,
}

fn inputs(cfg: &ExpertConfig) -> Inputs {
    let b = TIMESTEPS.len();
    Inputs {
        patches: filled(&[b * cfg.n_patches(), cfg.patch * cfg.patch], 0.1),
        state: filled(&[b, cfg.state_dim], 1.3),
        actions: filled(&[b * cfg.horizon, cfg.action_dim], 2.9),
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/expert_l1_d8_eps_hat.txt")
}

fn affine(store: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(w), store.get(b));
    (0..b.len())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum::<f64>())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn single_layer_expert_matches_its_frozen_output() {
    let cfg = config();
    let mut store = ParamStore::new();
    let params = ExpertParams::new(&mut store, &cfg, &mut rng_for(7, 0)).unwrap();
    let x = inputs(&cfg);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let batch = ExpertBatch {
        patches: tape.constant(x.patches.clone()),
        state: tape.constant(x.state.clone()),
        actions: tape.constant(x.actions.clone()),
        timesteps: TIMESTEPS.to_vec(),
    };
    let out = expert_forward(&mut tape, &p, &params, &batch, None).unwrap();
    let b = TIMESTEPS.len();
    let t = cfg.tokens();
    assert_eq!(t, cfg.n_patches() + 1 + cfg.horizon);
    assert_eq!(tape.value(out.eps_hat).shape(), &[b * cfg.horizon, cfg.action_dim]);
    assert_eq!(out.hidden.len(), 1);
    assert_eq!(tape.value(out.hidden[0]).shape(), &[b * t, cfg.d_main]);
    assert_eq!(tape.value(out.attention[0]).shape(), &[b * t, t]);

    // first attention row of the second sample, recomputed by hand
    let s = 1;
    let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(t);
    let pos = store.get(params.patch_pos);
    for i in 0..cfg.n_patches() {
        let e = affine(&store, params.patch_embed.weight, params.patch_embed.bias, x.patches.row(s * cfg.n_patches() + i));
        tokens.push(add(&e, pos.row(i)));
    }
    tokens.push(affine(&store, params.state_embed.weight, params.state_embed.bias, x.state.row(s)));
    let temb = timestep_embedding(TIMESTEPS[s], cfg.time_embed_dim);
    let temb = affine(&store, params.time_embed.weight, params.time_embed.bias, temb.data());
    let apos = store.get(params.action_pos);
    for h in 0..cfg.horizon {
        let e = affine(&store, params.action_embed.weight, params.action_embed.bias, x.actions.row(s * cfg.horizon + h));
        tokens.push(add(&add(&e, apos.row(h)), &temb));
    }
    let block = &params.blocks[0];
    let normed: Vec<Vec<f64>> = tokens
        .iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let (g, b) = (store.get(block.ln_attn.gain), store.get(block.ln_attn.bias));
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect();
    let q = affine(&store, block.attn.query.weight, block.attn.query.bias, &normed[0]);
    let logits: Vec<f64> = normed
        .iter()
        .map(|n| {
            let k = affine(&store, block.attn.key.weight, block.attn.key.bias, n);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (cfg.d_main as f64).sqrt()
        })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    let row = tape.value(out.attention[0]).row(s * t);
    for (got, l) in row.iter().zip(&logits) {
        let want = (l - top).exp() / z;
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    let eps = tape.value(out.eps_hat);
    let rendered: String = eps.data().iter().map(|v| format!("{v:.17e}\n")).collect();
    let path = golden_path();
    if std::env::var_os("DEPTH_INJECT_BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let frozen = std::fs::read_to_string(&path).expect("golden file present");
    let frozen: Vec<f64> = frozen.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(frozen.len(), eps.len());
    for (i, (a, b)) in eps.data().iter().zip(&frozen).enumerate() {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "entry {i}: {a} vs {b}");
    }
}
