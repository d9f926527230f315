use depth_inject_core::assistant::{AssistantConfig, InjectionMode};
use depth_inject_core::benchmark::{make_ambiguity_dataset, BenchmarkConfig};
use depth_inject_core::diffusion::{ddim_sample, initial_noise, strided_timesteps, Schedule};
use depth_inject_core::expert::{sample_actions, ExpertConfig, NoInjection};
use depth_inject_core::pipeline::{prepare, CloudConfig, PreparedSample};
use depth_inject_core::policy::{losses, observation, AssistantInjection, Policy, PolicyConfig, TrainBatch};
use depth_inject_core::rng::rng_for;
use depth_inject_core::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn config(mode: InjectionMode) -> PolicyConfig {
    PolicyConfig {
        expert: ExpertConfig {
            layers: 2,
            d_main: 32,
            ..ExpertConfig::default()
        },
        assistant: AssistantConfig {
            d_aux: 8,
            d_transform: 8,
            mode,
            ..AssistantConfig::default()
        },
        pointnet_dims: vec![3, 16, 32],
        ratio_max: 1.0,
        ..PolicyConfig::default()
    }
}

fn samples(n: usize) -> Vec<PreparedSample> {
    let bench = BenchmarkConfig::default();
    let cloud = CloudConfig {
        m_prime: 24,
        ..CloudConfig::default()
    };
    make_ambiguity_dataset(n, 4, &bench)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(s, None, &cloud, 4, 4, i).unwrap())
        .collect()
}

fn set_alphas(policy: &Policy, store: &mut ParamStore, values: &[f64]) {
    for (&id, &v) in policy.injection.alpha.iter().zip(values) {
        *store.get_mut(id) = Tensor::scalar(v);
    }
}

const MODES: [InjectionMode; 2] = [InjectionMode::Projection, InjectionMode::CrossAttention];

#[test]
fn closed_gates_reproduce_the_expert_exactly() {
    let data = samples(4);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let (obs, clouds) = observation(&refs).unwrap();
    let seeds = [3, 1, 4, 1];
    for mode in MODES {
        let cfg = config(mode);
        let (policy, mut store) = Policy::build(&cfg, 11).unwrap();
        // perturb everything except the gates so the transform output is far from zero
        let mut rng = rng_for(99, 0);
        for id in store.ids().collect::<Vec<_>>() {
            if !policy.injection.alpha.contains(&id) {
                let t = store.get_mut(id);
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let (expert, mut alone) = Policy::build_expert_only(&cfg.expert, 11).unwrap();
        let names: Vec<String> = alone.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let src = store.get(store.id_of(&name).unwrap()).clone();
            let id = alone.id_of(&name).unwrap();
            *alone.get_mut(id) = src;
        }
        let provider = AssistantInjection {
            policy: &policy,
            clouds: &clouds,
            state: &obs.state,
            eps_aux_override: None,
        };
        let injected = sample_actions(&store, &policy.expert, &obs, &provider, &seeds).unwrap();
        let plain = sample_actions(&alone, &expert, &obs, &NoInjection, &seeds).unwrap();
        assert_eq!(injected.data(), plain.data(), "{mode:?}");

        set_alphas(&policy, &mut store, &[0.5, -0.5]);
        let opened = sample_actions(&store, &policy.expert, &obs, &provider, &seeds).unwrap();
        assert!(opened.data().iter().zip(plain.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}

#[test]
fn auxiliary_prediction_never_reaches_executed_actions() {
    let data = samples(3);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let (obs, clouds) = observation(&refs).unwrap();
    let seeds = [8, 9, 10];
    let rows = 3 * 8;
    let adversarial = [
        Tensor::full(&[rows, 4], f64::NAN),
        Tensor::full(&[rows, 4], 1e300),
        Tensor::new(&[rows, 4], (0..rows * 4).map(|i| if i % 2 == 0 { -1e9 } else { f64::INFINITY }).collect())
            .unwrap(),
    ];
    for mode in MODES {
        let (policy, mut store) = Policy::build(&config(mode), 5).unwrap();
        set_alphas(&policy, &mut store, &[0.8, 1.3]);
        let run = |over: Option<&Tensor>| {
            let provider = AssistantInjection {
                policy: &policy,
                clouds: &clouds,
                state: &obs.state,
                eps_aux_override: over,
            };
            sample_actions(&store, &policy.expert, &obs, &provider, &seeds).unwrap()
        };
        let honest = run(None);
        for bad in &adversarial {
            let got = run(Some(bad));
            let same = got.data().iter().zip(honest.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{mode:?}");
        }
    }
}

#[test]
fn global_point_feature_ignores_point_order() {
    let (policy, store) = Policy::build(&config(InjectionMode::Projection), 2).unwrap();
    let mut rng = rng_for(21, 0);
    let n = 40;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let cloud = |order: &[usize]| Tensor::new(&[n, 3], order.iter().flat_map(|&i| pts[i]).collect()).unwrap();
    let identity: Vec<usize> = (0..n).collect();
    let (per_point, global) = policy.pointnet.encode_values(&store, &cloud(&identity)).unwrap();
    let width = global.len();
    for _ in 0..100 {
        let mut perm = identity.clone();
        perm.shuffle(&mut rng);
        let (pp, g) = policy.pointnet.encode_values(&store, &cloud(&perm)).unwrap();
        assert_eq!(g, global);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(pp.row(row), per_point.row(src));
        }
        assert_eq!(pp.shape(), &[n, width]);
    }
}

#[test]
fn closed_gates_still_receive_gradient() {
    let data = samples(6);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    for mode in MODES {
        let cfg = PolicyConfig {
            lambda: 0.0,
            ..config(mode)
        };
        let (policy, store) = Policy::build(&cfg, 3).unwrap();
        let batch = TrainBatch::draw(&refs, cfg.expert.diffusion_steps, &mut rng_for(1, 0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = losses(&mut tape, &p, &policy, &batch).unwrap();
        let grads = tape.backward(l.total).unwrap();
        let g = p.collect_grads(&store, &grads);
        for (id, grad) in store.ids().zip(&g) {
            let name = store.name(id);
            if policy.injection.alpha.contains(&id) {
                assert!(grad.item().abs() > 1e-9, "{mode:?} {name} has no gradient");
            } else if !name.starts_with("expert.") {
                // everything upstream of a closed gate is multiplied by zero
                assert_eq!(grad.max_abs(), 0.0, "{mode:?} {name}");
            }
        }
    }
}

#[test]
fn without_injection_the_main_loss_ignores_the_assistant() {
    let data = samples(4);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let cfg = PolicyConfig {
        inject: false,
        ..config(InjectionMode::Projection)
    };
    let (policy, store) = Policy::build(&cfg, 3).unwrap();
    let batch = TrainBatch::draw(&refs, cfg.expert.diffusion_steps, &mut rng_for(2, 0)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = losses(&mut tape, &p, &policy, &batch).unwrap();
    let main = tape.value(l.main).item();
    let aux = tape.value(l.aux.unwrap()).item();
    assert!((tape.value(l.total).item() - (main + 0.5 * aux)).abs() < 1e-12);
    let grads = tape.backward(l.main).unwrap();
    let g = p.collect_grads(&store, &grads);
    for (id, grad) in store.ids().zip(&g) {
        if !store.name(id).starts_with("expert.") {
            assert_eq!(grad.max_abs(), 0.0, "{}", store.name(id));
        }
    }
}

#[test]
fn ddim_with_zero_noise_prediction_rescales_by_the_cumulative_product() {
    let schedule = Schedule::linear(8, 0.05, 0.5).unwrap();
    let start = initial_noise(&[8, 4], 17);
    for n in [1, 2, 3, 8] {
        let steps = strided_timesteps(8, n).unwrap();
        let out = ddim_sample(&schedule, start.clone(), &steps, |a, _| Ok(Tensor::zeros(a.shape()))).unwrap();
        let factor = 1.0 / schedule.alpha_bar(8).sqrt();
        for (o, s) in out.data().iter().zip(start.data()) {
            assert!((o - s * factor).abs() <= 1e-12 * (1.0 + o.abs()), "n = {n}");
        }
    }
}

#[test]
fn ddim_with_oracle_noise_recovers_the_clean_chunk() {
    let schedule = Schedule::linear(8, 0.05, 0.5).unwrap();
    let clean = initial_noise(&[8, 4], 3);
    let eps = initial_noise(&[8, 4], 4);
    let start = schedule.noisy(&clean, &eps, 8).unwrap();
    for n in [1, 2, 5, 8] {
        let steps = strided_timesteps(8, n).unwrap();
        let out = ddim_sample(&schedule, start.clone(), &steps, |a, t| {
            let ab = schedule.alpha_bar(t);
            let data = a
                .data()
                .iter()
                .zip(clean.data())
                .map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt())
                .collect();
            Ok(Tensor::new(a.shape(), data).unwrap())
        })
        .unwrap();
        for (o, c) in out.data().iter().zip(clean.data()) {
            assert!((o - c).abs() < 1e-12, "n = {n}");
        }
    }
}

#[test]
fn linear_schedule_products() {
    let s = Schedule::linear(8, 0.05, 0.5).unwrap();
    let mut prod = 1.0;
    for t in 1..=8 {
        let beta = 0.05 + 0.45 * (t - 1) as f64 / 7.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
    }
    assert_eq!(strided_timesteps(8, 2).unwrap(), vec![8, 4]);
    assert_eq!(strided_timesteps(8, 3).unwrap(), vec![8, 6, 3]);
}
