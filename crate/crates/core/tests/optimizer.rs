use std::collections::BTreeMap;

use ligero::encoder::{build_model, EncoderConfig, GradientSet, ParameterSet, Tensor};
use ligero::optim::{is_unadapted, lamb_step, OptimizerSettings, OptimizerState};
use ligero::schedule::{lr_at, TrainingSchedule};
use ligero::Error;
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        embedding: 4,
        heads: 2,
        intermediate: 16,
        vocab_size: 20,
        max_positions: 8,
        share_layers: true,
        use_token_type: true,
        use_pooler: true,
        dropout: 0.0,
    }
}

fn with_scalar(w: f64) -> ParameterSet {
    let mut params = build_model(&tiny_config(), 0).unwrap();
    params
        .insert_head("head.scalar", Tensor::from_elem(IxDyn(&[1]), w))
        .unwrap();
    params
}

fn random_grads(params: &ParameterSet, rng: &mut ChaCha8Rng) -> GradientSet {
    let mut grads = GradientSet::zeros_like(params);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        grads
            .get_mut(&name)
            .unwrap()
            .mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    grads
}

#[test]
fn scalar_worked_example() {
    let mut params = with_scalar(1.0);
    let mut grads = GradientSet::zeros_like(&params);
    grads.get_mut("head.scalar").unwrap()[[0]] = 0.1;
    let settings = OptimizerSettings {
        weight_decay: 0.0,
        ..OptimizerSettings::lamb()
    };
    let mut state = OptimizerState::new(&params, settings);
    let stats = lamb_step(&mut params, &grads, &mut state, 0.1).unwrap();
    assert_eq!(state.step(), 1);

    // After one step m̂ = 0.1 and v̂ = 0.01, so u = 0.1 / (0.1 + 1e-6).
    let u: f64 = 0.1 / (0.1 + 1e-6);
    assert!((u - 0.99999).abs() < 1e-6);
    assert!((stats.trust_ratios["head.scalar"] - 1.0 / u).abs() < 1e-12);
    let w = params.get("head.scalar").unwrap()[[0]];
    assert!((w - 0.9).abs() < 1e-5, "{w}");
}

/// Bias-corrected Adam with decoupled decay, written out independently.
struct ReferenceAdam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, params: &mut BTreeMap<String, Vec<f64>>, grads: &GradientSet, s: OptimizerSettings, lr: f64) {
        self.t += 1;
        for (name, w) in params.iter_mut() {
            let g: Vec<f64> = grads.get(name).unwrap().iter().copied().collect();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let decay = if is_unadapted(name) { 0.0 } else { s.weight_decay };
            for i in 0..w.len() {
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - s.beta1.powi(self.t));
                let v_hat = v[i] / (1.0 - s.beta2.powi(self.t));
                w[i] -= lr * (m_hat / (v_hat.sqrt() + s.epsilon) + decay * w[i]);
            }
        }
    }
}

fn flatten(params: &ParameterSet) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .map(|(k, t)| (k.to_string(), t.iter().copied().collect()))
        .collect()
}

fn adam_equivalence(weight_decay: f64) {
    let mut params = with_scalar(0.5);
    let settings = OptimizerSettings {
        weight_decay,
        ..OptimizerSettings::adamw()
    };
    let mut state = OptimizerState::new(&params, settings);
    let mut reference = ReferenceAdam {
        m: BTreeMap::new(),
        v: BTreeMap::new(),
        t: 0,
    };
    let mut expected = flatten(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 0..5 {
        let grads = random_grads(&params, &mut rng);
        let lr = 1e-3 * (step + 1) as f64;
        let stats = lamb_step(&mut params, &grads, &mut state, lr).unwrap();
        assert!(stats.trust_ratios.values().all(|&r| r == 1.0));
        reference.step(&mut expected, &grads, settings, lr);
    }
    for (name, tensor) in params.iter() {
        for (a, b) in tensor.iter().zip(&expected[name]) {
            assert!((a - b).abs() <= 1e-12, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn without_trust_ratio_matches_reference_adam() {
    adam_equivalence(0.0);
}

#[test]
fn without_trust_ratio_matches_reference_adam_with_decay() {
    adam_equivalence(0.01);
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut params = with_scalar(1.0);
    let before = params.clone();
    let grads = GradientSet::zeros_like(&params);
    let settings = OptimizerSettings {
        weight_decay: 0.0,
        ..OptimizerSettings::lamb()
    };
    let mut state = OptimizerState::new(&params, settings);
    lamb_step(&mut params, &grads, &mut state, 0.1).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.step(), 1);
}

#[test]
fn non_finite_gradient_fails_before_mutation() {
    let mut params = with_scalar(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut grads = random_grads(&params, &mut rng);
    grads.get_mut("layer.0.ffn.inner.weight").unwrap()[[3, 1]] = f64::INFINITY;
    let mut state = OptimizerState::new(&params, OptimizerSettings::lamb());
    let (params_before, state_before) = (params.clone(), state.clone());
    let err = lamb_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(params, params_before);
    assert_eq!(state, state_before);
}

#[test]
fn trust_ratio_is_per_tensor_and_skips_biases() {
    let mut params = with_scalar(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grads = random_grads(&params, &mut rng);
    let mut state = OptimizerState::new(&params, OptimizerSettings::lamb());
    let stats = lamb_step(&mut params, &grads, &mut state, 0.01).unwrap();
    assert_eq!(stats.trust_ratios["layer.0.ffn.inner.bias"], 1.0);
    assert_eq!(stats.trust_ratios["embeddings.norm.gain"], 1.0);
    assert_ne!(
        stats.trust_ratios["layer.0.ffn.inner.weight"],
        stats.trust_ratios["layer.0.ffn.outer.weight"]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relative_update_is_scale_invariant(scale in 0.01f64..100.0, seed in 0u64..1000) {
        let relative = |factor: f64| {
            let mut params = with_scalar(1.0);
            params.get_mut("layer.0.ffn.inner.weight").unwrap().mapv_inplace(|w| w * factor);
            let before = params.get("layer.0.ffn.inner.weight").unwrap().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grads = random_grads(&params, &mut rng);
            grads.get_mut("layer.0.ffn.inner.weight").unwrap().mapv_inplace(|g| g * factor);
            let settings = OptimizerSettings { weight_decay: 0.0, ..OptimizerSettings::lamb() };
            let mut state = OptimizerState::new(&params, settings);
            lamb_step(&mut params, &grads, &mut state, 0.05).unwrap();
            let after = params.get("layer.0.ffn.inner.weight").unwrap();
            let delta = (after - &before).mapv(|x| x * x).sum().sqrt();
            delta / before.mapv(|x| x * x).sum().sqrt()
        };
        let base = relative(1.0);
        prop_assert!((base - 0.05).abs() < 1e-12);
        prop_assert!((relative(scale) - base).abs() < 1e-12);
    }

    #[test]
    fn lr_is_piecewise_linear_with_peak_at_warmup(warmup in 1u64..500, extra in 1u64..5000, peak in 1e-5f64..1e-2) {
        let s = TrainingSchedule {
            peak_lr: peak,
            batch_size: 8,
            warmup_ratio: warmup as f64 / (warmup + extra) as f64,
            warmup_steps: warmup,
            total_steps: warmup + extra,
        };
        prop_assert_eq!(lr_at(warmup, &s).unwrap(), peak);
        prop_assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        prop_assert_eq!(lr_at(s.total_steps, &s).unwrap(), 0.0);
        let mut max = 0.0f64;
        for step in (0..=s.total_steps).step_by(7) {
            let lr = lr_at(step, &s).unwrap();
            prop_assert!(lr <= peak);
            max = max.max(lr);
        }
        prop_assert!(lr_at(s.total_steps + 1, &s).is_err());
        let mid = warmup / 2;
        if warmup >= 2 && mid >= 1 {
            let (a, b, c) = (lr_at(mid - 1, &s).unwrap(), lr_at(mid, &s).unwrap(), lr_at(mid + 1, &s).unwrap());
            prop_assert!(((b - a) - (c - b)).abs() < 1e-15);
        }
        prop_assert!(max <= peak);
    }
}
