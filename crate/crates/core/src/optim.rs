//! LAMB and its trust-ratio-free reduction (Adam with decoupled decay).
//!
//! Per named tensor, with bias-corrected moments:
//!
//! ```text
//! u = m̂ / (√v̂ + ε) + λ·w
//! r = ‖w‖ / ‖u‖        (1 when either norm is zero, or when disabled)
//! w ← w − lr · r · u
//! ```
//!
//! Biases and norm gains get neither decay nor layer adaptation: for them
//! λ = 0 and r = 1.

use std::collections::BTreeMap;

use crate::encoder::{GradientSet, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::kv::KvDocument;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// False forces r = 1.
    pub trust_ratio: bool,
}

impl OptimizerSettings {
    pub fn lamb() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            trust_ratio: true,
        }
    }

    pub fn adamw() -> Self {
        Self {
            trust_ratio: false,
            ..Self::lamb()
        }
    }

    pub fn name(&self) -> &'static str {
        if self.trust_ratio {
            "lamb"
        } else {
            "adamw"
        }
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("kind", self.name());
        doc.set("beta1", self.beta1);
        doc.set("beta2", self.beta2);
        doc.set("epsilon", self.epsilon);
        doc.set("weight_decay", self.weight_decay);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let kind: String = doc.require("kind")?;
        let trust_ratio = match kind.as_str() {
            "lamb" => true,
            "adamw" => false,
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        Ok(Self {
            beta1: doc.require("beta1")?,
            beta2: doc.require("beta2")?,
            epsilon: doc.require("epsilon")?,
            weight_decay: doc.require("weight_decay")?,
            trust_ratio,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    settings: OptimizerSettings,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Trust ratio applied to each tensor.
    pub trust_ratios: BTreeMap<String, f64>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, settings: OptimizerSettings) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.raw_dim())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            settings,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_parts(
        settings: OptimizerSettings,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
        params: &ParameterSet,
    ) -> Result<Self> {
        for (name, tensor) in params.iter() {
            for moments in [&m, &v] {
                match moments.get(name) {
                    Some(t) if t.shape() == tensor.shape() => {}
                    _ => {
                        return Err(Error::Shape(format!(
                            "optimizer moment for {name} missing or misshapen"
                        )))
                    }
                }
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Shape("optimizer moments for unknown tensors".into()));
        }
        Ok(Self { settings, step, m, v })
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.m.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn second_moments(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.v.iter().map(|(k, t)| (k.as_str(), t))
    }

    /// Adds zeroed moments for tensors that appeared after the state was
    /// created (for example a freshly attached head).
    pub fn track_new(&mut self, params: &ParameterSet) {
        for (name, tensor) in params.iter() {
            self.m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(tensor.raw_dim()));
            self.v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(tensor.raw_dim()));
        }
    }
}

/// Biases and norm gains, which skip decay and layer adaptation.
pub fn is_unadapted(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name.ends_with("_bias")
}

fn norm(t: &Tensor) -> f64 {
    t.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One optimizer update. Gradients are validated before anything changes.
pub fn lamb_step(
    params: &mut ParameterSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepStats> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    for (name, w) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        if g.shape() != w.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        if !state.m.contains_key(name) {
            return Err(Error::Shape(format!("optimizer state lacks {name}")));
        }
    }

    let s = state.settings;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let mut stats = StepStats::default();
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("validated");
        let m = state.m.get_mut(name).expect("validated");
        let v = state.v.get_mut(name).expect("validated");
        m.zip_mut_with(g, |m, &g| *m = s.beta1 * *m + (1.0 - s.beta1) * g);
        v.zip_mut_with(g, |v, &g| *v = s.beta2 * *v + (1.0 - s.beta2) * g * g);
        let adapted = !is_unadapted(name);
        let decay = if adapted { s.weight_decay } else { 0.0 };
        let mut u = Tensor::zeros(w.raw_dim());
        ndarray::Zip::from(&mut u)
            .and(&*m)
            .and(&*v)
            .and(&*w)
            .for_each(|u, &m, &v, &w| {
                *u = (m / c1) / ((v / c2).sqrt() + s.epsilon) + decay * w;
            });
        let ratio = if s.trust_ratio && adapted {
            let (wn, un) = (norm(w), norm(&u));
            if wn > 0.0 && un > 0.0 {
                wn / un
            } else {
                1.0
            }
        } else {
            1.0
        };
        w.zip_mut_with(&u, |w, &u| *w -= lr * ratio * u);
        stats.trust_ratios.insert(name.to_string(), ratio);
    }
    Ok(stats)
}
