//! Deterministic mini-batch training on synthetic data.

mod data;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use data::{gen_dataset, BlobStyle, DataParams, Split, SyntheticDataset};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Module, Slot};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball SGD; weight decay is added to the gradient.
    Sgd { momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }

    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Applied to weight matrices and kernels only, not to norms or biases.
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub cosine: bool,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last one); 0 evaluates
    /// only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 0.05,
            weight_decay: 5e-4,
            optimizer: Optimizer::sgd(),
            cosine: true,
            seed: 0,
            eval_every: 25,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => bad("momentum must be in [0, 1)"),
            Optimizer::AdamW { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("AdamW betas must be in [0, 1) and eps positive")
            }
            _ => Ok(()),
        }
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine {
            return self.lr;
        }
        let t = step as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_eval: EvalResult,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |p| p.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.loss)
    }

    /// `step,lr,loss,eval_acc`, with an empty accuracy where none was taken.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,eval_acc\n");
        for p in &self.curve {
            let acc = p.eval_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{}", p.step, p.lr, p.loss, acc).expect("write to string");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy and mean cross-entropy with inference-mode statistics.
pub fn evaluate(model: &Model, split: &Split) -> Result<EvalResult> {
    evaluate_ctx(model, split, &Ctx::eval())
}

/// As [`evaluate`], forwarding `ctx` (with `train` forced off).
pub fn evaluate_ctx(model: &Model, split: &Split, ctx: &Ctx) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let _g = no_grad();
    let ctx = Ctx { train: false, ..*ctx };
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = split.batch(chunk)?;
        let logits = model.forward_ctx(&x, &ctx)?;
        loss_sum += logits.cross_entropy(&labels)?.item()? * chunk.len() as f64;
        correct += logits.argmax_rows()?.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = split.len();
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        loss: loss_sum / n as f64,
        samples: n,
    })
}

struct State {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn apply_update(model: &mut Model, cfg: &TrainConfig, state: &mut State, lr: f64) -> Result<()> {
    state.t += 1;
    let mut i = 0;
    let mut failure = None;
    model.visit_mut("", &mut |name, t, slot| {
        if slot != Slot::Param || failure.is_some() {
            return;
        }
        let w = t.to_vec_f64();
        let g = t.grad().map(|g| g.to_vec_f64()).unwrap_or_else(|| vec![0.0; w.len()]);
        if state.m.len() <= i {
            state.m.push(vec![0.0; w.len()]);
            state.v.push(vec![0.0; w.len()]);
        }
        let decay = if t.rank() >= 2 { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut out = w.clone();
        match cfg.optimizer {
            Optimizer::Sgd { momentum } => {
                for j in 0..w.len() {
                    m[j] = momentum * m[j] + g[j] + decay * w[j];
                    out[j] = w[j] - lr * m[j];
                }
            }
            Optimizer::AdamW { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(state.t);
                let c2 = 1.0 - beta2.powi(state.t);
                for j in 0..w.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let step = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    out[j] = w[j] - lr * (step + decay * w[j]);
                }
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            failure = Some(format!("non-finite update of {name}"));
            return;
        }
        let new = Tensor::from_f64_vec(out, t.shape()).expect("same shape").to_dtype(t.dtype());
        *t = new.with_requires_grad(true);
        i += 1;
    });
    match failure {
        Some(reason) => Err(Error::Diverged { step: state.t as usize - 1, reason }),
        None => Ok(()),
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place on `data.train`, recording the loss of every
/// step. Deterministic for a given model, data and config.
pub fn train(model: &mut Model, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.is_fused() {
        return Err(Error::Invalid("cannot train a fused model".into()));
    }
    if data.params.resolution != model.config.input_resolution {
        return Err(Error::Config(format!(
            "data resolution {} differs from model resolution {}",
            data.params.resolution, model.config.input_resolution
        )));
    }
    if data.params.classes > model.config.num_classes {
        return Err(Error::Config(format!(
            "{} classes exceed the model's {} outputs",
            data.params.classes, model.config.num_classes
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut state = State {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    model.set_requires_grad(true);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == n {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let take = (cfg.batch_size - idx.len()).min(n - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, labels) = data.train.batch(&idx)?;
        let lr = cfg.lr_at(step);
        let loss = model
            .forward_ctx(&x, &Ctx::train())
            .and_then(|y| y.cross_entropy(&labels))
            .map_err(|e| diverged(step, e))?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss {value}"),
            });
        }
        loss.backward().map_err(|e| diverged(step, e))?;
        apply_update(model, cfg, &mut state, lr)?;
        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        let eval_acc = if last || due {
            Some(evaluate(model, &data.eval)?.accuracy)
        } else {
            None
        };
        curve.push(CurvePoint {
            step,
            lr,
            loss: value,
            eval_acc,
        });
    }
    model.set_requires_grad(false);
    let final_eval = evaluate(model, &data.eval)?;
    Ok(TrainReport { curve, final_eval })
}
