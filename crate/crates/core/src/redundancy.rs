//! Head redundancy instruments for multi-head layers: cosine similarity
//! between per-head attention maps, and δ-mask head ablation sweeps.

use std::fmt::Write as _;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::tensor::{no_grad, Tensor};
use crate::train::{evaluate, evaluate_ctx, Split};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSimReport {
    pub report_version: u32,
    pub layer: Option<usize>,
    pub heads: usize,
    pub samples: usize,
    /// Mean over samples of the ordered-pair average cosine.
    pub head_sim: f64,
    /// `heads × heads` cosines, averaged over samples.
    pub matrix: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of the heads in `maps: [N, heads, T, T]`, each head's map
/// flattened per sample.
pub fn head_similarity(maps: &Tensor) -> Result<HeadSimReport> {
    let (n, nh, t1, t2) = maps.dims4()?;
    if nh < 2 {
        return Err(Error::Invalid(format!("head similarity needs at least 2 heads, got {nh}")));
    }
    let per = t1 * t2;
    let v = maps.to_vec_f64();
    let mut matrix = vec![vec![0.0; nh]; nh];
    for s in 0..n {
        let head = |h: usize| &v[(s * nh + h) * per..(s * nh + h + 1) * per];
        for h in 0..nh {
            if head(h).iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroNormHead(h));
            }
        }
        for j in 0..nh {
            matrix[j][j] += 1.0;
            for k in j + 1..nh {
                let c = cosine(head(j), head(k));
                matrix[j][k] += c;
                matrix[k][j] += c;
            }
        }
    }
    let mut off = 0.0;
    for (j, row) in matrix.iter_mut().enumerate() {
        for (k, x) in row.iter_mut().enumerate() {
            *x /= n as f64;
            if j != k {
                off += *x;
            }
        }
    }
    Ok(HeadSimReport {
        report_version: REPORT_VERSION,
        layer: None,
        heads: nh,
        samples: n,
        head_sim: off / (nh * (nh - 1)) as f64,
        matrix,
    })
}

/// Attention maps of layer `layer` for input `x`.
pub fn layer_maps(model: &Model, layer: usize, x: &Tensor) -> Result<Tensor> {
    let _g = no_grad();
    let sink = Mutex::new(Vec::new());
    model.forward_ctx(
        x,
        &Ctx {
            capture: Some(&sink),
            ..Ctx::eval()
        },
    )?;
    let maps = sink.into_inner().expect("capture lock");
    maps.into_iter()
        .find(|(id, _)| *id == layer)
        .map(|(_, a)| a)
        .ok_or(Error::UnknownLayer(layer))
}

/// Head similarity of one multi-head layer over the images of `x`.
pub fn layer_similarity(model: &Model, layer: usize, x: &Tensor) -> Result<HeadSimReport> {
    model.mhsa(layer)?;
    let mut r = head_similarity(&layer_maps(model, layer, x)?)?;
    r.layer = Some(layer);
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Score {
    pub accuracy: f64,
    pub loss: f64,
}

/// Evaluates `model` with `mask` applied at attention layer `layer` only.
/// The model itself is not modified.
pub fn ablate_heads(model: &Model, layer: usize, mask: &[f64], eval: &Split) -> Result<Score> {
    let m = model.mhsa(layer)?;
    if mask.len() != m.heads {
        return Err(Error::Invalid(format!("mask has {} entries for {} heads", mask.len(), m.heads)));
    }
    if let Some(&d) = mask.iter().find(|&&d| d != 0.0 && d != 1.0) {
        return Err(Error::NonBinaryMask(d as f32));
    }
    let ctx = Ctx {
        mask: Some((layer, mask)),
        ..Ctx::eval()
    };
    let r = evaluate_ctx(model, eval, &ctx)?;
    Ok(Score {
        accuracy: r.accuracy,
        loss: r.loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    /// Keep one head, drop the rest.
    OneHot,
    /// Drop one head, keep the rest.
    LeaveOneOut,
}

impl Sweep {
    pub fn masks(self, heads: usize) -> Vec<Vec<f64>> {
        (0..heads)
            .map(|h| {
                (0..heads)
                    .map(|j| match self {
                        Sweep::OneHot => f64::from(j == h),
                        Sweep::LeaveOneOut => f64::from(j != h),
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskScore {
    pub mask: Vec<f64>,
    pub accuracy: f64,
    pub loss: f64,
    /// Accuracy minus the baseline accuracy.
    pub delta_accuracy: f64,
    /// Loss minus the baseline loss.
    pub delta_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub report_version: u32,
    pub layer: usize,
    pub heads: usize,
    pub sweep: Sweep,
    /// All-ones mask.
    pub baseline: Score,
    pub entries: Vec<MaskScore>,
    /// Highest accuracy over the sweep, ties to the lowest head index.
    pub best_accuracy: f64,
    pub best_head: usize,
    pub delta_accuracy_sum: f64,
}

/// Evaluates every mask of `sweep` at `layer`, in parallel.
pub fn sweep(model: &Model, layer: usize, kind: Sweep, eval: &Split) -> Result<AblationReport> {
    let heads = model.mhsa(layer)?.heads;
    let base = evaluate(model, eval)?;
    let baseline = Score {
        accuracy: base.accuracy,
        loss: base.loss,
    };
    let entries = kind
        .masks(heads)
        .into_par_iter()
        .map(|mask| {
            let s = ablate_heads(model, layer, &mask, eval)?;
            Ok(MaskScore {
                mask,
                accuracy: s.accuracy,
                loss: s.loss,
                delta_accuracy: s.accuracy - baseline.accuracy,
                delta_loss: s.loss - baseline.loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_head = 0;
    for (h, e) in entries.iter().enumerate() {
        if e.accuracy > entries[best_head].accuracy {
            best_head = h;
        }
    }
    Ok(AblationReport {
        report_version: REPORT_VERSION,
        layer,
        heads,
        sweep: kind,
        baseline,
        best_accuracy: entries[best_head].accuracy,
        best_head,
        delta_accuracy_sum: entries.iter().map(|e| e.delta_accuracy).sum(),
        entries,
    })
}

/// Each layer reduced to a single head, one head at a time.
pub fn best_single_head_sweep(model: &Model, layer: usize, eval: &Split) -> Result<AblationReport> {
    sweep(model, layer, Sweep::OneHot, eval)
}

/// Each head removed in turn.
pub fn leave_one_out_sweep(model: &Model, layer: usize, eval: &Split) -> Result<AblationReport> {
    sweep(model, layer, Sweep::LeaveOneOut, eval)
}

fn mask_label(mask: &[f64]) -> String {
    mask.iter().map(|&d| if d == 1.0 { '1' } else { '0' }).collect()
}

impl HeadSimReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let layer = self.layer.map_or("-".into(), |l| l.to_string());
        writeln!(s, "layer {layer}  heads {}  samples {}  head_sim {:.6}", self.heads, self.samples, self.head_sim)
            .expect("write to string");
        write!(s, "{:>6}", "").expect("write to string");
        for k in 0..self.heads {
            write!(s, " {:>9}", format!("h{k}")).expect("write to string");
        }
        s.push('\n');
        for (j, row) in self.matrix.iter().enumerate() {
            write!(s, "{:>6}", format!("h{j}")).expect("write to string");
            for x in row {
                write!(s, " {x:>9.6}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.sweep {
            Sweep::OneHot => "one-hot",
            Sweep::LeaveOneOut => "leave-one-out",
        };
        writeln!(
            s,
            "layer {}  heads {}  sweep {kind}  baseline acc {:.4} loss {:.4}",
            self.layer, self.heads, self.baseline.accuracy, self.baseline.loss
        )
        .expect("write to string");
        let w = self.heads.max(4);
        writeln!(s, "{:>w$}  {:>8}  {:>8}  {:>9}  {:>9}", "mask", "acc", "loss", "d_acc", "d_loss")
            .expect("write to string");
        for e in &self.entries {
            writeln!(
                s,
                "{:>w$}  {:>8.4}  {:>8.4}  {:>+9.4}  {:>+9.4}",
                mask_label(&e.mask),
                e.accuracy,
                e.loss,
                e.delta_accuracy,
                e.delta_loss
            )
            .expect("write to string");
        }
        writeln!(
            s,
            "best head {}  acc {:.4}  sum d_acc {:+.4}",
            self.best_head, self.best_accuracy, self.delta_accuracy_sum
        )
        .expect("write to string");
        s
    }
}
