//! Analytic-vs-numeric gradient suite over every differentiable primitive,
//! every layer, and a whole tiny network.
//!
//! Each case computes `loss = sum(f(inputs) ⊙ R)` for a fixed random `R`
//! in `f64`, runs backward, and compares each input's gradient with central
//! differences. Coordinates whose perturbation flips a ReLU are skipped;
//! the difference quotient there measures the kink, not the derivative.
//!
//! A case's error is `‖a − n‖ / max(‖a‖, ‖n‖)` over every checked
//! coordinate of every input. Per-input errors are kept for diagnosis only:
//! an input whose gradient is structurally zero (a bias feeding a
//! batch-statistics norm, say) has a ratio of pure rounding noise.

use serde::Serialize;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{BnLinear, BottleneckAttention, ConvBn, Ctx, Ffn, Mhsa, Module, Shsa, Slot};
use crate::rng::Rng;
use crate::tensor::finite_diff::{finite_diff_at, relative_error};
use crate::tensor::{Conv2dParams, DType, Tensor};

pub const EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    /// Input with the largest absolute gradient error.
    pub worst_input: String,
    pub coords: usize,
    pub kinks_skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    /// Finite-difference step.
    pub eps: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.rel_err < self.tol)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

type CaseFn = dyn Fn(&[Tensor]) -> Result<Tensor>;

/// Compares analytic and numeric gradients of `f` at `inputs`, checking at
/// most `max_coords` sampled coordinates per input.
pub fn check_case(
    name: &str,
    seed: u64,
    inputs: &[(String, Tensor)],
    f: &CaseFn,
    max_coords: usize,
    eps: f64,
) -> Result<CaseResult> {
    let mut rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(_, t)| t.to_dtype(DType::F64).with_requires_grad(true))
        .collect();
    let out = f(&leaves)?;
    let r = Tensor::from_f64_vec((0..out.numel()).map(|_| rng.normal()).collect(), out.shape())?;
    out.mul(&r)?.sum()?.backward()?;

    let mut worst = (-1.0f64, String::new());
    let mut kinks = 0;
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, (label, _)) in inputs.iter().enumerate() {
        let n = leaves[i].numel();
        let analytic = leaves[i]
            .grad()
            .map(|g| g.to_vec_f64())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut idx: Vec<usize> = (0..n).collect();
        if n > max_coords {
            rng.shuffle(&mut idx);
            idx.truncate(max_coords);
            idx.sort_unstable();
        }
        let plain: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
        let samples = finite_diff_at(
            |t| {
                let mut args = plain.clone();
                args[i] = t.clone();
                f(&args)?.mul(&r)?.sum()?.item()
            },
            &plain[i],
            eps,
            &idx,
        )?;
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for s in &samples {
            if s.kink {
                kinks += 1;
                continue;
            }
            a.push(analytic[s.index]);
            num.push(s.value);
        }
        let abs_err = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if abs_err > worst.0 {
            worst = (abs_err, label.clone());
        }
        all_a.extend(a);
        all_n.extend(num);
    }
    Ok(CaseResult {
        name: name.to_string(),
        seed,
        rel_err: relative_error(&all_a, &all_n),
        worst_input: worst.1,
        coords: all_a.len(),
        kinks_skipped: kinks,
    })
}

/// Inputs `[x, params...]` for a module, and a closure that rebuilds the
/// module from such a list and runs `fwd`.
fn module_case<M: Module + Clone + 'static>(
    module: &M,
    x: &Tensor,
    fwd: impl Fn(&M, &Tensor) -> Result<Tensor> + 'static,
) -> (Vec<(String, Tensor)>, Box<CaseFn>) {
    let mut m = module.clone();
    m.cast(DType::F64);
    let mut inputs = vec![("x".to_string(), x.clone())];
    inputs.extend(m.parameters());
    let f = move |ts: &[Tensor]| {
        let mut mm = m.clone();
        let mut it = ts[1..].iter();
        mm.visit_mut("", &mut |_, t, s| {
            if s == Slot::Param {
                *t = it.next().expect("one tensor per parameter").clone();
            }
        });
        fwd(&mm, &ts[0])
    };
    (inputs, Box::new(f))
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect()
}

/// Perturbs BN/LN affine parameters away from 1/0 so their gradients are
/// exercised at a generic point.
fn jitter_affine<M: Module>(m: &mut M, rng: &mut Rng) {
    m.visit_mut("", &mut |name, t, slot| {
        let n = t.numel();
        let shape = t.shape().to_vec();
        let v = if name.ends_with("running_var") {
            (0..n).map(|_| 0.5 + rng.uniform()).collect()
        } else if name.ends_with("running_mean") || (slot == Slot::Param && name.ends_with("norm.bias")) {
            (0..n).map(|_| 0.1 * rng.normal()).collect()
        } else if name.ends_with("bn.weight") || name.ends_with("norm.weight") {
            (0..n).map(|_| 1.0 + 0.2 * rng.normal()).collect()
        } else if name.ends_with("bn.bias") {
            (0..n).map(|_| 0.1 * rng.normal()).collect()
        } else {
            return;
        };
        *t = Tensor::from_f64_vec(v, &shape).expect("same shape").to_dtype(t.dtype());
    });
}

struct Case {
    name: String,
    inputs: Vec<(String, Tensor)>,
    f: Box<CaseFn>,
    max_coords: usize,
}

fn prim(name: &str, inputs: Vec<Tensor>, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Case {
    Case {
        name: name.to_string(),
        inputs: named(inputs),
        f: Box::new(f),
        max_coords: 48,
    }
}

fn layer<M: Module + Clone + 'static>(
    name: &str,
    m: &M,
    x: Tensor,
    max_coords: usize,
    fwd: impl Fn(&M, &Tensor) -> Result<Tensor> + 'static,
) -> Case {
    let (inputs, f) = module_case(m, &x, fwd);
    Case {
        name: name.to_string(),
        inputs,
        f,
        max_coords,
    }
}

fn primitive_cases(rng: &mut Rng) -> Vec<Case> {
    let mut n = |shape: &[usize]| rng.normal_tensor(shape, 1.0).to_dtype(DType::F64);
    let mut v = vec![
        prim("relu", vec![n(&[3, 4])], |t| t[0].relu()),
        prim("add", vec![n(&[2, 3]), n(&[2, 3])], |t| t[0].add(&t[1])),
        prim("mul", vec![n(&[2, 3]), n(&[2, 3])], |t| t[0].mul(&t[1])),
        prim("scale", vec![n(&[5])], |t| t[0].scale(-0.7)),
        prim("scale_axis1", vec![n(&[2, 3, 2])], |t| t[0].scale_axis1(&[1.0, 0.0, 1.0])),
        prim("sum", vec![n(&[2, 2, 2])], |t| t[0].sum()),
        prim("mean", vec![n(&[2, 5])], |t| t[0].mean()),
        prim("reshape", vec![n(&[2, 6])], |t| t[0].reshape(&[3, 4])),
        prim("transpose_last2", vec![n(&[2, 3, 4])], |t| t[0].transpose_last2()),
        prim("permute", vec![n(&[2, 3, 2, 2])], |t| t[0].permute(&[0, 2, 1, 3])),
        prim("concat_channels", vec![n(&[2, 2, 2, 2]), n(&[2, 3, 2, 2])], |t| {
            Tensor::concat_channels(&[&t[0], &t[1]])
        }),
        prim("split_channels", vec![n(&[2, 5, 2, 2])], |t| {
            let p = t[0].split_channels(&[2, 3])?;
            // Weight the parts differently so both backward paths matter.
            p[0].scale(2.0)?.sum()?.add(&p[1].sum()?)
        }),
        prim("matmul", vec![n(&[3, 4]), n(&[4, 2])], |t| t[0].matmul(&t[1])),
        prim("matmul_batched", vec![n(&[2, 2, 3, 4]), n(&[2, 2, 4, 3])], |t| t[0].matmul(&t[1])),
        prim("linear", vec![n(&[2, 3, 4]), n(&[5, 4]), n(&[5])], |t| t[0].linear(&t[1], Some(&t[2]))),
        prim("softmax_lastdim", vec![n(&[3, 5])], |t| t[0].softmax_lastdim()),
        prim("global_avg_pool", vec![n(&[2, 3, 3, 2])], |t| t[0].global_avg_pool()),
        prim("layer_norm_channels", vec![n(&[2, 4, 2, 2]), n(&[4]), n(&[4])], |t| {
            t[0].layer_norm(&t[1], &t[2], 1e-5, 1)
        }),
        prim("layer_norm_last", vec![n(&[2, 3, 5]), n(&[5]), n(&[5])], |t| {
            t[0].layer_norm(&t[1], &t[2], 1e-5, 2)
        }),
        prim("cross_entropy", vec![n(&[4, 3])], |t| t[0].cross_entropy(&[0, 2, 1, 2])),
    ];
    let rm = n(&[3]).scale(0.1).expect("finite");
    let rv = Tensor::from_f64_vec(vec![0.7, 1.3, 0.9], &[3]).expect("shape");
    let (rm2, rv2) = (rm.clone(), rv.clone());
    v.push(prim("batch_norm_train", vec![n(&[3, 3, 2, 2]), n(&[3]), n(&[3])], move |t| {
        Ok(t[0].batch_norm(&t[1], &t[2], &rm, &rv, 1e-5, true)?.0)
    }));
    v.push(prim("batch_norm_eval", vec![n(&[4, 3]), n(&[3]), n(&[3])], move |t| {
        Ok(t[0].batch_norm(&t[1], &t[2], &rm2, &rv2, 1e-5, false)?.0)
    }));
    let convs = [
        ("conv2d_3x3", [2, 3, 5, 5], [4, 3, 3, 3], Conv2dParams::new(1, 1, 1)),
        ("conv2d_stride2", [1, 2, 6, 5], [3, 2, 3, 3], Conv2dParams::new(2, 1, 1)),
        ("conv2d_1x1", [2, 4, 3, 3], [5, 4, 1, 1], Conv2dParams::default()),
        ("conv2d_grouped", [1, 4, 4, 4], [6, 2, 3, 3], Conv2dParams::new(1, 1, 2)),
        ("conv2d_depthwise", [2, 3, 4, 4], [3, 1, 3, 3], Conv2dParams::new(1, 1, 3)),
        ("conv2d_depthwise_s2", [1, 3, 5, 5], [3, 1, 3, 3], Conv2dParams::new(2, 1, 3)),
    ];
    for (name, xs, ws, p) in convs {
        let cout = ws[0];
        v.push(prim(name, vec![n(&xs), n(&ws), n(&[cout])], move |t| {
            t[0].conv2d(&t[1], Some(&t[2]), p)
        }));
    }
    v
}

fn layer_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut v = Vec::new();
    let mut cb = ConvBn::new(3, 4, 3, Conv2dParams::new(2, 1, 1), rng);
    jitter_affine(&mut cb, rng);
    v.push(layer("convbn_train", &cb, rng.normal_tensor(&[3, 3, 5, 5], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::train())
    }));
    v.push(layer("convbn_eval", &cb, rng.normal_tensor(&[2, 3, 5, 5], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::eval())
    }));
    let mut ffn = Ffn::new(3, rng);
    jitter_affine(&mut ffn, rng);
    v.push(layer("ffn", &ffn, rng.normal_tensor(&[2, 3, 2, 2], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::train())
    }));
    let mut shsa = Shsa::with_partial(7, 3, 2, rng)?;
    jitter_affine(&mut shsa, rng);
    v.push(layer("shsa", &shsa, rng.normal_tensor(&[2, 7, 2, 3], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::eval())
    }));
    let mut full = Shsa::full_channel(4, 3, rng)?;
    jitter_affine(&mut full, rng);
    v.push(layer("single_head_full_channel", &full, rng.normal_tensor(&[1, 4, 2, 2], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::eval())
    }));
    let mut mhsa = Mhsa::twin(6, 2, 3, rng)?;
    jitter_affine(&mut mhsa, rng);
    v.push(layer("mhsa", &mhsa, rng.normal_tensor(&[2, 6, 2, 2], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::eval())
    }));
    let mut masked = mhsa.clone();
    masked.set_mask(&[0.0, 1.0])?;
    v.push(layer("mhsa_masked", &masked, rng.normal_tensor(&[1, 6, 2, 2], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::eval())
    }));
    let mut bottleneck = BottleneckAttention::new(6, 0.5, 2, rng)?;
    jitter_affine(&mut bottleneck, rng);
    v.push(layer("single_head_bottleneck", &bottleneck, rng.normal_tensor(&[1, 6, 2, 2], 1.0), 40, |m, x| {
        m.forward(x)
    }));
    let mut head = BnLinear::new(5, 3, rng);
    jitter_affine(&mut head, rng);
    v.push(layer("bn_linear_train", &head, rng.normal_tensor(&[4, 5], 1.0), 40, |m, x| {
        m.forward(x, &Ctx::train())
    }));
    Ok(v)
}

/// The tiny network as built, at its native resolution, through an
/// inference-mode forward and cross-entropy. Training-mode batch statistics
/// are covered per layer; at this resolution the late stages are 1×1 and a
/// batch-statistics norm over four values is too ill-conditioned for a
/// 1e-3 step.
fn model_case(rng: &mut Rng) -> Result<Case> {
    let cfg = ModelConfig::tiny();
    let res = cfg.input_resolution;
    let model = Model::build(&cfg, rng)?;
    let x = rng.normal_tensor(&[4, 3, res, res], 1.0);
    let labels = vec![0, 1, 2, 3];
    Ok(layer("tiny_model", &model, x, 6, move |m, x| {
        m.forward_ctx(x, &Ctx::eval())?.cross_entropy(&labels)
    }))
}

/// Names of the single-op cases.
pub fn primitive_names() -> Vec<String> {
    primitive_cases(&mut Rng::new(0)).into_iter().map(|c| c.name).collect()
}

/// Every case name the suite runs, in order.
pub fn case_names() -> Vec<String> {
    let mut rng = Rng::new(0);
    let mut names: Vec<String> = primitive_cases(&mut rng).into_iter().map(|c| c.name).collect();
    names.extend(layer_cases(&mut rng).expect("static layer shapes").into_iter().map(|c| c.name));
    names.push("tiny_model".into());
    names
}

/// Runs the full suite for each seed at step [`EPS`].
pub fn run_suite(seeds: &[u64], tol: f64) -> Result<SuiteReport> {
    run_filtered(seeds, tol, EPS, |_| true)
}

/// Runs the cases whose name passes `keep`, with finite-difference step `eps`.
pub fn run_filtered(seeds: &[u64], tol: f64, eps: f64, keep: impl Fn(&str) -> bool) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for &seed in seeds {
        let mut rng = Rng::new(seed);
        let mut all = primitive_cases(&mut rng);
        all.extend(layer_cases(&mut rng)?);
        all.push(model_case(&mut rng)?);
        for c in all.into_iter().filter(|c| keep(&c.name)) {
            cases.push(check_case(&c.name, seed, &c.inputs, &*c.f, c.max_coords, eps)?);
        }
    }
    Ok(SuiteReport {
        tol,
        eps,
        cases,
    })
}
