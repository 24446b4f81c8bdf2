//! Acceptance criteria 1–11. Each test prints one PASS/FAIL line to the real
//! stdout (bypassing the test harness capture) and then asserts.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{max_abs_diff, A};
use shvit::bench::{self, MixerBench};
use shvit::gradcheck;
use shvit::io;
use shvit::model::{memory_access_cost, MixerKind, Model, ModelConfig};
use shvit::nn::{Ctx, Mhsa, Shsa};
use shvit::redundancy::{self, Sweep};
use shvit::rng::Rng;
use shvit::tensor::no_grad;
use shvit::train::{self, DataParams, TrainConfig};
use shvit::{Error, Tensor};

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n:>2} {verdict}  {title}: {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn warn(n: u32, detail: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n:>2} WARN  {detail}").unwrap();
    out.flush().unwrap();
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let prims = gradcheck::primitive_names();
    let r = gradcheck::run_filtered(&[1, 2, 3], 1e-6, gradcheck::EPS, |n| {
        n == "tiny_model" || prims.iter().any(|p| p == n)
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = r
        .cases
        .iter()
        .filter(|c| c.rel_err >= 1e-6)
        .map(|c| format!("{}@seed{}={:.3e}", c.name, c.seed, c.rel_err))
        .collect();
    let worst = r.worst().unwrap();
    let pass = failing.is_empty() && secs < 120.0 && r.eps == 1e-3;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} cases over seeds 1,2,3 at eps {}, worst {} {:.3e}, {:.1}s, failing [{}]",
            r.cases.len(),
            r.eps,
            worst.name,
            worst.rel_err,
            secs,
            failing.join(", ")
        ),
    );
}

#[test]
fn criterion_02_shsa_correctness() {
    let _g = no_grad();
    let mut rng = Rng::new(202);
    let mut worst_loop = 0.0f64;
    for _ in 0..20 {
        let n = 1 + rng.below(2);
        let c = 2 + rng.below(11);
        let cp = 1 + rng.below(c);
        let d = 1 + rng.below(6);
        let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
        let mut s = Shsa::with_partial(c, cp, d, &mut rng).unwrap();
        common::jitter_affine(&mut s, &mut rng);
        let x = rng.normal_tensor(&[n, c, h, w], 1.0);
        let got = s.forward(&x, &Ctx::eval()).unwrap().to_vec_f64();
        worst_loop = worst_loop.max(max_abs_diff(&got, &common::shsa(&A::from(&x), &s).d));
    }

    // T = 1: queries and keys drop out, any choice of them gives the same output.
    let mut s = Shsa::with_partial(9, 2, 4, &mut rng).unwrap();
    common::jitter_affine(&mut s, &mut rng);
    let x = rng.normal_tensor(&[4, 9, 1, 1], 1.0);
    let y = s.forward(&x, &Ctx::eval()).unwrap().to_vec_f64();
    let mut s2 = s.clone();
    s2.wq.weight = rng.normal_tensor(s.wq.weight.shape(), 2.0);
    s2.wk.weight = rng.normal_tensor(s.wk.weight.shape(), 2.0);
    let collapse = max_abs_diff(&y, &s2.forward(&x, &Ctx::eval()).unwrap().to_vec_f64())
        .max(max_abs_diff(&y, &common::shsa(&A::from(&x), &s).d));

    // r = 1 against a one-head multi-head layer carrying the same weights.
    let mut full = Shsa::full_channel(8, 4, &mut rng).unwrap();
    common::jitter_affine(&mut full, &mut rng);
    let mut m = Mhsa::new(8, 1, 4, 8, &mut rng).unwrap();
    m.norm = full.norm.clone();
    let flat = |w: &Tensor| w.reshape(&w.shape()[..2]).unwrap();
    m.wq.weight = flat(&full.wq.weight);
    m.wk.weight = flat(&full.wk.weight);
    m.wv.weight = flat(&full.wv.weight);
    m.wo.weight = flat(&full.wo.weight);
    let x = rng.normal_tensor(&[2, 8, 3, 3], 1.0);
    let equiv = max_abs_diff(
        &full.forward(&x, &Ctx::eval()).unwrap().to_vec_f64(),
        &m.forward(&x, &Ctx::eval()).unwrap().to_vec_f64(),
    );

    let pass = worst_loop < 1e-5 && collapse < 1e-5 && equiv < 1e-5;
    report(
        2,
        "SHSA correctness",
        pass,
        &format!("20-case oracle max {worst_loop:.2e}, T=1 collapse {collapse:.2e}, r=1 vs 1-head MHSA {equiv:.2e} (tol 1e-5)"),
    );
}

#[test]
fn criterion_03_head_ablation_identity() {
    let heads = 4;
    let cfg = ModelConfig::tiny().with_resolution(64).with_mixer(MixerKind::Mhsa(heads));
    let m = Model::build(&cfg, &mut Rng::new(3)).unwrap();
    let eval = train::gen_dataset(&DataParams {
        resolution: 64,
        train_size: 4,
        eval_size: 32,
        ..DataParams::blobs(0.5, 3)
    })
    .unwrap()
    .eval;
    let ones = vec![1.0; heads];
    let bits = |t: Tensor| t.to_vec_f32().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = {
        let _g = no_grad();
        let base = bits(m.forward(&eval.images).unwrap());
        m.attention_layers().iter().all(|l| {
            let ctx = Ctx {
                mask: Some((l.id, &ones)),
                ..Ctx::eval()
            };
            bits(m.forward_ctx(&eval.images, &ctx).unwrap()) == base
        })
    };
    let baseline = train::evaluate(&m, &eval).unwrap();
    let masked = redundancy::ablate_heads(&m, 0, &ones, &eval).unwrap();
    let score_identical = masked.loss.to_bits() == baseline.loss.to_bits() && masked.accuracy == baseline.accuracy;

    let one = redundancy::best_single_head_sweep(&m, 0, &eval).unwrap();
    let loo = redundancy::leave_one_out_sweep(&m, 0, &eval).unwrap();
    let distinct = |r: &redundancy::AblationReport, kind: Sweep| {
        let mut ms: Vec<Vec<u8>> = r.entries.iter().map(|e| e.mask.iter().map(|&d| d as u8).collect()).collect();
        ms.sort();
        ms.dedup();
        ms.len() == heads && r.entries.iter().map(|e| e.mask.clone()).collect::<Vec<_>>() == kind.masks(heads)
    };
    let counts = one.entries.len() == heads && loo.entries.len() == heads;
    let after = train::evaluate(&m, &eval).unwrap();
    let side_effect_free = after.loss.to_bits() == baseline.loss.to_bits();

    let pass = identical && score_identical && counts && distinct(&one, Sweep::OneHot) && distinct(&loo, Sweep::LeaveOneOut) && side_effect_free;
    report(
        3,
        "head-ablation identity",
        pass,
        &format!(
            "all-ones bit-identical logits {identical}, score {score_identical}; one-hot {} masks, leave-one-out {} masks for Nh={heads}; baseline unchanged after sweeps {side_effect_free}",
            one.entries.len(),
            loo.entries.len()
        ),
    );
}

#[test]
fn criterion_04_head_sim_formula() {
    let mut rng = Rng::new(4);
    let head: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
    let same = [head.clone(), head.clone(), head.clone()].concat();
    let identical = redundancy::head_similarity(&Tensor::from_f64_vec(same, &[1, 3, 4, 4]).unwrap())
        .unwrap()
        .head_sim;

    let r = std::f64::consts::FRAC_1_SQRT_2;
    let hand = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, r, r, 0.0, 0.0];
    let three = redundancy::head_similarity(&Tensor::from_f64_vec(hand.to_vec(), &[1, 3, 2, 2]).unwrap())
        .unwrap()
        .head_sim;
    let want = 2f64.sqrt() / 3.0;
    let pass = (identical - 1.0).abs() <= 1e-6 && (three - want).abs() <= 1e-6;
    report(
        4,
        "HeadSim formula",
        pass,
        &format!("identical heads {identical:.9}, e1/e2/(e1+e2)/sqrt2 case {three:.9} vs sqrt2/3 {want:.9}"),
    );
}

#[test]
fn criterion_05_memory_access_model() {
    let v = memory_access_cost(1, 14, 14, 128, 3);
    let a = Model::build(&ModelConfig::reference(), &mut Rng::new(0)).unwrap();
    let b = Model::build(&ModelConfig::four_stage(), &mut Rng::new(0)).unwrap();
    let ma = a.cost_report(1, 224).unwrap().total_mem_access;
    let mb = b.cost_report(1, 224).unwrap().total_mem_access;
    let pass = v == 197_632 && ma < mb;
    report(
        5,
        "memory-access model",
        pass,
        &format!("2bhwc+k^2c^2 at (1,14,14,128,3) = {v}; total mem-access 3-stage {ma} vs 4-stage {mb} at 224"),
    );
}

#[test]
fn criterion_06_bn_fusion() {
    let mut rng = Rng::new(6);
    let mut m = Model::build(&ModelConfig::reference(), &mut rng).unwrap();
    common::jitter_affine(&mut m, &mut rng);
    // Running statistics calibrated by train-mode passes, as a trained
    // model would carry them. With identity statistics the residual stack
    // drives logits to ~1e6 and f32 rounding alone exceeds 1e-3.
    for i in 0..10 {
        let _g = no_grad();
        let batch = Rng::new(600 + i).normal_tensor(&[8, 3, 224, 224], 1.0);
        m.forward_ctx(&batch, &Ctx::train()).unwrap();
    }
    let fused = m.fuse_all_bn().unwrap();
    // 100 inputs in chunks of 10.
    let (ya, yb): (Vec<Tensor>, Vec<Tensor>) = {
        let _g = no_grad();
        (0..10)
            .map(|i| {
                let chunk = Rng::new(60 + i).normal_tensor(&[10, 3, 224, 224], 1.0);
                (m.forward(&chunk).unwrap(), fused.forward(&chunk).unwrap())
            })
            .unzip()
    };
    let mut max_diff = 0.0f64;
    let mut argmax_same = true;
    for (a, b) in ya.iter().zip(&yb) {
        max_diff = max_diff.max(max_abs_diff(&a.to_vec_f64(), &b.to_vec_f64()));
        argmax_same &= a.argmax_rows().unwrap() == b.argmax_rows().unwrap();
    }
    let probe = Rng::new(61).normal_tensor(&[1, 3, 224, 224], 1.0);
    let prof = bench::profile_ops(&fused, &probe).unwrap();
    let bn_calls: u64 = prof.entries.iter().filter(|e| e.op == "batch_norm").map(|e| e.calls).sum();
    let ln_calls: u64 = prof.entries.iter().filter(|e| e.op == "layer_norm").map(|e| e.calls).sum();
    let pass = max_diff < 1e-3 && argmax_same && bn_calls == 0;
    report(
        6,
        "BN fusion",
        pass,
        &format!(
            "100 inputs, reference layout with calibrated statistics: max |logit diff| {max_diff:.2e}, argmax identical {argmax_same}; fused profile batch_norm calls {bn_calls} (attention layer_norm calls {ln_calls} remain)"
        ),
    );
}

#[test]
fn criterion_07_serialization() {
    let mut rng = Rng::new(7);
    let mut m = Model::build(&ModelConfig::tiny(), &mut rng).unwrap();
    common::jitter_affine(&mut m, &mut rng);
    let bytes = io::model_bytes(&m).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.shvw");
    io::save_model(&m, &p).unwrap();
    let back = io::load_model(&p).unwrap();
    let round_trip = io::model_bytes(&back).unwrap() == bytes;

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let bad_magic = matches!(io::model_from_bytes(&magic), Err(Error::BadMagic(_)));
    let truncated = matches!(io::model_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. }));

    let (mut h, payload) = io::read_header(&bytes).unwrap();
    let e = h.tensors.iter_mut().find(|e| e.shape.len() == 4 && e.shape[0] != e.shape[1]).unwrap();
    e.shape.swap(0, 1);
    let json = serde_json::to_vec(&h).unwrap();
    let mut edited = bytes[..8].to_vec();
    edited.extend_from_slice(&(json.len() as u64).to_le_bytes());
    edited.extend_from_slice(&json);
    edited.extend_from_slice(payload);
    let shape = matches!(io::model_from_bytes(&edited), Err(Error::ManifestMismatch { .. }));

    let pass = round_trip && bad_magic && truncated && shape;
    report(
        7,
        "serialization",
        pass,
        &format!("save/load/save bit-exact {round_trip}; bad magic -> BadMagic {bad_magic}; truncation -> Truncated {truncated}; shape edit -> ManifestMismatch {shape}"),
    );
}

#[test]
fn criterion_08_toy_learning() {
    let start = Instant::now();
    let run = |sigma: f64, seed: u64| {
        let data = train::gen_dataset(&DataParams::blobs(sigma, seed)).unwrap();
        let mut m = Model::build(&ModelConfig::tiny(), &mut Rng::new(seed)).unwrap();
        let tc = TrainConfig {
            steps: 300,
            seed,
            ..TrainConfig::default()
        };
        train::train(&mut m, &data, &tc).unwrap()
    };
    let clean = run(0.0, 1);
    let noisy = run(0.5, 1);
    let again = run(0.5, 1);
    let deterministic = noisy.curve.len() == again.curve.len()
        && noisy.curve.iter().zip(&again.curve).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
        && noisy.final_eval.accuracy == again.final_eval.accuracy;
    let secs = start.elapsed().as_secs_f64();
    let acc = clean.final_eval.accuracy;
    let (l0, l1) = (noisy.initial_loss(), noisy.final_loss());
    let pass = acc >= 0.95 && l1 < 0.5 * l0 && deterministic && secs < 300.0;
    report(
        8,
        "toy learning",
        pass,
        &format!(
            "sigma=0 eval accuracy {acc:.4}; sigma=0.5 loss {l0:.4} -> {l1:.4} (ratio {:.3}); repeat run identical {deterministic}; {secs:.1}s for three 300-step runs",
            l1 / l0
        ),
    );
}

#[test]
fn criterion_09_token_mixer_ordering() {
    let opts = MixerBench {
        batch: 1,
        runs: 5,
        ..MixerBench::default()
    };
    let c = bench::compare_token_mixers(&ModelConfig::reference(), 224, &opts).unwrap();
    let summary: Vec<String> = c
        .entries
        .iter()
        .map(|e| format!("{} params {} {:.2} img/s", e.mixer, e.params, e.images_per_sec))
        .collect();
    if !c.throughput_ordered {
        warn(9, &format!("throughput order none >= shsa >= mhsa not observed (soft): {}", summary.join("; ")));
    }
    report(
        9,
        "token-mixer ordering",
        c.params_ordered,
        &format!(
            "params none < shsa < mhsa {}; throughput ordered {} (median of 5 runs, soft); {}",
            c.params_ordered,
            c.throughput_ordered,
            summary.join("; ")
        ),
    );
}

#[test]
fn criterion_10_static_op_counts() {
    let cfg = ModelConfig::reference();
    let a = Model::build(&cfg, &mut Rng::new(0)).unwrap();
    let b = Model::build(&cfg.clone().with_mixer(MixerKind::Mhsa(4)), &mut Rng::new(0)).unwrap();
    let (ca, cb) = (bench::block_op_counts(&a).unwrap(), bench::block_op_counts(&b).unwrap());
    let mut pass = !ca.is_empty() && ca.len() == cb.len();
    let mut pairs = Vec::new();
    for (x, y) in ca.iter().zip(&cb) {
        let (sx, sy) = (x.reshape_like + x.normalization, y.reshape_like + y.normalization);
        pass &= sx < sy;
        pairs.push(format!("{}.{}: {sx}<{sy}", x.stage, x.block));
    }
    report(
        10,
        "static op counts",
        pass,
        &format!("reshape+normalization calls per block, SHSA vs MHSA twin: {}", pairs.join(", ")),
    );
}

#[test]
fn criterion_11_shape_contract() {
    let _g = no_grad();
    let m = Model::build(&ModelConfig::reference(), &mut Rng::new(0)).unwrap();
    let mut x = Rng::new(1).normal_tensor(&[1, 3, 224, 224], 1.0);
    for c in &m.stem {
        x = c.forward(&x, &Ctx::eval()).unwrap().relu().unwrap();
    }
    let (_, _, h, w) = x.dims4().unwrap();
    let tokens = h * w;
    let mut traced = Vec::new();
    for st in &m.stages {
        if let Some(d) = &st.downsample {
            x = d.forward(&x, &Ctx::eval()).unwrap();
        }
        for b in &st.blocks {
            x = b.forward(&x, &Ctx::eval()).unwrap();
        }
        traced.push(x.dims4().unwrap().2);
    }
    let grids = m.stage_grids();
    let pass = tokens == 196 && traced == [14, 7, 4] && grids == traced;
    report(
        11,
        "shape contract",
        pass,
        &format!("stem output {h}x{w} = {tokens} tokens; stage grids traced {traced:?}, reported {grids:?}"),
    );
}
