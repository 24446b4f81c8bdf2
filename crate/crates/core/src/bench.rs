//! Throughput measurement, per-op runtime breakdown, and token-mixer
//! comparisons.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mixer, MixerKind, Model, ModelConfig};
use crate::nn::{Ctx, Module};
use crate::profile::{self, Category, OpKind, OpStats};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

pub const REPORT_VERSION: u32 = 1;

/// Runs `f` on a dedicated one-worker pool, or on the global pool.
pub fn with_threads<R: Send>(single_thread: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    if !single_thread {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputResult {
    pub report_version: u32,
    pub images_per_sec: f64,
    pub batch: usize,
    pub resolution: usize,
    pub warmup: usize,
    pub iters: usize,
    pub single_thread: bool,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    /// Every measured iteration, in run order.
    pub iter_s: Vec<f64>,
}

fn check_res(model: &Model, res: usize) -> Result<()> {
    if res != model.config.input_resolution {
        return Err(Error::Config(format!(
            "model is built for {}², benchmark asked for {res}²",
            model.config.input_resolution
        )));
    }
    Ok(())
}

/// Times `iters` inference forwards of a fixed random batch after `warmup`
/// untimed ones.
pub fn bench_throughput(
    model: &Model,
    batch: usize,
    res: usize,
    warmup: usize,
    iters: usize,
    single_thread: bool,
) -> Result<ThroughputResult> {
    check_res(model, res)?;
    if warmup < 1 || iters < 3 || batch == 0 {
        return Err(Error::Invalid(format!(
            "need warmup ≥ 1, iters ≥ 3 and batch ≥ 1 (got {warmup}, {iters}, {batch})"
        )));
    }
    let x = Rng::new(0).normal_tensor(&[batch, 3, res, res], 1.0);
    let mut times = with_threads(single_thread, || -> Result<Vec<f64>> {
        let _g = no_grad();
        for _ in 0..warmup {
            black_box(model.forward(&x)?);
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            black_box(model.forward(&x)?);
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(times)
    })??;
    let iter_s = times.clone();
    times.sort_by(f64::total_cmp);
    let median_s = quantile(&times, 0.5);
    Ok(ThroughputResult {
        report_version: REPORT_VERSION,
        images_per_sec: batch as f64 / median_s,
        batch,
        resolution: res,
        warmup,
        iters,
        single_thread,
        median_s,
        p10_s: quantile(&times, 0.1),
        p90_s: quantile(&times, 0.9),
        iter_s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub op: &'static str,
    pub category: Category,
    pub calls: u64,
    pub total_ns: u64,
    /// Percentage of the summed op time.
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub report_version: u32,
    pub batch: usize,
    pub resolution: usize,
    pub fused: bool,
    /// Sorted by descending time.
    pub entries: Vec<ProfileEntry>,
    pub wall_ns: u64,
    pub op_total_ns: u64,
}

impl ProfileReport {
    fn from_stats(stats: &OpStats, wall_ns: u64, batch: usize, resolution: usize, fused: bool) -> Self {
        let op_total_ns = stats.total_nanos();
        let mut entries: Vec<ProfileEntry> = stats
            .by_kind
            .iter()
            .map(|(k, s)| ProfileEntry {
                op: k.name(),
                category: k.category(),
                calls: s.calls,
                total_ns: s.nanos,
                share: if op_total_ns == 0 {
                    0.0
                } else {
                    100.0 * s.nanos as f64 / op_total_ns as f64
                },
            })
            .collect();
        entries.sort_by(|a, b| b.total_ns.cmp(&a.total_ns).then(a.op.cmp(b.op)));
        Self {
            report_version: REPORT_VERSION,
            batch,
            resolution,
            fused,
            entries,
            wall_ns,
            op_total_ns,
        }
    }

    pub fn share_of(&self, category: Category) -> f64 {
        self.entries.iter().filter(|e| e.category == category).map(|e| e.share).sum()
    }

    pub fn calls_of(&self, category: Category) -> u64 {
        self.entries.iter().filter(|e| e.category == category).map(|e| e.calls).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "batch {}  res {}  fused {}  wall {:.3} ms  ops {:.3} ms",
            self.batch,
            self.resolution,
            self.fused,
            self.wall_ns as f64 / 1e6,
            self.op_total_ns as f64 / 1e6
        )
        .expect("write to string");
        writeln!(s, "{:<16} {:<12} {:>7} {:>12} {:>7}", "op", "category", "calls", "time_ms", "share%")
            .expect("write to string");
        for e in &self.entries {
            let cat = match e.category {
                Category::Compute => "compute",
                Category::MemoryBound => "memory_bound",
            };
            writeln!(
                s,
                "{:<16} {:<12} {:>7} {:>12.3} {:>7.2}",
                e.op,
                cat,
                e.calls,
                e.total_ns as f64 / 1e6,
                e.share
            )
            .expect("write to string");
        }
        writeln!(
            s,
            "memory_bound {:.2}%  compute {:.2}%",
            self.share_of(Category::MemoryBound),
            self.share_of(Category::Compute)
        )
        .expect("write to string");
        s
    }
}

/// One timed inference forward with every primitive attributed to its op.
pub fn profile_ops(model: &Model, input: &Tensor) -> Result<ProfileReport> {
    let (batch, _, res, _) = input.dims4()?;
    let _g = no_grad();
    let start = Instant::now();
    let (out, stats) = profile::collect(|| model.forward(input));
    let wall_ns = start.elapsed().as_nanos() as u64;
    out?;
    Ok(ProfileReport::from_stats(&stats, wall_ns, batch, res, model.is_fused()))
}

/// Median wall seconds of `runs` plain and `runs` instrumented forwards,
/// interleaved.
pub fn profile_overhead(model: &Model, input: &Tensor, runs: usize) -> Result<(f64, f64)> {
    let _g = no_grad();
    black_box(model.forward(input)?);
    let (mut plain, mut timed) = (Vec::new(), Vec::new());
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        black_box(model.forward(input)?);
        plain.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let (out, _) = profile::collect(|| model.forward(input));
        black_box(out?);
        timed.push(t.elapsed().as_secs_f64());
    }
    plain.sort_by(f64::total_cmp);
    timed.sort_by(f64::total_cmp);
    Ok((quantile(&plain, 0.5), quantile(&timed, 0.5)))
}

/// Primitive calls of one inference forward. Machine independent.
pub fn count_ops(model: &Model, input: &Tensor) -> Result<OpStats> {
    let _g = no_grad();
    let (out, stats) = profile::count(|| model.forward(input));
    out?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockOpCount {
    pub stage: usize,
    pub block: usize,
    pub movement_or_norm: u64,
    pub reshape_like: u64,
    pub normalization: u64,
    pub total: u64,
}

/// Primitive counts of each attention-carrying block's forward, on a
/// single image at the block's grid size.
pub fn block_op_counts(model: &Model) -> Result<Vec<BlockOpCount>> {
    let grids = model.stage_grids();
    let mut out = Vec::new();
    let _g = no_grad();
    for (s, stage) in model.stages.iter().enumerate() {
        let c = model.config.stages[s].channels;
        let x = Tensor::zeros(&[1, c, grids[s], grids[s]], crate::DType::F32)?;
        for (j, b) in stage.blocks.iter().enumerate() {
            if matches!(b.mixer, Mixer::None) {
                continue;
            }
            let (y, st) = profile::count(|| b.forward(&x, &Ctx::eval()));
            y?;
            let of = |f: fn(OpKind) -> bool| st.by_kind.iter().filter(|(k, _)| f(**k)).map(|(_, v)| v.calls).sum();
            out.push(BlockOpCount {
                stage: s,
                block: j,
                movement_or_norm: st.movement_or_norm_calls(),
                reshape_like: of(|k| k.is_movement_or_norm() && !k.is_normalization()),
                normalization: of(OpKind::is_normalization),
                total: st.total_calls(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixerEntry {
    pub mixer: String,
    pub params: u64,
    pub macs: u64,
    pub mem_access: u64,
    /// Median of the per-run median throughputs.
    pub images_per_sec: f64,
    pub run_images_per_sec: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixerComparison {
    pub report_version: u32,
    pub resolution: usize,
    pub batch: usize,
    pub mhsa_heads: usize,
    /// None, single-head, multi-head, in that order.
    pub entries: Vec<MixerEntry>,
    pub params_ordered: bool,
    pub throughput_ordered: bool,
}

impl MixerComparison {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "res {}  batch {}  mhsa heads {}", self.resolution, self.batch, self.mhsa_heads)
            .expect("write to string");
        writeln!(s, "{:<6} {:>12} {:>15} {:>15} {:>10}", "mixer", "params", "macs", "mem_access", "img/s")
            .expect("write to string");
        for e in &self.entries {
            writeln!(
                s,
                "{:<6} {:>12} {:>15} {:>15} {:>10.1}",
                e.mixer, e.params, e.macs, e.mem_access, e.images_per_sec
            )
            .expect("write to string");
        }
        writeln!(
            s,
            "params none < shsa < mhsa: {}  throughput none >= shsa >= mhsa: {}",
            self.params_ordered, self.throughput_ordered
        )
        .expect("write to string");
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MixerBench {
    pub batch: usize,
    pub mhsa_heads: usize,
    pub runs: usize,
    pub warmup: usize,
    pub iters: usize,
    pub single_thread: bool,
}

impl Default for MixerBench {
    fn default() -> Self {
        Self {
            batch: 16,
            mhsa_heads: 4,
            runs: 5,
            warmup: 2,
            iters: 5,
            single_thread: true,
        }
    }
}

/// Builds the three twins of `cfg` (attention removed, single-head,
/// multi-head at equal width) and reports their costs and throughput.
/// Runs are interleaved across twins so drift affects all three alike.
pub fn compare_token_mixers(cfg: &ModelConfig, res: usize, opts: &MixerBench) -> Result<MixerComparison> {
    let kinds = [
        ("none", MixerKind::None),
        ("shsa", MixerKind::Shsa),
        ("mhsa", MixerKind::Mhsa(opts.mhsa_heads)),
    ];
    let models = kinds
        .iter()
        .map(|&(_, k)| Model::build(&cfg.clone().with_resolution(res).with_mixer(k), &mut Rng::new(0)))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = vec![Vec::new(); models.len()];
    for _ in 0..opts.runs {
        for (m, r) in models.iter().zip(&mut runs) {
            let t = bench_throughput(m, opts.batch, res, opts.warmup, opts.iters, opts.single_thread)?;
            r.push(t.images_per_sec);
        }
    }
    let mut entries = Vec::new();
    for ((name, _), (m, r)) in kinds.iter().zip(models.iter().zip(runs)) {
        let cost = m.cost_report(opts.batch as u64, res)?;
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        entries.push(MixerEntry {
            mixer: name.to_string(),
            params: m.param_count(),
            macs: cost.total_macs,
            mem_access: cost.total_mem_access,
            images_per_sec: if sorted.is_empty() { 0.0 } else { quantile(&sorted, 0.5) },
            run_images_per_sec: r,
        });
    }
    let params_ordered = entries[0].params < entries[1].params && entries[1].params < entries[2].params;
    let throughput_ordered =
        entries[0].images_per_sec >= entries[1].images_per_sec && entries[1].images_per_sec >= entries[2].images_per_sec;
    Ok(MixerComparison {
        report_version: REPORT_VERSION,
        resolution: res,
        batch: opts.batch,
        mhsa_heads: opts.mhsa_heads,
        entries,
        params_ordered,
        throughput_ordered,
    })
}
