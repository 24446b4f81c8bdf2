//! Per-op instrumentation hooks.
//!
//! Every public tensor primitive opens an [`OpGuard`] on entry. When a
//! collector is active on the current thread, the outermost guard records one
//! call (and, in timed mode, its wall time) against the op's [`OpKind`].
//! Nested primitive calls are attributed to the outermost op.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    Matmul,
    Linear,
    Softmax,
    Relu,
    GlobalAvgPool,
    Add,
    Mul,
    Scale,
    HeadMask,
    Concat,
    Split,
    Reshape,
    Transpose,
    Permute,
    LayerNorm,
    BatchNorm,
    Sum,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Compute,
    MemoryBound,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::HeadMask => "head_mask",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Permute => "permute",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    /// Fixed category table. Only dense arithmetic (conv, matmul, linear) is
    /// compute-bound; everything else streams memory.
    pub fn category(self) -> Category {
        match self {
            OpKind::Conv2d | OpKind::Matmul | OpKind::Linear => Category::Compute,
            _ => Category::MemoryBound,
        }
    }

    /// Data-movement and normalization primitives: the ops a single-head
    /// design is meant to minimize.
    pub fn is_movement_or_norm(self) -> bool {
        matches!(
            self,
            OpKind::Reshape
                | OpKind::Transpose
                | OpKind::Permute
                | OpKind::Split
                | OpKind::Concat
                | OpKind::LayerNorm
                | OpKind::BatchNorm
        )
    }

    pub fn is_normalization(self) -> bool {
        matches!(self, OpKind::LayerNorm | OpKind::BatchNorm)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStat {
    pub calls: u64,
    pub nanos: u64,
}

/// Per-kind call counts and times gathered by [`collect`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub by_kind: BTreeMap<OpKind, OpStat>,
}

impl OpStats {
    pub fn calls(&self, kind: OpKind) -> u64 {
        self.by_kind.get(&kind).map_or(0, |s| s.calls)
    }

    pub fn total_calls(&self) -> u64 {
        self.by_kind.values().map(|s| s.calls).sum()
    }

    pub fn total_nanos(&self) -> u64 {
        self.by_kind.values().map(|s| s.nanos).sum()
    }

    pub fn movement_or_norm_calls(&self) -> u64 {
        self.by_kind
            .iter()
            .filter(|(k, _)| k.is_movement_or_norm())
            .map(|(_, s)| s.calls)
            .sum()
    }

    pub fn merge(&mut self, other: &OpStats) {
        for (k, s) in &other.by_kind {
            let e = self.by_kind.entry(*k).or_default();
            e.calls += s.calls;
            e.nanos += s.nanos;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Off,
    Count,
    Timed,
}

thread_local! {
    static MODE: Cell<Mode> = const { Cell::new(Mode::Off) };
    static DEPTH: Cell<u32> = const { Cell::new(0) };
    static STATS: RefCell<OpStats> = RefCell::new(OpStats::default());
}

pub(crate) struct OpGuard {
    kind: OpKind,
    start: Option<Instant>,
    outermost: bool,
    active: bool,
}

#[inline]
pub(crate) fn enter(kind: OpKind) -> OpGuard {
    let mode = MODE.with(|m| m.get());
    if mode == Mode::Off {
        return OpGuard {
            kind,
            start: None,
            outermost: false,
            active: false,
        };
    }
    let depth = DEPTH.with(|d| {
        let v = d.get();
        d.set(v + 1);
        v
    });
    let outermost = depth == 0;
    let start = (outermost && mode == Mode::Timed).then(Instant::now);
    OpGuard {
        kind,
        start,
        outermost,
        active: true,
    }
}

impl Drop for OpGuard {
    fn drop(&mut self) {
        if !self.active {
            return;
        }
        DEPTH.with(|d| d.set(d.get() - 1));
        if !self.outermost {
            return;
        }
        let nanos = self.start.map_or(0, |s| s.elapsed().as_nanos() as u64);
        STATS.with(|st| {
            let mut st = st.borrow_mut();
            let e = st.by_kind.entry(self.kind).or_default();
            e.calls += 1;
            e.nanos += nanos;
        });
    }
}

fn run_with<R>(mode: Mode, f: impl FnOnce() -> R) -> (R, OpStats) {
    let prev_mode = MODE.with(|m| m.replace(mode));
    let prev_stats = STATS.with(|s| std::mem::take(&mut *s.borrow_mut()));
    let out = f();
    let stats = STATS.with(|s| std::mem::replace(&mut *s.borrow_mut(), prev_stats));
    MODE.with(|m| m.set(prev_mode));
    (out, stats)
}

/// Run `f` with per-op timing enabled on this thread.
pub fn collect<R>(f: impl FnOnce() -> R) -> (R, OpStats) {
    run_with(Mode::Timed, f)
}

/// Run `f` counting primitive calls only. Machine independent.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, OpStats) {
    run_with(Mode::Count, f)
}
