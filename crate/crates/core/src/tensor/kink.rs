//! Sign-pattern tracing for piecewise-linear ops.
//!
//! While a trace is active, every ReLU folds the sign of each of its inputs
//! into a running 64-bit hash. Two evaluations with equal hashes went through
//! the same linear region, so a finite difference between them is free of
//! kink error.

use std::cell::Cell;

use super::Element;

thread_local! {
    static TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Run `f` and return its result with the sign signature of every ReLU it hit.
pub fn trace<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = TRACE.with(|t| t.replace(Some(FNV_OFFSET)));
    let out = f();
    let sig = TRACE.with(|t| t.replace(prev)).unwrap_or(FNV_OFFSET);
    (out, sig)
}

pub(crate) fn observe<T: Element>(xs: &[T]) {
    TRACE.with(|t| {
        let Some(mut h) = t.get() else { return };
        let zero = T::zero();
        for chunk in xs.chunks(64) {
            let mut word = 0u64;
            for (i, &x) in chunk.iter().enumerate() {
                if x > zero {
                    word |= 1 << i;
                }
            }
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
        }
        t.set(Some(h));
    });
}
