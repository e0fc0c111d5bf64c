//! Thread-local multiply counter used to instrument forward passes.
//!
//! Kernels report the number of scalar multiplications they perform. Counts
//! depend only on shapes, never on tensor values.

use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: usize) {
    MULTIPLIES.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

/// Runs `f` and returns its result together with the number of multiplies
/// recorded on this thread while it ran.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = MULTIPLIES.with(Cell::get);
    let out = f();
    let end = MULTIPLIES.with(Cell::get);
    (out, end.wrapping_sub(start))
}
