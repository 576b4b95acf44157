//! Float-allocation tracking for the memory-scaling measurements.
//!
//! Every tensor data buffer, gradient buffer, and attention scratch buffer
//! is a [`TrackedVec`]; a global counter follows the number of live tracked
//! floats and the peak since the last [`reset_peak`]. The profiler reads the
//! peak to compare naive against blockwise attention memory.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicI64, Ordering};

static CURRENT: AtomicI64 = AtomicI64::new(0);
static PEAK: AtomicI64 = AtomicI64::new(0);

fn on_alloc(n: usize) {
    let cur = CURRENT.fetch_add(n as i64, Ordering::Relaxed) + n as i64;
    PEAK.fetch_max(cur, Ordering::Relaxed);
}

fn on_free(n: usize) {
    CURRENT.fetch_sub(n as i64, Ordering::Relaxed);
}

/// Number of tracked floats currently alive.
pub fn current_floats() -> i64 {
    CURRENT.load(Ordering::Relaxed)
}

/// Peak tracked floats since the last reset.
pub fn peak_floats() -> i64 {
    PEAK.load(Ordering::Relaxed)
}

/// Start a new measurement window: the peak restarts from the current level.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Peak extra floats allocated by `f` on top of what was alive at entry.
pub fn measure_peak_extra<T>(f: impl FnOnce() -> T) -> (T, i64) {
    let base = current_floats();
    reset_peak();
    let out = f();
    let extra = (peak_floats() - base).max(0);
    (out, extra)
}

/// A `Vec<f64>` whose length is charged to the global tracker for its
/// lifetime.
pub struct TrackedVec {
    buf: Vec<f64>,
}

impl TrackedVec {
    pub fn new(buf: Vec<f64>) -> Self {
        on_alloc(buf.len());
        TrackedVec { buf }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }
}

impl Drop for TrackedVec {
    fn drop(&mut self) {
        on_free(self.buf.len());
    }
}

impl Deref for TrackedVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf
    }
}

impl DerefMut for TrackedVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }
}
