//! Live-float accounting.
//!
//! Every [`Tensor`](super::Tensor) registers its element count here on
//! construction and releases it on drop. Other long-lived float buffers
//! (the memory store's ring) register through [`FloatLease`]. Counters are
//! thread-local so concurrent tests and benchmarks do not observe each other.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn acquire(n: usize) {
    LIVE.with(|live| {
        let now = live.get() + n;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(n: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(n)));
}

/// Floats currently alive on this thread.
pub fn live_floats() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_floats() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak() {
    let now = live_floats();
    PEAK.with(|peak| peak.set(now));
}

/// Runs `f` and returns its result with the peak number of floats that were
/// alive at once while it ran (including anything already alive on entry).
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let saved = peak_floats();
    reset_peak();
    let out = f();
    let peak = peak_floats();
    PEAK.with(|p| p.set(saved.max(peak)));
    (out, peak)
}

/// RAII registration for a float buffer that is not a `Tensor`.
#[derive(Debug)]
pub struct FloatLease(usize);

impl FloatLease {
    pub fn new(n: usize) -> Self {
        acquire(n);
        FloatLease(n)
    }

    pub fn len(&self) -> usize {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }
}

impl Clone for FloatLease {
    fn clone(&self) -> Self {
        FloatLease::new(self.0)
    }
}

impl Drop for FloatLease {
    fn drop(&mut self) {
        release(self.0);
    }
}
