//! The calibrated arithmetic work loop standing in for application compute.

use std::hint::black_box;
use std::time::Instant;

/// Runs `iters` iterations of a dependent multiply-add chain.
#[inline(never)]
pub fn spin(iters: u64) -> u64 {
    let mut x = black_box(0x9e37_79b9_7f4a_7c15u64);
    for i in 0..iters {
        x = x.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(i | 1);
        x ^= x >> 29;
    }
    black_box(x)
}

/// Per-iteration cost of [`spin`] on this machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub ns_per_iter: f64,
}

impl Calibration {
    /// Times a few million iterations and keeps the fastest of several runs,
    /// which is the least disturbed by other threads.
    pub fn measure() -> Calibration {
        const ITERS: u64 = 1 << 21;
        spin(ITERS / 8);
        let best = (0..5)
            .map(|_| {
                let t = Instant::now();
                spin(ITERS);
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        Calibration {
            ns_per_iter: best * 1e9 / ITERS as f64,
        }
    }

    /// Iterations that take roughly `us` microseconds.
    pub fn iters_for_us(&self, us: f64) -> u64 {
        (us * 1e3 / self.ns_per_iter).round().max(1.0) as u64
    }
}
