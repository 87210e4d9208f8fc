//! Compensated (Neumaier) summation.
//!
//! Ensemble reductions must not depend on worker count or accumulation
//! order; every reduction in the crate funnels per-path contributions into a
//! deterministic order first and then sums with compensation so that results
//! are reproducible and accurate for long streams.

/// Running compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sum an iterator with compensation.
pub fn compensated<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = Compensated::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Mean and standard error of a sample (ddof = 1).
///
/// Returns `(mean, se)`; `se` is NaN for samples of size < 2.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated(values.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = compensated(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
