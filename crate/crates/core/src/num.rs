//! Small numeric helpers shared by the exact-enumeration paths.

/// Neumaier compensated summation. The exact tables sum millions of terms;
/// plain f64 accumulation would eat most of the 1e-9/1e-10 residual budgets.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
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

/// One KL summand `p * (ln p - ln q)` with the 0·log 0 = 0 convention.
/// Returns +inf when p > 0 and q = 0.
pub(crate) fn kl_term(p: f64, ln_p: f64, q: f64, ln_q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        p * (ln_p - ln_q)
    }
}
