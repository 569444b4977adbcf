use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaStats {
    pub l2: f64,
    pub linf: f64,
    /// Fraction of entries that are nonzero and survive the mask.
    pub nonzero_fraction: f64,
}

/// Running statistics over a task vector fed in index order. Partial
/// accumulators from consecutive chunks combine with [`StatsAccumulator::absorb`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StatsAccumulator {
    sum_sq: f64,
    linf: f64,
    kept_nonzero: u64,
    count: u64,
}

impl StatsAccumulator {
    #[inline]
    pub fn push(&mut self, delta: f64, kept: bool) {
        self.sum_sq += delta * delta;
        let a = delta.abs();
        if a > self.linf || a.is_nan() {
            self.linf = a;
        }
        self.kept_nonzero += (kept && delta != 0.0) as u64;
        self.count += 1;
    }

    pub fn absorb(&mut self, later: &StatsAccumulator) {
        self.sum_sq += later.sum_sq;
        if later.linf > self.linf || later.linf.is_nan() {
            self.linf = later.linf;
        }
        self.kept_nonzero += later.kept_nonzero;
        self.count += later.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn kept_nonzero(&self) -> u64 {
        self.kept_nonzero
    }

    pub fn sum_sq(&self) -> f64 {
        self.sum_sq
    }

    pub fn finish(&self) -> DeltaStats {
        DeltaStats {
            l2: self.sum_sq.sqrt(),
            linf: self.linf,
            nonzero_fraction: if self.count == 0 {
                0.0
            } else {
                self.kept_nonzero as f64 / self.count as f64
            },
        }
    }
}

/// Norms of the raw delta and the nonzero fraction after `mask`.
pub fn delta_stats(delta: &[f64], mask: Option<&[bool]>) -> DeltaStats {
    let mut acc = StatsAccumulator::default();
    match mask {
        Some(mask) => {
            assert_eq!(mask.len(), delta.len(), "mask length");
            for (&d, &k) in delta.iter().zip(mask) {
                acc.push(d, k);
            }
        }
        None => delta.iter().for_each(|&d| acc.push(d, true)),
    }
    acc.finish()
}
