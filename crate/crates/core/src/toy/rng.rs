use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Standard normals from xoshiro256** seeded through SplitMix64.
///
/// * uniform: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`;
/// * Box–Muller on `u₁ = 1 − uniform` (in `(0, 1]`) and `u₂ = uniform`:
///   `r = √(−2 ln u₁)`, emitting `r cos 2πu₂` then `r sin 2πu₂`.
///
/// Both outputs of a pair are used, in that order.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
