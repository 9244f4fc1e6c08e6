//! Small numerical helpers shared across modules: compensated summation,
//! sample moments and the seed-splitting rule used for replicate streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
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

/// Sums in iteration order with compensation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// `Σ wᵢvᵢ` evaluated as `v₀ + Σ wᵢ(vᵢ − v₀)`, so equal values give exactly
/// that value back.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    match values.first() {
        None => 0.0,
        Some(&v0) => v0 + compensated_sum(values.iter().zip(weights).map(|(v, w)| w * (v - v0))),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance (divisor n - 1). Returns 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() - 1) as f64
}

/// Random stream for replicate `index` of a run seeded with `seed`.
///
/// The stream seed is `seed + index` (wrapping); ChaCha is counter based so
/// neighbouring seeds give unrelated streams.
pub fn seed_stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index))
}

/// Derives an independent base seed for a named sub-task of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then one splitmix64 round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Formats a value with 17 significant digits so it parses back exactly.
pub fn fmt_full(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Human-readable companion to [`fmt_full`].
pub fn fmt_rounded(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", x);
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (3 - mag).clamp(0, 12) as usize;
    format!("{:.*}", decimals, x)
}
