//! Deterministic synthetic key generators.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Zipf};

use crate::packed::low_mask;

pub const DEFAULT_ZIPF_EXPONENT: f64 = 1.2;
pub const DEFAULT_GAUSSIAN: (f64, f64) = (0.5, 0.1);
pub const DEFAULT_SWAP_FRACTION: f64 = 0.01;

/// Key distributions. Gaussian parameters are fractions of the key domain
/// `2^p`; zipfian keys are `rank - 1`, so key 0 is the most frequent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipfian { s: f64 },
    Gaussian { mu: f64, sigma: f64 },
    Sorted,
    Reverse,
    AlmostSorted { swap_fraction: f64 },
}

impl Distribution {
    /// Every distribution with its default parameters.
    pub fn all() -> [Distribution; 6] {
        [
            Distribution::Uniform,
            Distribution::Zipfian { s: DEFAULT_ZIPF_EXPONENT },
            Distribution::Gaussian {
                mu: DEFAULT_GAUSSIAN.0,
                sigma: DEFAULT_GAUSSIAN.1,
            },
            Distribution::Sorted,
            Distribution::Reverse,
            Distribution::AlmostSorted {
                swap_fraction: DEFAULT_SWAP_FRACTION,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Zipfian { .. } => "zipfian",
            Distribution::Gaussian { .. } => "gaussian",
            Distribution::Sorted => "sorted",
            Distribution::Reverse => "reverse",
            Distribution::AlmostSorted { .. } => "almost_sorted",
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Distribution::Zipfian { s } if !(s.is_finite() && s >= 0.0) => {
                Err(format!("zipfian exponent must be finite and >= 0, got {s}"))
            }
            Distribution::Gaussian { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) => {
                Err(format!("gaussian needs finite mu and sigma > 0, got ({mu}, {sigma})"))
            }
            Distribution::AlmostSorted { swap_fraction } if !(0.0..=1.0).contains(&swap_fraction) => {
                Err(format!("swap fraction must be in [0, 1], got {swap_fraction}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Zipfian { s } => write!(f, "zipfian:{s}"),
            Distribution::Gaussian { mu, sigma } => write!(f, "gaussian:{mu}:{sigma}"),
            Distribution::AlmostSorted { swap_fraction } => write!(f, "almost_sorted:{swap_fraction}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name[:param[:param]]`, e.g. `uniform`, `zipfian:1.5`,
/// `gaussian:0.5:0.05`, `almost_sorted:0.02`.
impl FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let params = parts
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad parameter {x:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let arity = |max: usize| {
            if params.len() > max {
                Err(format!("{name} takes at most {max} parameter(s)"))
            } else {
                Ok(())
            }
        };
        let dist = match name.replace('-', "_").as_str() {
            "uniform" => {
                arity(0)?;
                Distribution::Uniform
            }
            "zipf" | "zipfian" => {
                arity(1)?;
                Distribution::Zipfian {
                    s: params.first().copied().unwrap_or(DEFAULT_ZIPF_EXPONENT),
                }
            }
            "gaussian" | "normal" => {
                arity(2)?;
                Distribution::Gaussian {
                    mu: params.first().copied().unwrap_or(DEFAULT_GAUSSIAN.0),
                    sigma: params.get(1).copied().unwrap_or(DEFAULT_GAUSSIAN.1),
                }
            }
            "sorted" => {
                arity(0)?;
                Distribution::Sorted
            }
            "reverse" => {
                arity(0)?;
                Distribution::Reverse
            }
            "almost_sorted" => {
                arity(1)?;
                Distribution::AlmostSorted {
                    swap_fraction: params.first().copied().unwrap_or(DEFAULT_SWAP_FRACTION),
                }
            }
            _ => return Err(format!("unknown distribution {s:?}")),
        };
        dist.validate()?;
        Ok(dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub distribution: Distribution,
    pub n: u64,
    pub precision_bits: u32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(distribution: Distribution, n: u64, precision_bits: u32, seed: u64) -> Self {
        DatasetSpec {
            distribution,
            n,
            precision_bits,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=64).contains(&self.precision_bits) {
            return Err(format!("precision {} must be in 1..=64", self.precision_bits));
        }
        self.distribution.validate()
    }

    /// Generates the keys; identical specs give identical output.
    pub fn generate(&self) -> Result<Vec<u64>, String> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mask = low_mask(self.precision_bits);
        let domain = 2f64.powi(self.precision_bits as i32);
        let n = self.n as usize;
        let uniform = |rng: &mut ChaCha8Rng| -> Vec<u64> { (0..n).map(|_| rng.random::<u64>() & mask).collect() };
        let keys = match self.distribution {
            Distribution::Uniform => uniform(&mut rng),
            Distribution::Zipfian { s } => {
                let zipf = Zipf::new(domain, s).map_err(|e| e.to_string())?;
                (0..n)
                    .map(|_| ((zipf.sample(&mut rng) as u64).saturating_sub(1)).min(mask))
                    .collect()
            }
            Distribution::Gaussian { mu, sigma } => {
                let normal = Normal::new(mu * domain, sigma * domain).map_err(|e| e.to_string())?;
                (0..n)
                    .map(|_| {
                        let x = normal.sample(&mut rng).round();
                        if x <= 0.0 {
                            0
                        } else {
                            (x as u64).min(mask)
                        }
                    })
                    .collect()
            }
            Distribution::Sorted => {
                let mut keys = uniform(&mut rng);
                keys.sort_unstable();
                keys
            }
            Distribution::Reverse => {
                let mut keys = uniform(&mut rng);
                keys.sort_unstable_by(|a, b| b.cmp(a));
                keys
            }
            Distribution::AlmostSorted { swap_fraction } => {
                let mut keys = uniform(&mut rng);
                keys.sort_unstable();
                if n >= 2 {
                    let swaps = (swap_fraction * n as f64).round() as usize;
                    for _ in 0..swaps {
                        let i = rng.random_range(0..n);
                        let j = rng.random_range(0..n);
                        keys.swap(i, j);
                    }
                }
                keys
            }
        };
        Ok(keys)
    }
}

/// Shuffles `keys` deterministically; handy for building test inputs.
pub fn shuffle_keys(keys: &mut [u64], seed: u64) {
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn parse_and_display_round_trip() {
        for d in Distribution::all() {
            assert_eq!(d.to_string().parse::<Distribution>().unwrap(), d);
        }
        assert_eq!("zipfian:1.5".parse::<Distribution>().unwrap(), Distribution::Zipfian { s: 1.5 });
        assert!("gaussian:0.5:-1".parse::<Distribution>().is_err());
        assert!("pareto".parse::<Distribution>().is_err());
        assert!("uniform:3".parse::<Distribution>().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for d in Distribution::all() {
            for p in [1, 8, 16, 33, 64] {
                let spec = DatasetSpec::new(d, 2000, p, 7);
                let a = spec.generate().unwrap();
                assert_eq!(a, spec.generate().unwrap());
                assert_eq!(a.len(), 2000);
                assert!(a.iter().all(|&k| k <= low_mask(p)), "{d} p={p}");
            }
        }
        let a = DatasetSpec::new(Distribution::Uniform, 100, 32, 1).generate().unwrap();
        let b = DatasetSpec::new(Distribution::Uniform, 100, 32, 2).generate().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ordered_shapes() {
        let sorted = DatasetSpec::new(Distribution::Sorted, 500, 16, 3).generate().unwrap();
        assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        let rev = DatasetSpec::new(Distribution::Reverse, 500, 16, 3).generate().unwrap();
        assert!(rev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zipfian_is_heavily_skewed() {
        let n = 100_000u64;
        let keys = DatasetSpec::new(Distribution::Zipfian { s: 1.2 }, n, 16, 11).generate().unwrap();
        let mut freq = HashMap::new();
        for k in keys {
            *freq.entry(k).or_insert(0u64) += 1;
        }
        let top = *freq.values().max().unwrap() as f64;
        assert!(top >= 100.0 * n as f64 / 65536.0, "top count {top}");
    }

    #[test]
    fn rejects_bad_precision() {
        assert!(DatasetSpec::new(Distribution::Uniform, 1, 65, 0).generate().is_err());
        assert!(DatasetSpec::new(Distribution::Uniform, 1, 0, 0).generate().is_err());
    }
}
