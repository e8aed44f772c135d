//! Seeded random streams.
//!
//! Parallel work is cut into fixed-size chunks and every chunk draws from its
//! own ChaCha stream keyed by `(seed, chunk index)`. The chunking never depends
//! on the thread count, so results are bit-identical for any `--threads`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

pub type StreamRng = ChaCha8Rng;

/// Samples per parallel work unit.
pub const CHUNK: usize = 512;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a fresh master seed for substreams from a caller-supplied generator.
pub fn fork<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

/// Poisson sampler that also accepts mean zero (always returns 0).
#[derive(Debug, Clone)]
pub struct Pois(Option<Poisson<f64>>);

impl Pois {
    pub fn new(mean: f64) -> Self {
        assert!(mean >= 0.0 && mean.is_finite(), "Poisson mean must be finite and >= 0");
        if mean == 0.0 {
            Pois(None)
        } else {
            Pois(Some(Poisson::new(mean).expect("valid Poisson mean")))
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.0 {
            None => 0,
            Some(p) => p.sample(rng) as usize,
        }
    }
}

/// Mean and standard error of a sample, using the unbiased variance.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
