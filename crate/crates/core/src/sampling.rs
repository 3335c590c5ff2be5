//! Keyed random streams and device-cohort sampling.
//!
//! Every random draw in the simulator comes from a stream derived from a
//! [`StreamKey`]. Two calls with the same key see the same numbers no matter
//! which thread or process asks, which is what makes parallel rounds and
//! manifest replays bit-reproducible.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream type handed out by [`StreamKey::stream`].
pub type Stream = ChaCha12Rng;

/// What a stream is used for. Part of the key so that, e.g., the cohort draw
/// and the noise draws of the same round never share numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Cohort,
    NoiseU,
    NoiseV,
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Cohort => 1,
            Purpose::NoiseU => 2,
            Purpose::NoiseV => 3,
            Purpose::Init => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub device: Option<usize>,
    pub round: usize,
    pub step: usize,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            purpose,
            device: None,
            round: 0,
            step: 0,
        }
    }

    pub fn device(mut self, device: usize) -> Self {
        self.device = Some(device);
        self
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round;
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn with_purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    /// 256-bit stream seed. Each field is folded through SplitMix64 so that
    /// neighbouring keys land on unrelated seeds.
    pub fn seed_bytes(&self) -> [u8; 32] {
        let device = self.device.map_or(0, |d| d as u64 + 1);
        let mut state = splitmix64(self.seed ^ 0x5EED_F00D_CAFE_D00D);
        for field in [self.purpose.tag(), device, self.round as u64, self.step as u64] {
            state = splitmix64(state ^ splitmix64(field));
        }
        let mut out = [0u8; 32];
        let mut s = state;
        for chunk in out.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn stream(&self) -> Stream {
        ChaCha12Rng::from_seed(self.seed_bytes())
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Devices selected for one round, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSample {
    pub round: usize,
    pub indices: Vec<usize>,
}

impl CohortSample {
    pub fn contains(&self, device: usize) -> bool {
        self.indices.binary_search(&device).is_ok()
    }
}

/// Draws `m` distinct devices out of `n`, uniformly over all subsets.
pub fn sample_cohort(n: usize, m: usize, key: StreamKey) -> Result<CohortSample> {
    if m < 1 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cohort size {m} must lie in 1..={n}"
        )));
    }
    let indices = if m == n {
        (0..n).collect()
    } else {
        let mut rng = key.stream();
        let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
        picked.sort_unstable();
        picked
    };
    Ok(CohortSample {
        round: key.round,
        indices,
    })
}

/// Expected squared deviation of the mean of a size-`m` subset (drawn
/// without replacement) from the population mean:
/// `((n-m)/(n-1)) * (1/m) * (1/n) * sum ||a_i - a_bar||^2`.
pub fn subset_mean_variance(vectors: &[DVector<f64>], m: usize) -> Result<f64> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty vector set".into()));
    }
    if m < 1 || m > n {
        return Err(Error::InvalidArgument(format!(
            "subset size {m} must lie in 1..={n}"
        )));
    }
    let dim = vectors[0].len();
    if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "sampled vector",
            device: Some(i),
            expected: dim,
            found: v.len(),
        });
    }
    if m == n {
        return Ok(0.0);
    }
    let mean = vectors.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n as f64;
    let spread = vectors.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / n as f64;
    let n_f = n as f64;
    let m_f = m as f64;
    Ok((n_f - m_f) / (n_f - 1.0) / m_f * spread)
}
