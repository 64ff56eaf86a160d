//! Planted low-rank synthetic data.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::algebra::FactorModel;
use crate::data::{CoupledMatrix, DataBundle, SparseTensor};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::trainer::{sample_model, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    pub nnz: usize,
    /// Coupled-matrix entries per tensor entry.
    pub matrix_ratio: f64,
    pub ranks: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
    /// Mode (0-based) the matrix is coupled to; `None` for no matrix.
    pub coupled_mode: Option<usize>,
    /// Columns of the coupled matrix; defaults to the coupled mode's dimension.
    pub matrix_cols: Option<usize>,
    pub lambda_m: f64,
}

impl SynthSpec {
    pub fn new(dims: Vec<usize>, nnz: usize, ranks: Vec<usize>, seed: u64) -> Self {
        SynthSpec {
            dims,
            nnz,
            matrix_ratio: 0.1,
            ranks,
            noise: 0.0,
            seed,
            coupled_mode: Some(0),
            matrix_cols: None,
            lambda_m: TrainConfig::DEFAULT_LAMBDA_M,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return bad(format!("dims must have at least two positive entries, got {:?}", self.dims));
        }
        if self.ranks.len() != self.dims.len() || self.ranks.contains(&0) {
            return bad(format!("need one positive rank per mode, got {:?}", self.ranks));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if !(self.matrix_ratio >= 0.0 && self.matrix_ratio.is_finite()) {
            return bad(format!("matrix ratio must be nonnegative, got {}", self.matrix_ratio));
        }
        if let Some(c) = self.coupled_mode {
            if c >= self.dims.len() {
                return bad(format!("coupled mode {} out of range", c + 1));
            }
            if self.matrix_cols == Some(0) {
                return bad("coupled matrix needs at least one column".into());
            }
        }
        Ok(())
    }
}

pub struct SynthData {
    pub bundle: DataBundle,
    pub truth: FactorModel,
}

/// Draws `n` distinct linear indices below `capacity`, sorted.
fn distinct_indices<R: Rng>(rng: &mut R, capacity: u128, n: usize) -> Result<Vec<u128>> {
    if n as u128 > capacity {
        return Err(Error::Infeasible {
            requested: n,
            capacity,
        });
    }
    let mut out: Vec<u128> = if (n as u128) * 2 > capacity {
        // Dense request: capacity ≤ 2n fits in memory.
        let mut all: Vec<u128> = (0..capacity).collect();
        let (picked, _) = all.partial_shuffle(rng, n);
        picked.to_vec()
    } else {
        let mut seen = HashSet::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        while v.len() < n {
            let x = rng.random_range(0..capacity);
            if seen.insert(x) {
                v.push(x);
            }
        }
        v
    };
    out.sort_unstable();
    Ok(out)
}

fn unravel(mut lin: u128, dims: &[usize], out: &mut [u32]) {
    for (o, &d) in out.iter_mut().zip(dims).rev() {
        *o = (lin % d as u128) as u32;
        lin /= d as u128;
    }
}

/// Samples a ground-truth model with the trainer's init distribution, then
/// observes `nnz` distinct uniform entries (plus Gaussian noise) and, if
/// coupled, `round(ratio·nnz)` entries of `U⁽ᶜ⁾Vᵀ`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synth);
    let mut cfg = TrainConfig::new(spec.ranks.clone());
    cfg.seed = spec.seed;
    let coupling = spec
        .coupled_mode
        .map(|c| (c, spec.matrix_cols.unwrap_or(spec.dims[c])));
    let truth = sample_model(&mut rng, &cfg, &spec.dims, coupling.as_slice())?;
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| {
        if spec.noise > 0.0 {
            normal.sample(rng)
        } else {
            0.0
        }
    };

    let capacity: u128 = spec.dims.iter().map(|&d| d as u128).product();
    let order = spec.dims.len();
    let lin = distinct_indices(&mut rng, capacity, spec.nnz)?;
    let mut indices = vec![0u32; lin.len() * order];
    let mut values = Vec::with_capacity(lin.len());
    for (e, &l) in lin.iter().enumerate() {
        let idx = &mut indices[e * order..(e + 1) * order];
        unravel(l, &spec.dims, idx);
        values.push(truth.predict(idx) + noise(&mut rng));
    }
    let tensor = SparseTensor::new(spec.dims.clone(), indices, values)?;

    let mut matrices = Vec::new();
    if let Some((c, cols)) = coupling {
        let rows = spec.dims[c];
        let m_nnz = (spec.matrix_ratio * spec.nnz as f64).round() as usize;
        let lin = distinct_indices(&mut rng, rows as u128 * cols as u128, m_nnz)?;
        let mut entries = Vec::with_capacity(lin.len());
        for &l in &lin {
            let (r, col) = ((l / cols as u128) as usize, (l % cols as u128) as usize);
            let y = truth.predict_matrix(0, r, col) + noise(&mut rng);
            entries.push((r as u32, col as u32, y));
        }
        matrices.push(CoupledMatrix::new(c, rows, cols, entries, spec.lambda_m)?);
    }
    Ok(SynthData {
        bundle: DataBundle::new(tensor, matrices)?,
        truth,
    })
}
