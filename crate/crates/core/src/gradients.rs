//! Per-entry stochastic gradients of the coupled objective.
//!
//! Two tensor kernels share one contract:
//!
//! * [`compute_gradient`] evaluates every mode's contraction `G ×_{-n} {u}`
//!   and the core gradient directly from the core, costing `O(N² Jᴺ)`.
//! * [`compute_gradient_opt`] builds the intermediate tensor
//!   `s_δ = g_δ · Π u⁽ⁿ⁾_{i_n j_n}` once, reads the prediction as its sum,
//!   the row gradients from [`collapse`] divided by the row, and the core
//!   gradient from `S ⊘ G`, costing `O(N Jᴺ)`.
//!
//! Divisions by (near-)zero factor or core entries fall back to the direct
//! formula, which is the limit value of the quotient.

use crate::algebra::{advance, contract_all_but_into, dot, predict_unchecked, CoreStructure, CoreTensor};
use crate::data::ModeIndexCounts;

/// Divisors below this magnitude take the direct path in the opt kernel.
pub const ZERO_DIVISOR: f64 = 1e-12;

/// Regularization weights for one tensor entry: `λ_reg / |Ω^{n,i_n}|` per
/// mode and `λ_reg / |Ω|` for the core.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntryReg {
    pub rows: Vec<f64>,
    pub core: f64,
}

impl EntryReg {
    pub fn for_entry(lambda: f64, counts: &ModeIndexCounts, idx: &[u32], nnz: usize) -> Self {
        let mut reg = EntryReg::default();
        reg.fill(lambda, counts, idx, nnz);
        reg
    }

    /// Refills in place. Modes whose index was never observed get weight 0.
    pub fn fill(&mut self, lambda: f64, counts: &ModeIndexCounts, idx: &[u32], nnz: usize) {
        self.rows.clear();
        self.rows.extend(idx.iter().enumerate().map(|(n, &i)| {
            let c = counts.tensor[n][i as usize];
            if c == 0 {
                0.0
            } else {
                lambda / c as f64
            }
        }));
        self.core = if nnz == 0 { 0.0 } else { lambda / nnz as f64 };
    }
}

/// Gradient of the objective restricted to one tensor entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryGradient {
    pub prediction: f64,
    /// `x_α - x̃_α`.
    pub residual: f64,
    /// `∂f/∂u⁽ⁿ⁾_{i_n}` for every mode.
    pub rows: Vec<Vec<f64>>,
    /// `∂f/∂G` in the core's stored layout; stale when `has_core` is false.
    pub core: Vec<f64>,
    pub has_core: bool,
}

impl EntryGradient {
    pub fn for_core(core: &CoreTensor) -> Self {
        EntryGradient {
            prediction: 0.0,
            residual: 0.0,
            rows: core.ranks().iter().map(|&j| vec![0.0; j]).collect(),
            core: vec![0.0; core.values().len()],
            has_core: false,
        }
    }
}

/// Direct kernel. When `want_core` is false the core gradient is skipped.
pub fn compute_gradient(
    x: f64,
    core: &CoreTensor,
    rows: &[&[f64]],
    reg: &EntryReg,
    want_core: bool,
    out: &mut EntryGradient,
) {
    let pred = predict_unchecked(core, rows);
    let r = x - pred;
    out.prediction = pred;
    out.residual = r;
    for (n, grad) in out.rows.iter_mut().enumerate() {
        contract_all_but_into(core, rows, n, grad);
        for (g, u) in grad.iter_mut().zip(rows[n]) {
            *g = -r * *g + reg.rows[n] * u;
        }
    }
    out.has_core = want_core;
    if !want_core {
        return;
    }
    let g = core.values();
    match core.structure() {
        CoreStructure::HyperDiagonalCp => {
            for (j, (o, &gv)) in out.core.iter_mut().zip(g).enumerate() {
                let w: f64 = rows.iter().map(|u| u[j]).product();
                *o = -r * w + reg.core * gv;
            }
        }
        CoreStructure::DenseTucker => {
            let ranks = core.ranks();
            let mut idx = vec![0usize; ranks.len()];
            for (o, &gv) in out.core.iter_mut().zip(g) {
                let mut w = 1.0;
                for (u, &j) in rows.iter().zip(&idx) {
                    w *= u[j];
                }
                *o = -r * w + reg.core * gv;
                advance(&mut idx, ranks);
            }
        }
    }
}

/// The intermediate tensor `S`: same shape as the core that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateTensor {
    ranks: Vec<usize>,
    structure: CoreStructure,
    values: Vec<f64>,
}

impl IntermediateTensor {
    pub fn for_core(core: &CoreTensor) -> Self {
        IntermediateTensor {
            ranks: core.ranks().to_vec(),
            structure: core.structure(),
            values: vec![0.0; core.values().len()],
        }
    }

    /// `s_δ = g_δ · Π_n u⁽ⁿ⁾_{j_n}`.
    pub fn build(core: &CoreTensor, rows: &[&[f64]]) -> Self {
        let mut s = Self::for_core(core);
        let mut prefix = Vec::new();
        s.fill(core, rows, &mut prefix);
        s
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Fills `S` and returns `Σ S`, the prediction. For a dense core,
    /// `prefix` receives the outer product of all rows but the last, so the
    /// full outer product at flat offset `p·J_N + k` is `prefix[p]·u⁽ᴺ⁾_k`.
    fn fill(&mut self, core: &CoreTensor, rows: &[&[f64]], prefix: &mut Vec<f64>) -> f64 {
        let g = core.values();
        let mut total = 0.0;
        match self.structure {
            CoreStructure::HyperDiagonalCp => {
                for (j, (s, &gv)) in self.values.iter_mut().zip(g).enumerate() {
                    *s = rows.iter().fold(gv, |acc, u| acc * u[j]);
                    total += *s;
                }
            }
            CoreStructure::DenseTucker => {
                let (last, outer_rows) = rows.split_last().expect("order ≥ 1");
                // Grow the prefix product one mode at a time, in place, back to front.
                let plen: usize = outer_rows.iter().map(|u| u.len()).product();
                prefix.resize(plen, 0.0);
                prefix[0] = 1.0;
                let mut len = 1;
                for u in outer_rows {
                    let j = u.len();
                    for a in (0..len).rev() {
                        let w = prefix[a];
                        for (b, &ub) in u.iter().enumerate().rev() {
                            prefix[a * j + b] = w * ub;
                        }
                    }
                    len *= j;
                }
                let jl = last.len();
                for ((sf, gf), &w) in self.values.chunks_exact_mut(jl).zip(g.chunks_exact(jl)).zip(prefix.iter()) {
                    for ((s, &gv), &u) in sf.iter_mut().zip(gf).zip(*last) {
                        *s = gv * w * u;
                        total += *s;
                    }
                }
            }
        }
        total
    }
}

/// Sum of the entries of `S` whose mode-`n` index is `k`, for each `k`.
pub fn collapse(s: &IntermediateTensor, mode: usize) -> Vec<f64> {
    let mut out = vec![0.0; s.ranks[mode]];
    if s.structure == CoreStructure::HyperDiagonalCp {
        out.copy_from_slice(&s.values);
        return out;
    }
    let jn = s.ranks[mode];
    let inner: usize = s.ranks[mode + 1..].iter().product();
    for block in s.values.chunks_exact(jn * inner) {
        for (o, fiber) in out.iter_mut().zip(block.chunks_exact(inner)) {
            *o += fiber.iter().sum::<f64>();
        }
    }
    out
}

/// [`collapse`] for every mode in one pass over `S`: each last-mode fiber
/// adds elementwise into the last mode's result and its sum into the other
/// modes' results at the fiber's index.
fn collapse_all_into(s: &IntermediateTensor, out: &mut [Vec<f64>], idx: &mut Vec<usize>) {
    if s.structure == CoreStructure::HyperDiagonalCp {
        for o in out.iter_mut() {
            o.copy_from_slice(&s.values);
        }
        return;
    }
    for o in out.iter_mut() {
        o.iter_mut().for_each(|v| *v = 0.0);
    }
    let (last_out, outer_out) = out.split_last_mut().expect("order ≥ 1");
    let outer_ranks = &s.ranks[..s.ranks.len() - 1];
    idx.clear();
    idx.resize(outer_ranks.len(), 0);
    for fiber in s.values.chunks_exact(last_out.len()) {
        let mut fsum = 0.0;
        for (o, &v) in last_out.iter_mut().zip(fiber) {
            *o += v;
            fsum += v;
        }
        for (o, &j) in outer_out.iter_mut().zip(idx.iter()) {
            o[j] += fsum;
        }
        advance(idx, outer_ranks);
    }
}

/// Per-worker buffers for the opt kernel, reused across entries.
#[derive(Clone, Debug)]
pub struct OptScratch {
    s: IntermediateTensor,
    prefix: Vec<f64>,
    collapsed: Vec<Vec<f64>>,
    idx: Vec<usize>,
}

impl OptScratch {
    pub fn for_core(core: &CoreTensor) -> Self {
        OptScratch {
            s: IntermediateTensor::for_core(core),
            prefix: Vec::with_capacity(core.values().len()),
            collapsed: core.ranks().iter().map(|&j| vec![0.0; j]).collect(),
            idx: Vec::with_capacity(core.order()),
        }
    }

    pub fn intermediate(&self) -> &IntermediateTensor {
        &self.s
    }
}

/// Intermediate-reuse kernel; same contract as [`compute_gradient`].
pub fn compute_gradient_opt(
    x: f64,
    core: &CoreTensor,
    rows: &[&[f64]],
    reg: &EntryReg,
    want_core: bool,
    scratch: &mut OptScratch,
    out: &mut EntryGradient,
) {
    let pred = scratch.s.fill(core, rows, &mut scratch.prefix);
    let r = x - pred;
    out.prediction = pred;
    out.residual = r;
    collapse_all_into(&scratch.s, &mut scratch.collapsed, &mut scratch.idx);
    for (n, grad) in out.rows.iter_mut().enumerate() {
        let u = rows[n];
        if u.iter().any(|v| v.abs() < ZERO_DIVISOR) {
            contract_all_but_into(core, rows, n, grad);
        } else {
            for ((g, &c), &uk) in grad.iter_mut().zip(&scratch.collapsed[n]).zip(u) {
                *g = c / uk;
            }
        }
        for (g, &uk) in grad.iter_mut().zip(u) {
            *g = -r * *g + reg.rows[n] * uk;
        }
    }
    out.has_core = want_core;
    if !want_core {
        return;
    }
    let g = core.values();
    let sv = &scratch.s.values;
    let rc = reg.core;
    match core.structure() {
        CoreStructure::HyperDiagonalCp => {
            for (j, ((o, &gv), &s)) in out.core.iter_mut().zip(g).zip(sv).enumerate() {
                let ratio = if gv.abs() < ZERO_DIVISOR {
                    rows.iter().map(|u| u[j]).product()
                } else {
                    s / gv
                };
                *o = -r * ratio + rc * gv;
            }
        }
        CoreStructure::DenseTucker => {
            let last = rows[rows.len() - 1];
            let jl = last.len();
            let fibers = out.core.chunks_exact_mut(jl).zip(g.chunks_exact(jl)).zip(sv.chunks_exact(jl));
            for (((of, gf), sf), &w) in fibers.zip(&scratch.prefix) {
                for (((o, &gv), &s), &u) in of.iter_mut().zip(gf).zip(sf).zip(last) {
                    // Divide unconditionally and select, which keeps the loop branch-free.
                    let q = s / gv;
                    let ratio = if gv.abs() < ZERO_DIVISOR { w * u } else { q };
                    *o = -r * ratio + rc * gv;
                }
            }
        }
    }
}

/// Gradient of the objective restricted to one coupled-matrix entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixEntryGradient {
    pub prediction: f64,
    /// `y_β - ỹ_β`.
    pub residual: f64,
    /// `∂f/∂u⁽ᶜ⁾_{j₁}`.
    pub u: Vec<f64>,
    /// `∂f/∂v_{j₂}`.
    pub v: Vec<f64>,
}

impl MatrixEntryGradient {
    pub fn with_rank(rank: usize) -> Self {
        MatrixEntryGradient {
            prediction: 0.0,
            residual: 0.0,
            u: vec![0.0; rank],
            v: vec![0.0; rank],
        }
    }
}

/// `∂u = -λ_m r v`, `∂v = -λ_m r u + (λ_m λ_reg / |Ω_Y^{2,j₂}|) v`.
pub fn matrix_entry_gradients(
    y: f64,
    u: &[f64],
    v: &[f64],
    weight: f64,
    lambda_reg: f64,
    col_count: u32,
    out: &mut MatrixEntryGradient,
) {
    let pred = dot(u, v);
    let r = y - pred;
    out.prediction = pred;
    out.residual = r;
    let reg = if col_count == 0 {
        0.0
    } else {
        weight * lambda_reg / col_count as f64
    };
    for k in 0..u.len() {
        out.u[k] = -weight * r * v[k];
        out.v[k] = -weight * r * u[k] + reg * v[k];
    }
}
