//! Dense core-tensor and factor-row algebra for the Tucker model.
//!
//! The core is stored row-major with mode 1 slowest, so the flat offset of
//! `(j1, .., jN)` is `((j1 * J2 + j2) * J3 + j3) ...`. A hyper-diagonal (CP)
//! core stores only its superdiagonal but answers dense queries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoreStructure {
    #[default]
    DenseTucker,
    HyperDiagonalCp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoreTensor {
    ranks: Vec<usize>,
    structure: CoreStructure,
    values: Vec<f64>,
}

impl CoreTensor {
    pub fn zeros(ranks: Vec<usize>, structure: CoreStructure) -> Result<Self> {
        let len = stored_len(&ranks, structure)?;
        Ok(CoreTensor {
            ranks,
            structure,
            values: vec![0.0; len],
        })
    }

    /// Dense core from row-major values.
    pub fn dense(ranks: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::with_values(ranks, CoreStructure::DenseTucker, values)
    }

    /// Hyper-diagonal core of the given order from its superdiagonal.
    pub fn hyper_diagonal(order: usize, diagonal: Vec<f64>) -> Result<Self> {
        let ranks = vec![diagonal.len(); order];
        Self::with_values(ranks, CoreStructure::HyperDiagonalCp, diagonal)
    }

    pub fn with_values(
        ranks: Vec<usize>,
        structure: CoreStructure,
        values: Vec<f64>,
    ) -> Result<Self> {
        let len = stored_len(&ranks, structure)?;
        if values.len() != len {
            return Err(Error::Shape(format!(
                "core of ranks {ranks:?} stores {len} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("core has a non-finite value".into()));
        }
        Ok(CoreTensor {
            ranks,
            structure,
            values,
        })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn order(&self) -> usize {
        self.ranks.len()
    }

    pub fn structure(&self) -> CoreStructure {
        self.structure
    }

    pub fn is_cp(&self) -> bool {
        self.structure == CoreStructure::HyperDiagonalCp
    }

    /// Stored values: the full dense array, or the superdiagonal in CP mode.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of entries of the equivalent dense core.
    pub fn dense_len(&self) -> usize {
        self.ranks.iter().product()
    }

    /// Entry `g_{j1..jN}`, as if the core were dense.
    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order(), "core index has wrong length");
        match self.structure {
            CoreStructure::DenseTucker => self.values[flat_offset(&self.ranks, idx)],
            CoreStructure::HyperDiagonalCp => {
                if idx.iter().all(|&j| j == idx[0]) {
                    self.values[idx[0]]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn to_dense(&self) -> CoreTensor {
        match self.structure {
            CoreStructure::DenseTucker => self.clone(),
            CoreStructure::HyperDiagonalCp => {
                let mut values = vec![0.0; self.dense_len()];
                let step = diagonal_stride(&self.ranks);
                for (j, &g) in self.values.iter().enumerate() {
                    values[j * step] = g;
                }
                CoreTensor {
                    ranks: self.ranks.clone(),
                    structure: CoreStructure::DenseTucker,
                    values,
                }
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

fn stored_len(ranks: &[usize], structure: CoreStructure) -> Result<usize> {
    if ranks.len() < 2 {
        return Err(Error::Shape("core needs at least two modes".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Shape(format!("zero rank in {ranks:?}")));
    }
    match structure {
        CoreStructure::DenseTucker => Ok(ranks.iter().product()),
        CoreStructure::HyperDiagonalCp => {
            if ranks.iter().any(|&r| r != ranks[0]) {
                return Err(Error::Shape(format!(
                    "hyper-diagonal core needs equal ranks, got {ranks:?}"
                )));
            }
            Ok(ranks[0])
        }
    }
}

pub(crate) fn flat_offset(ranks: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(ranks).fold(0, |acc, (&j, &r)| acc * r + j)
}

/// Flat distance between consecutive superdiagonal entries of a dense core.
fn diagonal_stride(ranks: &[usize]) -> usize {
    let mut stride = 0;
    let mut block = 1;
    for &r in ranks.iter().rev() {
        stride += block;
        block *= r;
    }
    stride
}

/// Advances a row-major multi-index; returns false after the last one.
#[inline]
pub(crate) fn advance(idx: &mut [usize], ranks: &[usize]) -> bool {
    for n in (0..idx.len()).rev() {
        idx[n] += 1;
        if idx[n] < ranks[n] {
            return true;
        }
        idx[n] = 0;
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FactorMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows} x {cols} factor given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("factor has a non-finite value".into()));
        }
        Ok(FactorMatrix { rows, cols, values })
    }

    /// Unvalidated constructor for values that may be mid-training.
    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        FactorMatrix { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FactorMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `max |(UᵀU - I)_{ij}|`.
    pub fn gram_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.cols {
            for b in 0..self.cols {
                let dot: f64 = (0..self.rows).map(|i| self.get(i, a) * self.get(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            values.extend(m.row(i).iter().copied());
        }
        FactorMatrix { rows, cols, values }
    }
}

/// A coupled matrix's own factor `V` and the tensor mode it shares.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub mode: usize,
    pub v: FactorMatrix,
}

/// `X ≈ G ×₁ U⁽¹⁾ ⋯ ×_N U⁽ᴺ⁾` and `Y_k ≈ U⁽ᶜ⁾ V_kᵀ` for every coupled matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    pub core: CoreTensor,
    pub factors: Vec<FactorMatrix>,
    pub couplings: Vec<Coupling>,
}

impl FactorModel {
    pub fn new(core: CoreTensor, factors: Vec<FactorMatrix>, couplings: Vec<Coupling>) -> Result<Self> {
        let m = FactorModel {
            core,
            factors,
            couplings,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.len() != self.core.order() {
            return Err(Error::Shape(format!(
                "{} factors for an order-{} core",
                self.factors.len(),
                self.core.order()
            )));
        }
        for (n, (f, &r)) in self.factors.iter().zip(self.core.ranks()).enumerate() {
            if f.cols() != r {
                return Err(Error::Shape(format!(
                    "factor {} has {} columns, core rank is {r}",
                    n + 1,
                    f.cols()
                )));
            }
        }
        for (k, c) in self.couplings.iter().enumerate() {
            if c.mode >= self.core.order() {
                return Err(Error::Shape(format!(
                    "coupling {} names mode {} of an order-{} model",
                    k + 1,
                    c.mode + 1,
                    self.core.order()
                )));
            }
            if c.v.cols() != self.core.ranks()[c.mode] {
                return Err(Error::Shape(format!(
                    "coupled factor {} has {} columns, rank of mode {} is {}",
                    k + 1,
                    c.v.cols(),
                    c.mode + 1,
                    self.core.ranks()[c.mode]
                )));
            }
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.core.order()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    /// Reconstructed tensor entry at a 0-based index.
    pub fn predict(&self, idx: &[u32]) -> f64 {
        let mut rows: [&[f64]; MAX_STACK_ORDER] = [&[]; MAX_STACK_ORDER];
        if idx.len() <= MAX_STACK_ORDER {
            for (n, &i) in idx.iter().enumerate() {
                rows[n] = self.factors[n].row(i as usize);
            }
            predict_unchecked(&self.core, &rows[..idx.len()])
        } else {
            let rows: Vec<&[f64]> = idx
                .iter()
                .enumerate()
                .map(|(n, &i)| self.factors[n].row(i as usize))
                .collect();
            predict_unchecked(&self.core, &rows)
        }
    }

    /// Reconstructed entry `(row, col)` of coupled matrix `k`.
    pub fn predict_matrix(&self, k: usize, row: usize, col: usize) -> f64 {
        let c = &self.couplings[k];
        dot(self.factors[c.mode].row(row), c.v.row(col))
    }
}

const MAX_STACK_ORDER: usize = 8;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_rows(core: &CoreTensor, rows: &[&[f64]]) -> Result<()> {
    if rows.len() != core.order() {
        return Err(Error::Shape(format!(
            "{} rows for an order-{} core",
            rows.len(),
            core.order()
        )));
    }
    for (n, (r, &j)) in rows.iter().zip(core.ranks()).enumerate() {
        if r.len() != j {
            return Err(Error::Shape(format!(
                "row for mode {} has length {}, rank is {j}",
                n + 1,
                r.len()
            )));
        }
    }
    Ok(())
}

/// `x̃ = G × {u}`: the model's value for one set of factor rows.
pub fn predict_entry(core: &CoreTensor, rows: &[&[f64]]) -> Result<f64> {
    check_rows(core, rows)?;
    Ok(predict_unchecked(core, rows))
}

pub(crate) fn predict_unchecked(core: &CoreTensor, rows: &[&[f64]]) -> f64 {
    let g = core.values();
    if core.is_cp() {
        return (0..g.len())
            .map(|j| rows.iter().fold(g[j], |acc, r| acc * r[j]))
            .sum();
    }
    // Contract the fastest mode with a dot product and the outer modes with
    // a running prefix product.
    let order = rows.len();
    let ranks = core.ranks();
    let last = rows[order - 1];
    let inner = ranks[order - 1];
    let outer_ranks = &ranks[..order - 1];
    let mut idx = [0usize; MAX_STACK_ORDER];
    let mut idx_heap;
    let idx: &mut [usize] = if order - 1 <= MAX_STACK_ORDER {
        &mut idx[..order - 1]
    } else {
        idx_heap = vec![0usize; order - 1];
        &mut idx_heap
    };
    let mut total = 0.0;
    let mut offset = 0;
    loop {
        let prefix = idx
            .iter()
            .zip(rows)
            .fold(1.0, |acc, (&j, r)| acc * r[j]);
        total += prefix * dot(&g[offset..offset + inner], last);
        offset += inner;
        if !advance(idx, outer_ranks) {
            break;
        }
    }
    total
}

/// `G ×_{-n} {u}`: contracts every mode except `skip`, leaving a vector of
/// length `J_skip`. Its dot product with the skipped row is the prediction.
pub fn contract_all_but(core: &CoreTensor, rows: &[&[f64]], skip: usize) -> Result<Vec<f64>> {
    check_rows(core, rows)?;
    if skip >= core.order() {
        return Err(Error::Shape(format!(
            "mode {} out of range for an order-{} core",
            skip + 1,
            core.order()
        )));
    }
    let mut out = vec![0.0; core.ranks()[skip]];
    contract_all_but_into(core, rows, skip, &mut out);
    Ok(out)
}

/// Direct evaluation: every core entry is multiplied by the `N - 1` factor
/// entries it meets, with no reuse across modes.
pub(crate) fn contract_all_but_into(core: &CoreTensor, rows: &[&[f64]], skip: usize, out: &mut [f64]) {
    let g = core.values();
    out.iter_mut().for_each(|o| *o = 0.0);
    if core.is_cp() {
        for (k, o) in out.iter_mut().enumerate() {
            *o = rows
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != skip)
                .fold(g[k], |acc, (_, r)| acc * r[k]);
        }
        return;
    }
    let ranks = core.ranks();
    let mut idx = vec![0usize; ranks.len()];
    for &gv in g {
        let mut w = gv;
        for (m, r) in rows.iter().enumerate() {
            if m != skip {
                w *= r[idx[m]];
            }
        }
        out[idx[skip]] += w;
        advance(&mut idx, ranks);
    }
}

/// Mode-`n` product `G ×_n R` with a square `J_n x J_n` matrix. The result is
/// always dense.
pub fn core_mode_product(core: &CoreTensor, r: &FactorMatrix, mode: usize) -> Result<CoreTensor> {
    if mode >= core.order() {
        return Err(Error::Shape(format!("mode {} out of range", mode + 1)));
    }
    let jn = core.ranks()[mode];
    if r.rows() != jn || r.cols() != jn {
        return Err(Error::Shape(format!(
            "mode-{} product needs a {jn} x {jn} matrix, got {} x {}",
            mode + 1,
            r.rows(),
            r.cols()
        )));
    }
    let dense = core.to_dense();
    let ranks = dense.ranks();
    let outer: usize = ranks[..mode].iter().product();
    let inner: usize = ranks[mode + 1..].iter().product();
    let src = dense.values();
    let mut dst = vec![0.0; src.len()];
    for a in 0..outer {
        let base = a * jn * inner;
        for j in 0..jn {
            let out = &mut dst[base + j * inner..base + (j + 1) * inner];
            for i in 0..jn {
                let coef = r.get(j, i);
                if coef == 0.0 {
                    continue;
                }
                let inp = &src[base + i * inner..base + (i + 1) * inner];
                for (o, x) in out.iter_mut().zip(inp) {
                    *o += coef * x;
                }
            }
        }
    }
    CoreTensor::dense(ranks.to_vec(), dst)
}

/// Thin QR with the diagonal of `R` made nonnegative by column sign flips.
pub fn thin_qr(u: &FactorMatrix) -> Result<(FactorMatrix, FactorMatrix)> {
    if u.rows() < u.cols() {
        return Err(Error::InvalidConfig(format!(
            "cannot orthogonalize a {} x {} factor: rank exceeds dimension",
            u.rows(),
            u.cols()
        )));
    }
    let qr = u.to_nalgebra().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for k in 0..r.nrows() {
        if r[(k, k)] < 0.0 {
            r.row_mut(k).neg_mut();
            q.column_mut(k).neg_mut();
        }
    }
    Ok((FactorMatrix::from_nalgebra(&q), FactorMatrix::from_nalgebra(&r)))
}

/// Replaces every factor by the `Q` of its thin QR and folds each `R` into
/// the core (and `Rᵀ` into coupled factors), leaving predictions unchanged.
pub fn finalize_orthogonalize(model: &FactorModel) -> Result<FactorModel> {
    model.validate()?;
    let mut core = model.core.to_dense();
    let mut factors = Vec::with_capacity(model.order());
    let mut couplings = model.couplings.clone();
    for (n, u) in model.factors.iter().enumerate() {
        let (q, r) = thin_qr(u)?;
        core = core_mode_product(&core, &r, n)?;
        for c in couplings.iter_mut().filter(|c| c.mode == n) {
            c.v = mul_transposed(&c.v, &r);
        }
        factors.push(q);
    }
    FactorModel::new(core, factors, couplings)
}

/// `A · Bᵀ` for row-major matrices.
fn mul_transposed(a: &FactorMatrix, b: &FactorMatrix) -> FactorMatrix {
    let mut out = FactorMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.values[i * b.rows() + j] = dot(a.row(i), b.row(j));
        }
    }
    out
}

/// Scales every factor column to unit L2 norm and absorbs the norm into the
/// core along that mode and into coupled factors sharing the mode. All-zero
/// columns are left as they are.
pub fn normalize_factor_columns(model: &mut FactorModel) {
    for n in 0..model.order() {
        let f = &mut model.factors[n];
        let mut norms = vec![0.0f64; f.cols()];
        for i in 0..f.rows() {
            for (s, v) in norms.iter_mut().zip(f.row(i)) {
                *s += v * v;
            }
        }
        for s in norms.iter_mut() {
            *s = s.sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        for i in 0..f.rows() {
            for (v, s) in f.row_mut(i).iter_mut().zip(&norms) {
                *v /= s;
            }
        }
        scale_core_mode(&mut model.core, n, &norms);
        for c in model.couplings.iter_mut().filter(|c| c.mode == n) {
            for j in 0..c.v.rows() {
                for (v, s) in c.v.row_mut(j).iter_mut().zip(&norms) {
                    *v *= s;
                }
            }
        }
    }
}

/// `G ×_n diag(scale)`, preserving the structure of the core.
fn scale_core_mode(core: &mut CoreTensor, mode: usize, scale: &[f64]) {
    if core.is_cp() {
        for (g, s) in core.values.iter_mut().zip(scale) {
            *g *= s;
        }
        return;
    }
    let ranks = core.ranks.clone();
    let inner: usize = ranks[mode + 1..].iter().product();
    let jn = ranks[mode];
    for (chunk_idx, chunk) in core.values.chunks_mut(inner).enumerate() {
        let s = scale[chunk_idx % jn];
        chunk.iter_mut().for_each(|g| *g *= s);
    }
}
