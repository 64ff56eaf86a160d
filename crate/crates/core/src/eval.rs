//! Reconstruction error and objective evaluation.

use serde::{Deserialize, Serialize};

use crate::algebra::{dot, FactorModel};
use crate::data::{CoupledMatrix, DataBundle, SparseTensor};
use crate::error::{Error, Result};
use crate::par::chunked_sum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_rmse: f64,
    pub n_entries: usize,
    /// One RMSE per supplied coupled matrix, in coupling order.
    pub matrix_rmse: Vec<f64>,
}

fn check_shapes(model: &FactorModel, tensor: &SparseTensor) -> Result<()> {
    if tensor.order() != model.order() {
        return Err(Error::Shape(format!(
            "order-{} tensor against an order-{} model",
            tensor.order(),
            model.order()
        )));
    }
    for (n, (&d, f)) in tensor.dims().iter().zip(&model.factors).enumerate() {
        if d > f.rows() {
            return Err(Error::Shape(format!(
                "mode {} has dimension {d} but the model factor has {} rows",
                n + 1,
                f.rows()
            )));
        }
    }
    Ok(())
}

/// `sqrt(1/|Ω| Σ (x_α - x̃_α)²)` over the tensor's observed entries.
pub fn test_rmse(model: &FactorModel, tensor: &SparseTensor) -> Result<f64> {
    if tensor.is_empty() {
        return Err(Error::Empty("test set has no entries"));
    }
    check_shapes(model, tensor)?;
    let sse = chunked_sum(tensor.nnz(), |e| {
        let r = tensor.value(e) - model.predict(tensor.index(e));
        r * r
    });
    Ok((sse / tensor.nnz() as f64).sqrt())
}

/// RMSE of coupled matrix `k` of the model over `matrix`'s entries.
pub fn matrix_rmse(model: &FactorModel, k: usize, matrix: &CoupledMatrix) -> Result<f64> {
    let coupling = model
        .couplings
        .get(k)
        .ok_or_else(|| Error::Shape(format!("model has no coupled matrix {}", k + 1)))?;
    if matrix.nnz() == 0 {
        return Err(Error::Empty("coupled matrix has no entries"));
    }
    if matrix.nrows() > model.factors[coupling.mode].rows() || matrix.ncols() > coupling.v.rows() {
        return Err(Error::Shape(format!(
            "{} x {} matrix against coupling {} of shape {} x {}",
            matrix.nrows(),
            matrix.ncols(),
            k + 1,
            model.factors[coupling.mode].rows(),
            coupling.v.rows()
        )));
    }
    let sse = chunked_sum(matrix.nnz(), |e| {
        let (r, c, y) = matrix.entry(e);
        let d = y - model.predict_matrix(k, r, c);
        d * d
    });
    Ok((sse / matrix.nnz() as f64).sqrt())
}

pub fn evaluate(model: &FactorModel, tensor: &SparseTensor, matrices: &[CoupledMatrix]) -> Result<EvalReport> {
    let test_rmse = test_rmse(model, tensor)?;
    let matrix_rmse = matrices
        .iter()
        .enumerate()
        .map(|(k, m)| matrix_rmse(model, k, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        test_rmse,
        n_entries: tensor.nnz(),
        matrix_rmse,
    })
}

/// `f = ½ f_t + Σ_k (λ_k / 2) f_m,k` with the regularizers distributed over
/// the observed entries exactly as the stochastic gradients see them.
///
/// Couplings are matched to `bundle.matrices()` by position.
pub fn objective_value(model: &FactorModel, bundle: &DataBundle, lambda_reg: f64) -> f64 {
    let tensor = bundle.tensor();
    let counts = bundle.counts();
    let nnz = tensor.nnz();
    let core_term = if nnz == 0 {
        0.0
    } else {
        lambda_reg / nnz as f64 * model.core.norm_sq()
    };
    let f_t = chunked_sum(nnz, |e| {
        let idx = tensor.index(e);
        let r = tensor.value(e) - model.predict(idx);
        let rows: f64 = idx
            .iter()
            .enumerate()
            .map(|(n, &i)| {
                let u = model.factors[n].row(i as usize);
                dot(u, u) / counts.tensor[n][i as usize] as f64
            })
            .sum();
        r * r + core_term + lambda_reg * rows
    });
    let mut f = 0.5 * f_t;
    for (k, m) in bundle.matrices().iter().enumerate() {
        let v = &model.couplings[k].v;
        let col_counts = &counts.matrix_cols[k];
        let f_m = chunked_sum(m.nnz(), |e| {
            let (r, c, y) = m.entry(e);
            let d = y - model.predict_matrix(k, r, c);
            let vr = v.row(c);
            d * d + lambda_reg / col_counts[c] as f64 * dot(vr, vr)
        });
        f += 0.5 * m.weight() * f_m;
    }
    f
}
