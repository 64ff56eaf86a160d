//! Lock-free parallel SGD over interleaved tensor and coupled-matrix entries.
//!
//! Each epoch merges every training index (tensor entries first, then each
//! coupled matrix's entries) into one array, shuffles it with the epoch's
//! random stream, and hands contiguous chunks to `P` workers. Workers read
//! and write factor rows without locks. Only worker 0 updates the core,
//! scaling its step by `P`; the others never compute the core gradient.
//! After the last epoch the factors are orthogonalized, or in the
//! non-negative and CP variants column-normalized instead.

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    finalize_orthogonalize, normalize_factor_columns, CoreStructure, CoreTensor, Coupling, FactorMatrix,
    FactorModel,
};
use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::eval::{objective_value, test_rmse};
use crate::gradients::{
    compute_gradient, compute_gradient_opt, matrix_entry_gradients, EntryGradient, EntryReg,
    MatrixEntryGradient, OptScratch,
};
use crate::par::WorkerPool;
use crate::rng::{self, Stream};
use crate::shared::{prefetch, SharedModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Direct contraction per mode.
    Naive,
    /// Intermediate-tensor reuse.
    #[default]
    Opt,
}

/// Upper bound of the uniform distribution used for factor entries.
/// Core entries are always drawn from `U[0, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScale {
    /// `U[0, 1)`.
    #[default]
    Unit,
    /// `U[0, 1/√J_n)` for mode `n`.
    InverseSqrtRank,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ranks: Vec<usize>,
    pub eta0: f64,
    pub decay: f64,
    pub lambda_reg: f64,
    pub workers: usize,
    pub max_epochs: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub kernel: Kernel,
    pub core_structure: CoreStructure,
    pub nonnegative: bool,
    pub init_scale: InitScale,
    /// Count visits per schedule item (see [`TrainState::last_visits`]).
    #[serde(default)]
    pub track_visits: bool,
}

impl TrainConfig {
    pub const DEFAULT_ETA0: f64 = 1e-3;
    pub const DEFAULT_DECAY: f64 = 0.1;
    pub const DEFAULT_LAMBDA_REG: f64 = 0.1;
    pub const DEFAULT_LAMBDA_M: f64 = 10.0;
    pub const DEFAULT_REL_TOL: f64 = 1e-4;

    pub fn new(ranks: Vec<usize>) -> Self {
        TrainConfig {
            ranks,
            eta0: Self::DEFAULT_ETA0,
            decay: Self::DEFAULT_DECAY,
            lambda_reg: Self::DEFAULT_LAMBDA_REG,
            workers: 1,
            max_epochs: 100,
            rel_tol: Self::DEFAULT_REL_TOL,
            seed: 0,
            kernel: Kernel::Opt,
            core_structure: CoreStructure::DenseTucker,
            nonnegative: false,
            init_scale: InitScale::Unit,
            track_visits: false,
        }
    }

    /// Whether training ends with QR orthogonalization.
    pub fn orthogonalizes(&self) -> bool {
        !self.nonnegative && self.core_structure == CoreStructure::DenseTucker
    }

    /// `η_t = η₀ / (1 + μ t)` after `t` completed epochs.
    pub fn learning_rate(&self, completed_epochs: usize) -> f64 {
        self.eta0 / (1.0 + self.decay * completed_epochs as f64)
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.ranks.len() != dims.len() {
            return bad(format!(
                "{} ranks given for an order-{} tensor",
                self.ranks.len(),
                dims.len()
            ));
        }
        if self.ranks.contains(&0) {
            return bad("ranks must be positive".into());
        }
        if self.core_structure == CoreStructure::HyperDiagonalCp && self.ranks.iter().any(|&r| r != self.ranks[0]) {
            return bad(format!("CP mode needs equal ranks, got {:?}", self.ranks));
        }
        if self.orthogonalizes() {
            for (n, (&j, &i)) in self.ranks.iter().zip(dims).enumerate() {
                if j > i {
                    return bad(format!(
                        "rank {j} of mode {} exceeds its dimension {i}; orthogonalization needs rank ≤ dimension",
                        n + 1
                    ));
                }
            }
        }
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad(format!("initial learning rate must be nonnegative, got {}", self.eta0));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad(format!("decay rate must be nonnegative, got {}", self.decay));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad(format!("λ_reg must be nonnegative, got {}", self.lambda_reg));
        }
        if !(self.rel_tol >= 0.0) {
            return bad(format!("tolerance must be nonnegative, got {}", self.rel_tol));
        }
        if self.workers == 0 {
            return bad("worker count must be at least 1".into());
        }
        if let InitScale::Fixed(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("init scale must be positive, got {s}"));
            }
        }
        Ok(())
    }

    fn factor_scale(&self, rank: usize) -> f64 {
        match self.init_scale {
            InitScale::Unit => 1.0,
            InitScale::InverseSqrtRank => 1.0 / (rank as f64).sqrt(),
            InitScale::Fixed(s) => s,
        }
    }
}

/// Random model: core entries `U[0, 1)`, factor and coupled-factor entries
/// `U[0, scale)`.
///
/// `couplings` lists `(mode, rows of V)` per coupled matrix.
pub fn initialize(config: &TrainConfig, dims: &[usize], couplings: &[(usize, usize)]) -> Result<FactorModel> {
    if config.ranks.len() != dims.len() {
        return Err(Error::InvalidConfig(format!(
            "{} ranks given for an order-{} tensor",
            config.ranks.len(),
            dims.len()
        )));
    }
    sample_model(&mut rng::stream(config.seed, Stream::Init), config, dims, couplings)
}

/// [`initialize`] drawing from a caller-supplied generator.
pub fn sample_model<R: Rng>(
    rng: &mut R,
    config: &TrainConfig,
    dims: &[usize],
    couplings: &[(usize, usize)],
) -> Result<FactorModel> {
    if config.ranks.len() != dims.len() {
        return Err(Error::InvalidConfig(format!(
            "{} ranks given for an order-{} tensor",
            config.ranks.len(),
            dims.len()
        )));
    }
    let mut core = CoreTensor::zeros(config.ranks.clone(), config.core_structure)?;
    core.values_mut().iter_mut().for_each(|g| *g = rng.random::<f64>());
    let mut random_factor = |rows: usize, cols: usize| {
        let scale = config.factor_scale(cols);
        let values = (0..rows * cols).map(|_| rng.random::<f64>() * scale).collect();
        FactorMatrix::new(rows, cols, values)
    };
    let factors = dims
        .iter()
        .zip(&config.ranks)
        .map(|(&i, &j)| random_factor(i, j))
        .collect::<Result<Vec<_>>>()?;
    let couplings = couplings
        .iter()
        .map(|&(mode, rows)| {
            let cols = *config.ranks.get(mode).ok_or_else(|| {
                Error::InvalidConfig(format!("coupled mode {} out of range", mode + 1))
            })?;
            Ok(Coupling {
                mode,
                v: random_factor(rows, cols)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FactorModel::new(core, factors, couplings)
}

/// [`initialize`] with shapes taken from a data bundle.
pub fn initialize_for(config: &TrainConfig, bundle: &DataBundle) -> Result<FactorModel> {
    let couplings: Vec<(usize, usize)> = bundle.matrices().iter().map(|m| (m.mode(), m.ncols())).collect();
    initialize(config, bundle.tensor().dims(), &couplings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub train_rmse: f64,
    pub objective: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceLog {
    entries: Vec<LogEntry>,
}

impl ConvergenceLog {
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    pub fn push(&mut self, entry: LogEntry) {
        if let Some(prev) = self.entries.last() {
            assert!(entry.epoch > prev.epoch, "log epochs must increase");
        }
        self.entries.push(entry);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_rmse,objective,seconds")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.epoch, e.train_rmse, e.objective, e.seconds)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Item {
    Tensor(usize),
    Matrix(usize, usize),
}

/// Maps schedule ids onto tensor and matrix entries.
struct Schedule {
    n_tensor: usize,
    /// First id of each coupled matrix.
    starts: Vec<usize>,
    total: usize,
}

impl Schedule {
    fn new(bundle: &DataBundle) -> Self {
        let n_tensor = bundle.tensor().nnz();
        let mut starts = Vec::with_capacity(bundle.matrices().len());
        let mut next = n_tensor;
        for m in bundle.matrices() {
            starts.push(next);
            next += m.nnz();
        }
        Schedule {
            n_tensor,
            starts,
            total: next,
        }
    }

    #[inline]
    fn decode(&self, id: usize) -> Item {
        if id < self.n_tensor {
            return Item::Tensor(id);
        }
        let k = self.starts.partition_point(|&s| s <= id) - 1;
        Item::Matrix(k, id - self.starts[k])
    }
}

/// Bounds of worker `w`'s contiguous chunk out of `len` items.
fn chunk_bounds(len: usize, workers: usize, w: usize) -> (usize, usize) {
    (w * len / workers, (w + 1) * len / workers)
}

/// Mutable training state between epoch barriers.
pub struct TrainState {
    shared: SharedModel,
    pool: WorkerPool,
    epoch: usize,
    eta: f64,
    items: Vec<u32>,
    last_visits: Option<Vec<u32>>,
}

impl TrainState {
    pub fn new(model: &FactorModel, config: &TrainConfig) -> Result<Self> {
        model.validate()?;
        Ok(TrainState {
            shared: SharedModel::new(model),
            pool: WorkerPool::new(config.workers)?,
            epoch: 0,
            eta: config.learning_rate(0),
            items: Vec::new(),
            last_visits: None,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Learning rate for the next epoch.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Copy of the current parameters.
    pub fn model(&self) -> FactorModel {
        self.shared.snapshot()
    }

    /// Visits per schedule id in the last epoch, when tracking is enabled.
    /// Tensor entries come first, then each coupled matrix in order.
    pub fn last_visits(&self) -> Option<&[u32]> {
        self.last_visits.as_deref()
    }
}

struct EpochCtx<'a> {
    shared: &'a SharedModel,
    bundle: &'a DataBundle,
    schedule: &'a Schedule,
    config: &'a TrainConfig,
    eta: f64,
    workers: usize,
    visits: Option<&'a [AtomicU32]>,
    failed: AtomicBool,
    failure: Mutex<Option<String>>,
}

impl EpochCtx<'_> {
    fn fail(&self, what: impl FnOnce() -> String) {
        if !self.failed.swap(true, Ordering::Relaxed) {
            *self.failure.lock().unwrap() = Some(what());
        }
    }
}

/// Calls `f` with the rows as a slice of slices without heap allocation for
/// tensors of order up to 8.
#[inline]
fn with_refs<R>(rows: &[Vec<f64>], f: impl FnOnce(&[&[f64]]) -> R) -> R {
    const MAX: usize = 8;
    if rows.len() <= MAX {
        let mut arr: [&[f64]; MAX] = [&[]; MAX];
        for (a, r) in arr.iter_mut().zip(rows) {
            *a = r;
        }
        f(&arr[..rows.len()])
    } else {
        let v: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        f(&v)
    }
}

/// `x ← x - step·g`, clamped at zero when `nonneg`. Returns false if any
/// result is not finite.
#[inline]
fn sgd_step(dst: &mut [f64], src: &[f64], grad: &[f64], step: f64, nonneg: bool) -> bool {
    let mut finite = true;
    for ((d, &x), &g) in dst.iter_mut().zip(src).zip(grad) {
        let mut v = x - step * g;
        if nonneg && v < 0.0 {
            v = 0.0;
        }
        finite &= v.is_finite();
        *d = v;
    }
    finite
}

const PREFETCH_DISTANCE: usize = 8;

fn run_worker(ctx: &EpochCtx<'_>, worker: usize, items: &[u32]) {
    let designated = worker == 0;
    let shared = ctx.shared;
    let tensor = ctx.bundle.tensor();
    let counts = ctx.bundle.counts();
    let nnz = tensor.nnz();
    let cfg = ctx.config;
    let nonneg = cfg.nonnegative;

    let mut core = shared.core_template().clone();
    shared.core.load_into(0, core.values_mut());
    let ranks = core.ranks().to_vec();
    let max_rank = ranks.iter().copied().max().unwrap_or(0);
    let mut rows: Vec<Vec<f64>> = ranks.iter().map(|&j| vec![0.0; j]).collect();
    let mut grad = EntryGradient::for_core(&core);
    let mut scratch = OptScratch::for_core(&core);
    let mut reg = EntryReg::default();
    let mut updated = vec![0.0; max_rank];
    let mut core_next = vec![0.0; core.values().len()];
    let mut mgrads: Vec<MatrixEntryGradient> = shared
        .couplings
        .iter()
        .map(|(mode, _)| MatrixEntryGradient::with_rank(ranks[*mode]))
        .collect();
    let mut idx = vec![0u32; ranks.len()];
    let mut ubuf = vec![0.0; max_rank];
    let mut vbuf = vec![0.0; max_rank];
    let core_step = ctx.eta * ctx.workers as f64;

    let n_tensor = ctx.schedule.n_tensor;
    let mut ahead = vec![0u32; ranks.len()];
    for (pos, &id) in items.iter().enumerate() {
        if ctx.failed.load(Ordering::Relaxed) {
            return;
        }
        // Entries arrive in random order; fetch records two strides ahead
        // and the rows they point to one stride ahead.
        if let Some(&far) = items.get(pos + 2 * PREFETCH_DISTANCE) {
            if (far as usize) < n_tensor {
                prefetch(ctx.bundle.record_ptr(far as usize));
            }
        }
        if let Some(&near) = items.get(pos + PREFETCH_DISTANCE) {
            if (near as usize) < n_tensor {
                ctx.bundle.record(near as usize, &mut ahead);
                for (n, (f, &i)) in shared.factors.iter().zip(&ahead).enumerate() {
                    f.prefetch_row(i as usize);
                    prefetch(&counts.tensor[n][i as usize]);
                }
            }
        }
        let id = id as usize;
        if let Some(v) = ctx.visits {
            v[id].fetch_add(1, Ordering::Relaxed);
        }
        match ctx.schedule.decode(id) {
            Item::Tensor(e) => {
                let x = ctx.bundle.record(e, &mut idx);
                for ((&i, row), f_shared) in idx.iter().zip(rows.iter_mut()).zip(&shared.factors) {
                    f_shared.load_row(i as usize, row);
                }
                let idx = &idx[..];
                if !designated {
                    shared.core.load_into(0, core.values_mut());
                }
                reg.fill(cfg.lambda_reg, counts, idx, nnz);
                with_refs(&rows, |refs| match cfg.kernel {
                    Kernel::Naive => compute_gradient(x, &core, refs, &reg, designated, &mut grad),
                    Kernel::Opt => {
                        compute_gradient_opt(x, &core, refs, &reg, designated, &mut scratch, &mut grad)
                    }
                });
                for (n, row) in rows.iter().enumerate() {
                    let out = &mut updated[..row.len()];
                    if !sgd_step(out, row, &grad.rows[n], ctx.eta, nonneg) {
                        ctx.fail(|| format!("factor {} row {}", n + 1, idx[n] + 1));
                    }
                    shared.factors[n].store_row(idx[n] as usize, out);
                }
                if designated {
                    if !sgd_step(&mut core_next, core.values(), &grad.core, core_step, nonneg) {
                        ctx.fail(|| "core tensor".to_string());
                    }
                    core.values_mut().copy_from_slice(&core_next);
                    shared.core.store_from(0, core.values());
                }
            }
            Item::Matrix(k, e) => {
                let m = &ctx.bundle.matrices()[k];
                let (r, c, y) = m.entry(e);
                let (mode, v_shared) = &shared.couplings[k];
                let j = ranks[*mode];
                let (u, v) = (&mut ubuf[..j], &mut vbuf[..j]);
                shared.factors[*mode].load_row(r, u);
                v_shared.load_row(c, v);
                let g = &mut mgrads[k];
                matrix_entry_gradients(y, u, v, m.weight(), cfg.lambda_reg, counts.matrix_cols[k][c], g);
                let out = &mut updated[..j];
                if !sgd_step(out, u, &g.u, ctx.eta, nonneg) {
                    ctx.fail(|| format!("factor {} row {}", mode + 1, r + 1));
                }
                shared.factors[*mode].store_row(r, out);
                if !sgd_step(out, v, &g.v, ctx.eta, nonneg) {
                    ctx.fail(|| format!("coupled factor {} row {}", k + 1, c + 1));
                }
                v_shared.store_row(c, out);
            }
        }
    }
}

fn check_bundle(state: &TrainState, bundle: &DataBundle) -> Result<()> {
    let shared = &state.shared;
    let tensor = bundle.tensor();
    if tensor.order() != shared.factors.len() {
        return Err(Error::Shape(format!(
            "order-{} tensor against an order-{} model",
            tensor.order(),
            shared.factors.len()
        )));
    }
    let model_dims: Vec<usize> = state.model_dims();
    if tensor.dims() != model_dims.as_slice() {
        return Err(Error::Shape(format!(
            "tensor dims {:?} differ from model dims {:?}",
            tensor.dims(),
            model_dims
        )));
    }
    if bundle.matrices().len() != shared.couplings.len() {
        return Err(Error::Shape(format!(
            "{} coupled matrices against {} model couplings",
            bundle.matrices().len(),
            shared.couplings.len()
        )));
    }
    for (k, (m, (mode, _))) in bundle.matrices().iter().zip(&shared.couplings).enumerate() {
        if m.mode() != *mode {
            return Err(Error::Shape(format!(
                "coupled matrix {} is bound to mode {}, model coupling to mode {}",
                k + 1,
                m.mode() + 1,
                mode + 1
            )));
        }
    }
    let v_rows = state.coupling_rows();
    for (k, m) in bundle.matrices().iter().enumerate() {
        if m.ncols() > v_rows[k] {
            return Err(Error::Shape(format!(
                "coupled matrix {} has {} columns, its factor only {} rows",
                k + 1,
                m.ncols(),
                v_rows[k]
            )));
        }
    }
    if bundle.tensor().nnz() + bundle.matrices().iter().map(|m| m.nnz()).sum::<usize>() > u32::MAX as usize {
        return Err(Error::InvalidData("more than 2^32 training entries".into()));
    }
    Ok(())
}

impl TrainState {
    fn model_dims(&self) -> Vec<usize> {
        self.shared.snapshot_dims()
    }

    fn coupling_rows(&self) -> Vec<usize> {
        self.shared.coupling_rows()
    }
}

/// One pass over every training index in a fresh random order.
pub fn run_epoch(state: &mut TrainState, bundle: &DataBundle, config: &TrainConfig) -> Result<()> {
    check_bundle(state, bundle)?;
    if state.pool.workers() != config.workers {
        state.pool = WorkerPool::new(config.workers)?;
    }
    let schedule = Schedule::new(bundle);
    state.items.clear();
    state.items.extend(0..schedule.total as u32);
    state
        .items
        .shuffle(&mut rng::stream(config.seed, Stream::Shuffle(state.epoch as u64)));

    let visits: Option<Vec<AtomicU32>> =
        config.track_visits.then(|| (0..schedule.total).map(|_| AtomicU32::new(0)).collect());
    let ctx = EpochCtx {
        shared: &state.shared,
        bundle,
        schedule: &schedule,
        config,
        eta: state.eta,
        workers: config.workers,
        visits: visits.as_deref(),
        failed: AtomicBool::new(false),
        failure: Mutex::new(None),
    };
    let items = &state.items;
    state.pool.run(|w| {
        let (lo, hi) = chunk_bounds(items.len(), config.workers, w);
        run_worker(&ctx, w, &items[lo..hi]);
    });
    if let Some(param) = ctx.failure.into_inner().unwrap() {
        return Err(Error::Divergence {
            epoch: state.epoch + 1,
            param,
        });
    }
    state.last_visits = visits.map(|v| v.into_iter().map(AtomicU32::into_inner).collect());
    state.epoch += 1;
    state.eta = config.learning_rate(state.epoch);
    Ok(())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: FactorModel,
    pub log: ConvergenceLog,
    /// Model before the final orthogonalization or normalization.
    pub raw_model: FactorModel,
}

/// Trains until the relative change of training RMSE drops below
/// `rel_tol` or `max_epochs` is reached, then finalizes the factors.
pub fn train(bundle: &DataBundle, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(bundle, config, |_| {})
}

/// [`train`] with a callback after every logged epoch.
pub fn train_with(
    bundle: &DataBundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&LogEntry),
) -> Result<TrainOutput> {
    if bundle.tensor().is_empty() {
        return Err(Error::Empty("training tensor has no entries"));
    }
    config.validate(bundle.tensor().dims())?;
    let init = initialize_for(config, bundle)?;
    let mut state = TrainState::new(&init, config)?;
    let mut log = ConvergenceLog::default();
    let start = Instant::now();
    let mut prev_rmse = test_rmse(&init, bundle.tensor())?;
    let mut model = init;
    for _ in 0..config.max_epochs {
        run_epoch(&mut state, bundle, config)?;
        model = state.model();
        let rmse = test_rmse(&model, bundle.tensor())?;
        let entry = LogEntry {
            epoch: state.epoch(),
            train_rmse: rmse,
            objective: objective_value(&model, bundle, config.lambda_reg),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        let converged = prev_rmse == 0.0 || ((prev_rmse - rmse).abs() / prev_rmse) < config.rel_tol;
        prev_rmse = rmse;
        if converged {
            break;
        }
    }
    let finished = finalize(&model, config)?;
    Ok(TrainOutput {
        model: finished,
        log,
        raw_model: model,
    })
}

/// Post-training step: QR orthogonalization for Tucker models; column
/// normalization for the non-negative and CP variants.
pub fn finalize(model: &FactorModel, config: &TrainConfig) -> Result<FactorModel> {
    if config.nonnegative {
        Ok(apply_nonnegative_projection(model))
    } else if model.core.is_cp() {
        let mut m = model.clone();
        normalize_factor_columns(&mut m);
        Ok(m)
    } else {
        finalize_orthogonalize(model)
    }
}

/// Clamps every parameter at zero, then scales each factor column to unit
/// norm with the norm absorbed into the core.
pub fn apply_nonnegative_projection(model: &FactorModel) -> FactorModel {
    let mut m = model.clone();
    project_nonnegative(m.core.values_mut());
    for f in &mut m.factors {
        project_nonnegative(f.values_mut());
    }
    for c in &mut m.couplings {
        project_nonnegative(c.v.values_mut());
    }
    normalize_factor_columns(&mut m);
    m
}

pub fn project_nonnegative(values: &mut [f64]) {
    values.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
}

/// Core displacement of one pass with all parameters frozen, as applied by
/// the designated worker (`η·P·Σ` over its block) and as the full sum over
/// every block (`η·Σ`). Tensor entries are split into `P` contiguous blocks
/// in storage order.
pub fn frozen_core_displacement(
    model: &FactorModel,
    bundle: &DataBundle,
    config: &TrainConfig,
    eta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let tensor = bundle.tensor();
    let p = config.workers.max(1);
    let mut designated = vec![0.0; model.core.values().len()];
    let mut full = designated.clone();
    let mut grad = EntryGradient::for_core(&model.core);
    let mut scratch = OptScratch::for_core(&model.core);
    let (_, block0_end) = chunk_bounds(tensor.nnz(), p, 0);
    for e in 0..tensor.nnz() {
        let idx = tensor.index(e);
        let reg = EntryReg::for_entry(config.lambda_reg, bundle.counts(), idx, tensor.nnz());
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .enumerate()
            .map(|(n, &i)| model.factors[n].row(i as usize).to_vec())
            .collect();
        with_refs(&rows, |refs| match config.kernel {
            Kernel::Naive => compute_gradient(tensor.value(e), &model.core, refs, &reg, true, &mut grad),
            Kernel::Opt => {
                compute_gradient_opt(tensor.value(e), &model.core, refs, &reg, true, &mut scratch, &mut grad)
            }
        });
        for (f, g) in full.iter_mut().zip(&grad.core) {
            *f -= eta * g;
        }
        if e < block0_end {
            for (d, g) in designated.iter_mut().zip(&grad.core) {
                *d -= eta * p as f64 * g;
            }
        }
    }
    (designated, full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CoupledMatrix, SparseTensor};
    use crate::rng;

    fn rank_one_bundle() -> (DataBundle, FactorModel) {
        // x_{ijk} = a_i b_j c_k, 32 of the 64 entries observed.
        let a = [0.9, 0.5, 0.7, 0.3];
        let b = [0.4, 0.8, 0.6, 0.2];
        let c = [0.5, 0.3, 0.9, 0.7];
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        for i in 0..4u32 {
            for j in 0..4u32 {
                for k in 0..4u32 {
                    if (i + j + k) % 2 == 0 {
                        idx.extend([i, j, k]);
                        vals.push(a[i as usize] * b[j as usize] * c[k as usize]);
                    }
                }
            }
        }
        let t = SparseTensor::new(vec![4, 4, 4], idx, vals).unwrap();
        assert_eq!(t.nnz(), 32);
        let truth = FactorModel::new(
            CoreTensor::dense(vec![1, 1, 1], vec![1.0]).unwrap(),
            vec![
                FactorMatrix::new(4, 1, a.to_vec()).unwrap(),
                FactorMatrix::new(4, 1, b.to_vec()).unwrap(),
                FactorMatrix::new(4, 1, c.to_vec()).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        (DataBundle::new(t, vec![]).unwrap(), truth)
    }

    fn coupled_bundle(seed: u64) -> DataBundle {
        let (b, _) = rank_one_bundle();
        let entries: Vec<(u32, u32, f64)> = (0..4u32)
            .flat_map(|r| (0..3u32).map(move |c| (r, c, 0.1 * (r + c + 1) as f64 + seed as f64 * 0.0)))
            .collect();
        let m = CoupledMatrix::new(1, 4, 3, entries, 10.0).unwrap();
        DataBundle::new(b.tensor().clone(), vec![m]).unwrap()
    }

    #[test]
    fn initialize_is_deterministic_and_in_range() {
        let mut cfg = TrainConfig::new(vec![2, 3, 4]);
        cfg.seed = 11;
        cfg.init_scale = InitScale::InverseSqrtRank;
        let a = initialize(&cfg, &[5, 6, 7], &[(1, 9)]).unwrap();
        let b = initialize(&cfg, &[5, 6, 7], &[(1, 9)]).unwrap();
        assert_eq!(a, b);
        assert!(a.core.values().iter().all(|&g| (0.0..1.0).contains(&g)));
        for (f, &j) in a.factors.iter().zip(&cfg.ranks) {
            let hi = 1.0 / (j as f64).sqrt();
            assert!(f.values().iter().all(|&u| (0.0..hi).contains(&u)));
        }
        let hi = 1.0 / 3f64.sqrt();
        assert!(a.couplings[0].v.values().iter().all(|&v| (0.0..hi).contains(&v)));
        assert_eq!(a.couplings[0].v.rows(), 9);

        cfg.seed = 12;
        let c = initialize(&cfg, &[5, 6, 7], &[(1, 9)]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn learning_rate_decay_law() {
        let (bundle, _) = rank_one_bundle();
        let mut cfg = TrainConfig::new(vec![1, 1, 1]);
        cfg.eta0 = 0.02;
        cfg.decay = 0.5;
        let init = initialize_for(&cfg, &bundle).unwrap();
        let mut state = TrainState::new(&init, &cfg).unwrap();
        assert_eq!(state.eta(), 0.02);
        for t in 1..=6 {
            run_epoch(&mut state, &bundle, &cfg).unwrap();
            assert_eq!(state.epoch(), t);
            assert_eq!(state.eta(), 0.02 / (1.0 + 0.5 * t as f64));
        }
    }

    #[test]
    fn zero_step_leaves_model_unchanged() {
        let bundle = coupled_bundle(0);
        let mut cfg = TrainConfig::new(vec![1, 1, 1]);
        cfg.eta0 = 0.0;
        let init = initialize_for(&cfg, &bundle).unwrap();
        let mut state = TrainState::new(&init, &cfg).unwrap();
        run_epoch(&mut state, &bundle, &cfg).unwrap();
        assert_eq!(state.model(), init);
    }

    #[test]
    fn rank_one_rmse_decreases_over_first_epochs() {
        let (bundle, _) = rank_one_bundle();
        let mut cfg = TrainConfig::new(vec![1, 1, 1]);
        cfg.lambda_reg = 0.0;
        cfg.eta0 = 0.05;
        cfg.seed = 3;
        let init = initialize_for(&cfg, &bundle).unwrap();
        let mut state = TrainState::new(&init, &cfg).unwrap();
        let mut prev = test_rmse(&init, bundle.tensor()).unwrap();
        for _ in 0..5 {
            run_epoch(&mut state, &bundle, &cfg).unwrap();
            let now = test_rmse(&state.model(), bundle.tensor()).unwrap();
            assert!(now < prev, "rmse went from {prev} to {now}");
            prev = now;
        }
    }

    #[test]
    fn every_index_is_visited_once_per_epoch() {
        let bundle = coupled_bundle(0);
        for workers in [1, 3] {
            let mut cfg = TrainConfig::new(vec![1, 1, 1]);
            cfg.track_visits = true;
            cfg.workers = workers;
            let init = initialize_for(&cfg, &bundle).unwrap();
            let mut state = TrainState::new(&init, &cfg).unwrap();
            for _ in 0..3 {
                run_epoch(&mut state, &bundle, &cfg).unwrap();
                let v = state.last_visits().unwrap();
                assert_eq!(v.len(), 32 + 12);
                assert!(v.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn single_worker_is_bit_reproducible() {
        let bundle = coupled_bundle(0);
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.eta0 = 0.01;
        cfg.max_epochs = 5;
        cfg.rel_tol = 0.0;
        let a = train(&bundle, &cfg).unwrap();
        let b = train(&bundle, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 5);
        assert_eq!(
            a.log.entries().iter().map(|e| e.train_rmse.to_bits()).collect::<Vec<_>>(),
            b.log.entries().iter().map(|e| e.train_rmse.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn uncoupled_run_matches_reference_loop() {
        // Plain sequential sparse-Tucker SGD written out longhand.
        let (bundle, _) = rank_one_bundle();
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.eta0 = 0.05;
        cfg.lambda_reg = 0.1;
        cfg.seed = 5;
        cfg.kernel = Kernel::Naive;
        let init = initialize_for(&cfg, &bundle).unwrap();
        let mut state = TrainState::new(&init, &cfg).unwrap();

        let mut model = init.clone();
        let t = bundle.tensor();
        for epoch in 0..3u64 {
            let eta = cfg.learning_rate(epoch as usize);
            let mut order: Vec<u32> = (0..t.nnz() as u32).collect();
            order.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle(epoch)));
            for &e in &order {
                let idx = t.index(e as usize);
                let rows: Vec<Vec<f64>> = (0..3).map(|n| model.factors[n].row(idx[n] as usize).to_vec()).collect();
                let reg = EntryReg::for_entry(cfg.lambda_reg, bundle.counts(), idx, t.nnz());
                let mut g = EntryGradient::for_core(&model.core);
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                compute_gradient(t.value(e as usize), &model.core, &refs, &reg, true, &mut g);
                for n in 0..3 {
                    let row = model.factors[n].row_mut(idx[n] as usize);
                    for k in 0..row.len() {
                        row[k] -= eta * g.rows[n][k];
                    }
                }
                for (c, d) in model.core.values_mut().iter_mut().zip(&g.core) {
                    *c -= eta * d;
                }
            }
            run_epoch(&mut state, &bundle, &cfg).unwrap();
        }
        assert_eq!(state.model(), model);
    }

    #[test]
    fn divergence_is_reported() {
        let (bundle, _) = rank_one_bundle();
        let mut cfg = TrainConfig::new(vec![1, 1, 1]);
        cfg.eta0 = 1e200;
        cfg.max_epochs = 3;
        let err = train(&bundle, &cfg).unwrap_err();
        match err {
            Error::Divergence { epoch, ref param } => {
                assert_eq!(epoch, 1);
                assert!(!param.is_empty());
                assert!(err.to_string().contains("smaller initial learning rate"));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn zero_epochs_returns_orthogonalized_init() {
        let bundle = coupled_bundle(0);
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.max_epochs = 0;
        let out = train(&bundle, &cfg).unwrap();
        assert!(out.log.is_empty());
        let init = initialize_for(&cfg, &bundle).unwrap();
        assert_eq!(out.raw_model, init);
        assert_eq!(out.model, finalize_orthogonalize(&init).unwrap());
    }

    #[test]
    fn convergence_stops_early() {
        let (bundle, _) = rank_one_bundle();
        let mut cfg = TrainConfig::new(vec![1, 1, 1]);
        cfg.max_epochs = 500;
        cfg.rel_tol = 1e-2;
        cfg.eta0 = 1e-3;
        let out = train(&bundle, &cfg).unwrap();
        assert!(out.log.len() < 500);
        let epochs: Vec<usize> = out.log.entries().iter().map(|e| e.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn config_validation() {
        let dims = [3, 4, 5];
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        assert!(cfg.validate(&dims).is_ok());
        cfg.ranks = vec![4, 2, 2];
        assert!(cfg.validate(&dims).is_err());
        cfg.nonnegative = true;
        assert!(cfg.validate(&dims).is_ok());
        cfg = TrainConfig::new(vec![2, 2]);
        assert!(cfg.validate(&dims).is_err());
        cfg = TrainConfig::new(vec![2, 3, 2]);
        cfg.core_structure = CoreStructure::HyperDiagonalCp;
        assert!(cfg.validate(&dims).is_err());
        cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.workers = 0;
        assert!(cfg.validate(&dims).is_err());
    }

    #[test]
    fn nonnegative_training_output() {
        let bundle = coupled_bundle(0);
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.nonnegative = true;
        cfg.eta0 = 0.05;
        cfg.max_epochs = 20;
        let out = train(&bundle, &cfg).unwrap();
        let m = &out.model;
        assert!(m.core.values().iter().all(|&g| g >= 0.0));
        for f in &m.factors {
            assert!(f.values().iter().all(|&u| u >= 0.0));
            for c in 0..f.cols() {
                let norm: f64 = (0..f.rows()).map(|i| f.get(i, c).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12 || norm == 0.0);
            }
        }
        for e in 0..bundle.tensor().nnz() {
            let idx = bundle.tensor().index(e);
            assert!((out.raw_model.predict(idx) - m.predict(idx)).abs() <= 1e-9);
        }
    }

    #[test]
    fn projection_clamps_and_is_a_fixed_point_on_normalized_input() {
        let mut v = vec![-0.5, 0.2, -1e-300, 3.0];
        project_nonnegative(&mut v);
        assert_eq!(v, vec![0.0, 0.2, 0.0, 3.0]);

        let f = |vals: Vec<f64>| FactorMatrix::new(2, 2, vals).unwrap();
        let m = FactorModel::new(
            CoreTensor::dense(vec![2, 2], vec![1.0, 2.0, 0.0, 0.5]).unwrap(),
            vec![f(vec![0.6, 1.0, 0.8, 0.0]), f(vec![1.0, 0.0, 0.0, 1.0])],
            vec![],
        )
        .unwrap();
        let p = apply_nonnegative_projection(&m);
        for (a, b) in m.core.values().iter().zip(p.core.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (fa, fb) in m.factors.iter().zip(&p.factors) {
            for (a, b) in fa.values().iter().zip(fb.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cp_training_keeps_structure() {
        let bundle = coupled_bundle(0);
        let mut cfg = TrainConfig::new(vec![2, 2, 2]);
        cfg.core_structure = CoreStructure::HyperDiagonalCp;
        cfg.eta0 = 0.02;
        cfg.max_epochs = 10;
        let out = train(&bundle, &cfg).unwrap();
        assert!(out.model.core.is_cp());
        assert_eq!(out.model.core.values().len(), 2);
        for e in 0..bundle.tensor().nnz() {
            let idx = bundle.tensor().index(e);
            assert!((out.raw_model.predict(idx) - out.model.predict(idx)).abs() <= 1e-9);
        }
    }

    #[test]
    fn designated_core_update_compensates_worker_count() {
        // Every entry shares the same rows and value, so every block
        // contributes the same core gradient.
        let dims = [8, 8, 8];
        let mut idx = Vec::new();
        for i in 0..8u32 {
            idx.extend([i, (i * 3) % 8, (i * 5) % 8]);
        }
        let t = SparseTensor::new(dims.to_vec(), idx, vec![0.7; 8]).unwrap();
        let bundle = DataBundle::new(t, vec![]).unwrap();
        for kernel in [Kernel::Naive, Kernel::Opt] {
            for p in [1, 2, 4, 8] {
                let mut cfg = TrainConfig::new(vec![2, 3, 2]);
                cfg.workers = p;
                cfg.kernel = kernel;
                let mut model = initialize_for(&cfg, &bundle).unwrap();
                for f in &mut model.factors {
                    let first = f.row(0).to_vec();
                    for i in 0..f.rows() {
                        f.row_mut(i).copy_from_slice(&first);
                    }
                }
                let (designated, full) = frozen_core_displacement(&model, &bundle, &cfg, 0.01);
                for (a, b) in designated.iter().zip(&full) {
                    assert!((a - b).abs() <= 1e-9, "P={p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn schedule_decoding() {
        let bundle = coupled_bundle(0);
        let s = Schedule::new(&bundle);
        assert_eq!(s.total, 44);
        assert_eq!(s.decode(0), Item::Tensor(0));
        assert_eq!(s.decode(31), Item::Tensor(31));
        assert_eq!(s.decode(32), Item::Matrix(0, 0));
        assert_eq!(s.decode(43), Item::Matrix(0, 11));
        assert_eq!(chunk_bounds(10, 3, 0), (0, 3));
        assert_eq!(chunk_bounds(10, 3, 2), (6, 10));
    }

    #[test]
    fn log_csv_format() {
        let mut log = ConvergenceLog::default();
        log.push(LogEntry {
            epoch: 1,
            train_rmse: 0.5,
            objective: 2.0,
            seconds: 0.25,
        });
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_rmse,objective,seconds\n1,0.5,2,0.25\n");
    }
}
