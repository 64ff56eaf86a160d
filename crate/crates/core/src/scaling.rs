//! Per-epoch timing sweeps over dimensionality, entry count, rank and
//! worker count.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DataBundle;
use crate::error::Result;
use crate::synth::{generate, SynthSpec};
use crate::trainer::{initialize_for, run_epoch, Kernel, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub warmup: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Keep timing until this much wall time has accumulated.
    pub min_seconds: f64,
    /// A cell whose first timed epoch exceeds this is recorded as timed out.
    pub timeout: f64,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions {
            warmup: 1,
            min_epochs: 3,
            max_epochs: 20,
            min_seconds: 0.5,
            timeout: 600.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    /// Median over timed epochs.
    pub seconds_per_epoch: f64,
    pub epochs: usize,
    pub timed_out: bool,
}

/// Runs epochs on a freshly initialized model and returns the median time.
pub fn time_epochs(bundle: &DataBundle, config: &TrainConfig, opts: &TimingOptions) -> Result<Timing> {
    config.validate(bundle.tensor().dims())?;
    let init = initialize_for(config, bundle)?;
    let mut state = TrainState::new(&init, config)?;
    for _ in 0..opts.warmup {
        run_epoch(&mut state, bundle, config)?;
    }
    let mut times = Vec::new();
    let mut total = 0.0;
    while times.len() < opts.max_epochs.max(1) {
        let start = Instant::now();
        run_epoch(&mut state, bundle, config)?;
        let dt = start.elapsed().as_secs_f64();
        times.push(dt);
        total += dt;
        if times.len() == 1 && dt > opts.timeout {
            return Ok(Timing {
                seconds_per_epoch: dt,
                epochs: 1,
                timed_out: true,
            });
        }
        if times.len() >= opts.min_epochs && total >= opts.min_seconds {
            break;
        }
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(Timing {
        seconds_per_epoch: median,
        epochs: times.len(),
        timed_out: false,
    })
}

/// Times epochs of several configurations in alternation, so slow drift in
/// machine load hits every configuration alike. Returns the fastest epoch
/// seen for each, after `warmup` untimed epochs apiece.
pub fn compare_epoch_times(cells: &[(&DataBundle, TrainConfig)], warmup: usize, rounds: usize) -> Result<Vec<f64>> {
    let mut states = Vec::with_capacity(cells.len());
    for (bundle, config) in cells {
        config.validate(bundle.tensor().dims())?;
        let mut state = TrainState::new(&initialize_for(config, bundle)?, config)?;
        for _ in 0..warmup {
            run_epoch(&mut state, bundle, config)?;
        }
        states.push(state);
    }
    let mut best = vec![f64::INFINITY; cells.len()];
    for _ in 0..rounds {
        for ((state, (bundle, config)), b) in states.iter_mut().zip(cells).zip(&mut best) {
            let start = Instant::now();
            run_epoch(state, bundle, config)?;
            *b = b.min(start.elapsed().as_secs_f64());
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// Same dimension on every mode, fixed entry count.
    Dims { dims: Vec<usize>, nnz: usize },
    Nnz { dim: usize, nnz: Vec<usize> },
    /// Rank used on every mode.
    Rank { dim: usize, nnz: usize, ranks: Vec<usize> },
    Workers { dim: usize, nnz: usize, workers: Vec<usize> },
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Dims { .. } => "dims",
            Sweep::Nnz { .. } => "nnz",
            Sweep::Rank { .. } => "rank",
            Sweep::Workers { .. } => "workers",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub sweep: Sweep,
    pub order: usize,
    /// Rank per mode for the trained model and the planted data.
    pub rank: usize,
    pub kernel: Kernel,
    pub workers: usize,
    pub seed: u64,
    pub timing: TimingOptions,
}

impl BenchSpec {
    pub fn new(sweep: Sweep) -> Self {
        BenchSpec {
            sweep,
            order: 3,
            rank: 2,
            kernel: Kernel::Opt,
            workers: 1,
            seed: 0,
            timing: TimingOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub param: usize,
    pub seconds_per_epoch: f64,
    /// Time of the first row divided by this row's time.
    pub speedup: f64,
    pub timed_out: bool,
}

/// Synthetic problem with one coupled matrix on mode 1.
pub fn bench_data(order: usize, dim: usize, nnz: usize, rank: usize, seed: u64) -> Result<DataBundle> {
    let spec = SynthSpec::new(vec![dim; order], nnz, vec![rank.min(dim); order], seed);
    Ok(generate(&spec)?.bundle)
}

pub fn bench_config(spec: &BenchSpec, rank: usize, workers: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(vec![rank; spec.order]);
    cfg.kernel = spec.kernel;
    cfg.workers = workers;
    cfg.seed = spec.seed;
    cfg
}

pub fn run_sweep(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    run_sweep_with(spec, |_| {})
}

/// [`run_sweep`] with a callback after every cell.
pub fn run_sweep_with(spec: &BenchSpec, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let mut cells: Vec<(usize, Timing)> = Vec::new();
    let mut record = |param: usize, t: Timing, cells: &mut Vec<(usize, Timing)>| {
        cells.push((param, t));
        let base = cells[0].1.seconds_per_epoch;
        on_row(&BenchRow {
            param,
            seconds_per_epoch: t.seconds_per_epoch,
            speedup: base / t.seconds_per_epoch,
            timed_out: t.timed_out,
        });
    };
    match &spec.sweep {
        Sweep::Dims { dims, nnz } => {
            for &d in dims {
                let data = bench_data(spec.order, d, *nnz, spec.rank, spec.seed)?;
                let cfg = bench_config(spec, spec.rank.min(d), spec.workers);
                record(d, time_epochs(&data, &cfg, &spec.timing)?, &mut cells);
            }
        }
        Sweep::Nnz { dim, nnz } => {
            for &n in nnz {
                let data = bench_data(spec.order, *dim, n, spec.rank, spec.seed)?;
                let cfg = bench_config(spec, spec.rank.min(*dim), spec.workers);
                record(n, time_epochs(&data, &cfg, &spec.timing)?, &mut cells);
            }
        }
        Sweep::Rank { dim, nnz, ranks } => {
            let data = bench_data(spec.order, *dim, *nnz, spec.rank, spec.seed)?;
            for &j in ranks {
                let cfg = bench_config(spec, j, spec.workers);
                record(j, time_epochs(&data, &cfg, &spec.timing)?, &mut cells);
            }
        }
        Sweep::Workers { dim, nnz, workers } => {
            let data = bench_data(spec.order, *dim, *nnz, spec.rank, spec.seed)?;
            for &p in workers {
                let cfg = bench_config(spec, spec.rank.min(*dim), p);
                record(p, time_epochs(&data, &cfg, &spec.timing)?, &mut cells);
            }
        }
    }
    let base = cells.first().map(|c| c.1.seconds_per_epoch).unwrap_or(1.0);
    Ok(cells
        .into_iter()
        .map(|(param, t)| BenchRow {
            param,
            seconds_per_epoch: t.seconds_per_epoch,
            speedup: base / t.seconds_per_epoch,
            timed_out: t.timed_out,
        })
        .collect())
}

/// `param,seconds_per_epoch,speedup`; timed-out cells carry `timeout` in
/// the seconds column.
pub fn write_csv<W: Write>(rows: &[BenchRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "param,seconds_per_epoch,speedup")?;
    for r in rows {
        if r.timed_out {
            writeln!(w, "{},timeout,{}", r.param, r.speedup)?;
        } else {
            writeln!(w, "{},{},{}", r.param, r.seconds_per_epoch, r.speedup)?;
        }
    }
    Ok(())
}

/// Largest ratio between measured seconds and the linear extrapolation
/// `t₀·n/n₀` from the first point, taken in whichever direction is larger.
pub fn linearity_deviation(points: &[(usize, f64)]) -> f64 {
    let Some(&(n0, t0)) = points.first() else {
        return 1.0;
    };
    points
        .iter()
        .map(|&(n, t)| {
            let predicted = t0 * n as f64 / n0 as f64;
            (t / predicted).max(predicted / t)
        })
        .fold(1.0, f64::max)
}
