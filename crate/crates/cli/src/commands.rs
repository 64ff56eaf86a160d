use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cmtf_core::data::{load_matrix, load_tensor, save_matrix, save_tensor};
use cmtf_core::model_io::{load_model, save_model};
use cmtf_core::scaling::{run_sweep_with, write_csv, BenchSpec, Sweep, TimingOptions};
use cmtf_core::synth::{generate, SynthSpec};
use cmtf_core::{
    evaluate, split_train_test, train_with, CoreStructure, CoupledMatrix, DataBundle, TrainConfig,
};

use crate::args::{BenchArgs, CoupleSpec, EvalArgs, GenArgs, SweepKind, TrainArgs};
use crate::manifest::{absolute, RunManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainInputs {
    pub tensor: PathBuf,
    pub test: Option<PathBuf>,
    pub split: Option<f64>,
    pub couple: Vec<CoupleSpec>,
    pub out: PathBuf,
}

type TrainManifest = RunManifest<TrainConfig, TrainInputs>;

fn train_config(a: &TrainArgs, ranks: Vec<usize>) -> TrainConfig {
    let mut c = TrainConfig::new(ranks);
    c.eta0 = a.eta;
    c.decay = a.mu;
    c.lambda_reg = a.lreg;
    c.workers = a.workers;
    c.max_epochs = a.epochs;
    c.rel_tol = a.tol;
    c.seed = a.seed;
    c.kernel = a.kernel.into();
    if a.cp {
        c.core_structure = CoreStructure::HyperDiagonalCp;
    }
    c.nonnegative = a.nonneg;
    c
}

fn load_matrices(specs: &[CoupleSpec]) -> Result<Vec<CoupledMatrix>> {
    specs
        .iter()
        .map(|c| Ok(load_matrix(&c.path, c.mode, c.lambda)?))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (config, inputs) = match &a.manifest {
        Some(path) => {
            let m = TrainManifest::load(path, "train")?;
            let mut inputs = m.inputs;
            if let Some(out) = &a.out {
                inputs.out = absolute(out);
            }
            (m.config, inputs)
        }
        None => {
            let (Some(tensor), Some(rank)) = (&a.tensor, &a.rank) else {
                bail!("--tensor and --rank are required");
            };
            let inputs = TrainInputs {
                tensor: absolute(tensor),
                test: a.test.as_deref().map(absolute),
                split: a.split,
                couple: a
                    .couple
                    .iter()
                    .map(|c| CoupleSpec {
                        path: absolute(&c.path),
                        ..c.clone()
                    })
                    .collect(),
                out: absolute(a.out.as_deref().unwrap_or(Path::new("."))),
            };
            (train_config(&a, rank.clone()), inputs)
        }
    };
    let tensor = load_tensor(&inputs.tensor)?;
    let (train_tensor, test) = match (inputs.split, &inputs.test) {
        (Some(fraction), _) => {
            let (tr, te) = split_train_test(&tensor, fraction, config.seed)?;
            (tr, Some(te))
        }
        (None, Some(path)) => (tensor, Some(load_tensor(path)?)),
        (None, None) => (tensor, None),
    };
    let matrices = load_matrices(&inputs.couple)?;
    let bundle = DataBundle::new(train_tensor, matrices)?;

    let out = &inputs.out;
    create_dir(out)?;
    let quiet = a.quiet;
    let result = train_with(&bundle, &config, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train_rmse {:.6e}  objective {:.6e}  {:.2}s",
                e.epoch, e.train_rmse, e.objective, e.seconds
            );
        }
    })?;

    let model_path = out.join("model.txt");
    let log_path = out.join("log.csv");
    save_model(&result.model, &model_path)?;
    let f = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut w = BufWriter::new(f);
    result.log.write_csv(&mut w).and_then(|_| w.flush())?;
    let mut outputs = vec![model_path, log_path];
    if let (Some(_), Some(test)) = (inputs.split, &test) {
        let p = out.join("test.tns");
        save_tensor(&p, test)?;
        outputs.push(p);
    }
    let manifest_path = out.join("manifest.json");
    let seed = config.seed;
    TrainManifest::new("train", seed, config, inputs, outputs).save(&manifest_path)?;

    let last = result.log.last();
    println!("epochs={}", result.log.len());
    if let Some(last) = last {
        println!("train_rmse={}", last.train_rmse);
    }
    if let Some(test) = &test {
        if !test.is_empty() {
            println!("test_rmse={}", cmtf_core::test_rmse(&result.model, test)?);
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let tensor = load_tensor(&a.tensor)?;
    let matrices = load_matrices(&a.couple)?;
    let report = evaluate(&model, &tensor, &matrices)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("test_rmse={}", report.test_rmse);
        println!("n_entries={}", report.n_entries);
        for (k, r) in report.matrix_rmse.iter().enumerate() {
            println!("matrix_rmse_{}={r}", k + 1);
        }
    }
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<()> {
    let ranks = a.rank.clone().unwrap_or_else(|| vec![2; a.dims.len()]);
    let mut spec = SynthSpec::new(a.dims.clone(), a.nnz, ranks, a.seed);
    spec.matrix_ratio = a.ratio;
    spec.noise = a.noise;
    spec.matrix_cols = a.matrix_cols;
    spec.coupled_mode = if a.no_matrix {
        None
    } else {
        if a.couple_mode == 0 {
            bail!("--couple-mode is 1-based");
        }
        Some(a.couple_mode - 1)
    };
    let data = generate(&spec)?;
    create_dir(&a.out)?;
    let tensor_path = a.out.join("tensor.tns");
    save_tensor(&tensor_path, data.bundle.tensor())?;
    println!("{}: {} entries", tensor_path.display(), data.bundle.tensor().nnz());
    let mut outputs = vec![absolute(&tensor_path)];
    if let Some(m) = data.bundle.matrices().first() {
        let p = a.out.join("matrix.mat");
        save_matrix(&p, m)?;
        println!("{}: {} entries, coupled to mode {}", p.display(), m.nnz(), m.mode() + 1);
        outputs.push(absolute(&p));
    }
    let truth_path = a.out.join("truth.txt");
    save_model(&data.truth, &truth_path)?;
    outputs.push(absolute(&truth_path));
    RunManifest::new("gen", a.seed, spec, (), outputs).save(&a.out.join("manifest.json"))?;
    Ok(())
}

fn sweep_for(a: &BenchArgs) -> Sweep {
    let values = |default: &[usize]| a.values.clone().unwrap_or_else(|| default.to_vec());
    match a.sweep {
        SweepKind::Dims => Sweep::Dims {
            dims: values(&[1_000, 10_000, 100_000]),
            nnz: a.nnz,
        },
        SweepKind::Nnz => Sweep::Nnz {
            dim: a.dim,
            nnz: values(&[10_000, 100_000, 1_000_000]),
        },
        SweepKind::Rank => Sweep::Rank {
            dim: a.dim,
            nnz: a.nnz,
            ranks: values(&[1, 2, 4, 8]),
        },
        SweepKind::Workers => Sweep::Workers {
            dim: a.dim,
            nnz: a.nnz,
            workers: values(&[1, 2, 4, 8]),
        },
    }
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut spec = BenchSpec::new(sweep_for(&a));
    spec.order = a.order;
    spec.rank = a.rank;
    spec.kernel = a.kernel.into();
    spec.workers = a.workers;
    spec.seed = a.seed;
    spec.timing = TimingOptions {
        warmup: a.warmup,
        min_epochs: a.min_epochs,
        max_epochs: a.max_epochs,
        min_seconds: a.min_seconds,
        timeout: a.timeout,
    };
    let name = spec.sweep.name();
    let rows = run_sweep_with(&spec, |r| {
        let secs = if r.timed_out {
            "timeout".to_string()
        } else {
            format!("{:.4}s", r.seconds_per_epoch)
        };
        eprintln!("{name}={}  {secs}/epoch  speedup {:.2}", r.param, r.speedup);
    })?;
    match &a.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(f);
            write_csv(&rows, &mut w).and_then(|_| w.flush())?;
            let manifest = path.with_extension("manifest.json");
            RunManifest::new("bench", a.seed, spec, (), vec![absolute(path)]).save(&manifest)?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}
