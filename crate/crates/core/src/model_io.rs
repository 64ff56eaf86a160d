//! Plain-text model dump.
//!
//! ```text
//! CORE dense            # or `cp`
//! 2 2 2                 # ranks
//! <values, row-major, last mode fastest>
//! FACTOR 1
//! 50 2                  # rows cols
//! <one row per line>
//! COUPLED 1             # coupled mode, one section per matrix in order
//! 40 2
//! <one row per line>
//! ```
//!
//! Values are written with 17 significant digits so a dump reloads exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::algebra::{CoreStructure, CoreTensor, Coupling, FactorMatrix, FactorModel};
use crate::error::{Error, Result};

fn write_values<W: Write>(w: &mut W, values: &[f64], per_line: usize) -> std::io::Result<()> {
    for line in values.chunks(per_line.max(1)) {
        let mut first = true;
        for v in line {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{v:.16e}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, m: &FactorMatrix) -> std::io::Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    write_values(w, m.values(), m.cols())
}

pub fn write_model<W: Write>(model: &FactorModel, mut w: W) -> std::io::Result<()> {
    let core = &model.core;
    let kind = if core.is_cp() { "cp" } else { "dense" };
    writeln!(w, "CORE {kind}")?;
    let ranks: Vec<String> = core.ranks().iter().map(|r| r.to_string()).collect();
    writeln!(w, "{}", ranks.join(" "))?;
    let per_line = if core.is_cp() {
        core.values().len()
    } else {
        *core.ranks().last().unwrap_or(&1)
    };
    write_values(&mut w, core.values(), per_line)?;
    for (n, f) in model.factors.iter().enumerate() {
        writeln!(w, "FACTOR {}", n + 1)?;
        write_matrix(&mut w, f)?;
    }
    for c in &model.couplings {
        writeln!(w, "COUPLED {}", c.mode + 1)?;
        write_matrix(&mut w, &c.v)?;
    }
    w.flush()
}

pub fn save_model(model: &FactorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Tokens {
            lines: text.lines().enumerate().peekable(),
            line: 0,
        }
    }

    /// Next non-blank, non-comment line split into fields.
    fn next_line(&mut self) -> Option<Vec<&'a str>> {
        for (i, l) in self.lines.by_ref() {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            self.line = i + 1;
            return Some(l.split_whitespace().collect());
        }
        None
    }

    fn expect_line(&mut self, what: &str) -> Result<Vec<&'a str>> {
        self.next_line()
            .ok_or_else(|| Error::parse(self.line + 1, format!("unexpected end of file, expected {what}")))
    }

    fn numbers<T: std::str::FromStr>(&self, fields: &[&str], what: &str) -> Result<Vec<T>> {
        fields
            .iter()
            .map(|f| {
                f.parse::<T>()
                    .map_err(|_| Error::parse(self.line, format!("invalid {what} {f:?}")))
            })
            .collect()
    }

    fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let fields = self.expect_line("values")?;
            let vals: Vec<f64> = self.numbers(&fields, "value")?;
            if out.len() + vals.len() > count {
                return Err(Error::parse(self.line, format!("expected {count} values, got more")));
            }
            out.extend(vals);
        }
        Ok(out)
    }

    fn matrix(&mut self) -> Result<FactorMatrix> {
        let fields = self.expect_line("matrix shape")?;
        let shape: Vec<usize> = self.numbers(&fields, "dimension")?;
        if shape.len() != 2 {
            return Err(Error::parse(self.line, "matrix shape must be `rows cols`"));
        }
        let values = self.values(shape[0] * shape[1])?;
        FactorMatrix::new(shape[0], shape[1], values)
    }
}

pub fn parse_model(text: &str) -> Result<FactorModel> {
    let mut t = Tokens::new(text);
    let head = t.expect_line("CORE header")?;
    let structure = match head.as_slice() {
        ["CORE", "dense"] | ["CORE"] => CoreStructure::DenseTucker,
        ["CORE", "cp"] => CoreStructure::HyperDiagonalCp,
        _ => return Err(Error::parse(t.line, "expected `CORE dense` or `CORE cp`")),
    };
    let fields = t.expect_line("core ranks")?;
    let ranks: Vec<usize> = t.numbers(&fields, "rank")?;
    let core = match structure {
        CoreStructure::DenseTucker => {
            let n = ranks.iter().product();
            CoreTensor::dense(ranks.clone(), t.values(n)?)?
        }
        CoreStructure::HyperDiagonalCp => {
            if ranks.is_empty() || ranks.iter().any(|&r| r != ranks[0]) {
                return Err(Error::parse(t.line, "CP core needs equal ranks"));
            }
            CoreTensor::hyper_diagonal(ranks.len(), t.values(ranks[0])?)?
        }
    };
    let mut factors = Vec::new();
    let mut couplings = Vec::new();
    while let Some(fields) = t.next_line() {
        match fields.as_slice() {
            ["FACTOR", n] => {
                let n: usize = t.numbers(&[n], "factor number")?[0];
                if n != factors.len() + 1 || !couplings.is_empty() {
                    return Err(Error::parse(t.line, format!("unexpected FACTOR {n}")));
                }
                factors.push(t.matrix()?);
            }
            ["COUPLED", c] => {
                let mode: usize = t.numbers(&[c], "coupled mode")?[0];
                if mode == 0 {
                    return Err(Error::parse(t.line, "coupled mode must be ≥ 1"));
                }
                couplings.push(Coupling {
                    mode: mode - 1,
                    v: t.matrix()?,
                });
            }
            _ => return Err(Error::parse(t.line, "expected FACTOR or COUPLED section")),
        }
    }
    FactorModel::new(core, factors, couplings)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FactorModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
