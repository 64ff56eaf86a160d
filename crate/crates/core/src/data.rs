//! Sparse tensors and coupled matrices in coordinate (COO) format.
//!
//! Files use 1-based indices; everything in memory is 0-based.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// An N-way sparse tensor holding only its observed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    dims: Vec<usize>,
    /// Row-major `nnz x order` index table, 0-based.
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseTensor {
    /// Builds a validated tensor from 0-based indices laid out entry after entry.
    pub fn new(dims: Vec<usize>, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        let order = dims.len();
        if order < 2 {
            return Err(Error::InvalidData(format!(
                "tensor order must be at least 2, got {order}"
            )));
        }
        if let Some(n) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidData(format!("dimension of mode {} is zero", n + 1)));
        }
        if indices.len() != values.len() * order {
            return Err(Error::Shape(format!(
                "{} index components for {} entries of an order-{order} tensor",
                indices.len(),
                values.len()
            )));
        }
        let tensor = SparseTensor {
            dims,
            indices,
            values,
        };
        let mut seen = HashSet::with_capacity(tensor.nnz());
        for e in 0..tensor.nnz() {
            let idx = tensor.index(e);
            for (n, (&i, &d)) in idx.iter().zip(&tensor.dims).enumerate() {
                if i as usize >= d {
                    return Err(Error::InvalidData(format!(
                        "index {} exceeds dimension {d} of mode {}",
                        i + 1,
                        n + 1
                    )));
                }
            }
            if !tensor.values[e].is_finite() {
                return Err(Error::InvalidData(format!(
                    "value at {} is not finite",
                    fmt_index(idx)
                )));
            }
            if !seen.insert(idx) {
                return Err(Error::InvalidData(format!("duplicate index {}", fmt_index(idx))));
            }
        }
        Ok(tensor)
    }

    /// Same as [`SparseTensor::new`] but skips validation; for callers that
    /// already guarantee distinct in-range indices.
    pub(crate) fn from_parts_unchecked(
        dims: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(indices.len(), values.len() * dims.len());
        SparseTensor {
            dims,
            indices,
            values,
        }
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// 0-based index tuple of entry `e`.
    #[inline]
    pub fn index(&self, e: usize) -> &[u32] {
        let n = self.dims.len();
        &self.indices[e * n..(e + 1) * n]
    }

    #[inline]
    pub fn value(&self, e: usize) -> f64 {
        self.values[e]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], f64)> + '_ {
        self.indices
            .chunks_exact(self.dims.len())
            .zip(self.values.iter().copied())
    }

    /// Keeps the entries at the given positions, in the given order.
    fn select(&self, positions: &[usize]) -> SparseTensor {
        let n = self.order();
        let mut indices = Vec::with_capacity(positions.len() * n);
        let mut values = Vec::with_capacity(positions.len());
        for &p in positions {
            indices.extend_from_slice(self.index(p));
            values.push(self.values[p]);
        }
        SparseTensor::from_parts_unchecked(self.dims.clone(), indices, values)
    }
}

/// A sparse matrix whose rows are tied to one mode of the tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledMatrix {
    /// 0-based coupled mode.
    mode: usize,
    nrows: usize,
    ncols: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    values: Vec<f64>,
    weight: f64,
}

impl CoupledMatrix {
    /// `mode` is 0-based. Entries are 0-based `(row, col, value)` triples.
    pub fn new(
        mode: usize,
        nrows: usize,
        ncols: usize,
        entries: Vec<(u32, u32, f64)>,
        weight: f64,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidData("λ_m must be positive".into()));
        }
        if nrows == 0 || ncols == 0 {
            return Err(Error::InvalidData("coupled matrix has a zero dimension".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        let mut cols = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            if r as usize >= nrows || c as usize >= ncols {
                return Err(Error::InvalidData(format!(
                    "matrix index ({}, {}) outside {nrows} x {ncols}",
                    r + 1,
                    c + 1
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidData(format!(
                    "matrix value at ({}, {}) is not finite",
                    r + 1,
                    c + 1
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::InvalidData(format!(
                    "duplicate matrix index ({}, {})",
                    r + 1,
                    c + 1
                )));
            }
            rows.push(r);
            cols.push(c);
            values.push(v);
        }
        Ok(CoupledMatrix {
            mode,
            nrows,
            ncols,
            rows,
            cols,
            values,
            weight,
        })
    }

    pub fn mode(&self) -> usize {
        self.mode
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    #[inline]
    pub fn entry(&self, e: usize) -> (usize, usize, f64) {
        (self.rows[e] as usize, self.cols[e] as usize, self.values[e])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nnz()).map(move |e| self.entry(e))
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidData("λ_m must be positive".into()));
        }
        self.weight = weight;
        Ok(self)
    }
}

/// Per-mode observation counts: how many observed entries carry index `i`
/// in mode `n`, plus per-column counts of every coupled matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeIndexCounts {
    pub tensor: Vec<Vec<u32>>,
    pub matrix_cols: Vec<Vec<u32>>,
}

impl ModeIndexCounts {
    pub fn compute(tensor: &SparseTensor, matrices: &[CoupledMatrix]) -> Self {
        let mut counts: Vec<Vec<u32>> = tensor.dims().iter().map(|&d| vec![0; d]).collect();
        for (idx, _) in tensor.iter() {
            for (n, &i) in idx.iter().enumerate() {
                counts[n][i as usize] += 1;
            }
        }
        let matrix_cols = matrices
            .iter()
            .map(|m| {
                let mut c = vec![0u32; m.ncols()];
                for (_, j, _) in m.iter() {
                    c[j] += 1;
                }
                c
            })
            .collect();
        ModeIndexCounts {
            tensor: counts,
            matrix_cols,
        }
    }
}

fn record_stride(order: usize) -> usize {
    1 + order.div_ceil(2)
}

/// Training data: a tensor, its coupled matrices, and their index counts.
#[derive(Clone, Debug)]
pub struct DataBundle {
    tensor: SparseTensor,
    matrices: Vec<CoupledMatrix>,
    counts: ModeIndexCounts,
    /// Per entry: the value's bits, then the indices packed two per word.
    /// Training visits entries in random order; one small contiguous record
    /// per entry keeps that to a single cache miss.
    records: Vec<u64>,
}

impl DataBundle {
    pub fn new(tensor: SparseTensor, matrices: Vec<CoupledMatrix>) -> Result<Self> {
        for (k, m) in matrices.iter().enumerate() {
            if m.mode() >= tensor.order() {
                return Err(Error::InvalidData(format!(
                    "coupled matrix {} is bound to mode {} but the tensor has {} modes",
                    k + 1,
                    m.mode() + 1,
                    tensor.order()
                )));
            }
            let dim = tensor.dims()[m.mode()];
            if m.nrows() > dim {
                return Err(Error::InvalidData(format!(
                    "coupled matrix {} has {} rows but mode {} has dimension {dim}",
                    k + 1,
                    m.nrows(),
                    m.mode() + 1
                )));
            }
        }
        let counts = ModeIndexCounts::compute(&tensor, &matrices);
        let stride = record_stride(tensor.order());
        let mut records = Vec::with_capacity(tensor.nnz() * stride);
        for (idx, x) in tensor.iter() {
            records.push(x.to_bits());
            for pair in idx.chunks(2) {
                records.push(pair[0] as u64 | (pair.get(1).copied().unwrap_or(0) as u64) << 32);
            }
        }
        Ok(DataBundle {
            tensor,
            matrices,
            counts,
            records,
        })
    }

    pub fn tensor(&self) -> &SparseTensor {
        &self.tensor
    }

    pub fn matrices(&self) -> &[CoupledMatrix] {
        &self.matrices
    }

    pub fn counts(&self) -> &ModeIndexCounts {
        &self.counts
    }

    /// Address of entry `e`'s record, for prefetching.
    #[inline]
    pub(crate) fn record_ptr(&self, e: usize) -> *const u64 {
        self.records[e * record_stride(self.tensor.order())..].as_ptr()
    }

    /// Value of tensor entry `e`, with its indices written to `idx`.
    #[inline]
    pub(crate) fn record(&self, e: usize, idx: &mut [u32]) -> f64 {
        let stride = record_stride(idx.len());
        let r = &self.records[e * stride..(e + 1) * stride];
        for (pair, &w) in idx.chunks_mut(2).zip(&r[1..]) {
            pair[0] = w as u32;
            if let Some(second) = pair.get_mut(1) {
                *second = (w >> 32) as u32;
            }
        }
        f64::from_bits(r[0])
    }
}

/// Splits observed entries uniformly at random into `(train, test)`.
///
/// The test half receives `round(test_fraction * nnz)` entries. Both halves
/// keep the input's dims and entry order.
pub fn split_train_test(
    tensor: &SparseTensor,
    test_fraction: f64,
    seed: u64,
) -> Result<(SparseTensor, SparseTensor)> {
    if tensor.is_empty() {
        return Err(Error::Empty("cannot split a tensor without entries"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let nnz = tensor.nnz();
    let n_test = (test_fraction * nnz as f64).round() as usize;
    let mut perm: Vec<usize> = (0..nnz).collect();
    perm.shuffle(&mut rng::stream(seed, Stream::Split));
    let (test_pos, train_pos) = perm.split_at_mut(n_test);
    test_pos.sort_unstable();
    train_pos.sort_unstable();
    Ok((tensor.select(train_pos), tensor.select(test_pos)))
}

fn fmt_index(idx: &[u32]) -> String {
    let parts: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
    format!("({})", parts.join(", "))
}

// ---------------------------------------------------------------------------
// Text format

struct DataLine<'a> {
    line: usize,
    fields: Vec<&'a str>,
}

fn data_lines(text: &str) -> Vec<DataLine<'_>> {
    text.lines()
        .enumerate()
        .filter_map(|(k, raw)| {
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                None
            } else {
                Some(DataLine {
                    line: k + 1,
                    fields: t.split_whitespace().collect(),
                })
            }
        })
        .collect()
}

fn parse_index(tok: &str, line: usize) -> Result<u32> {
    let v: i64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid index '{tok}'")))?;
    if v < 1 {
        return Err(Error::parse(line, "index must be ≥ 1"));
    }
    u32::try_from(v - 1).map_err(|_| Error::parse(line, format!("index {v} is too large")))
}

fn parse_dim(tok: &str, line: usize) -> Result<usize> {
    let v: usize = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid dimension '{tok}'")))?;
    if v == 0 {
        return Err(Error::parse(line, "dimension must be ≥ 1"));
    }
    Ok(v)
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid value '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, "value is not finite"));
    }
    Ok(v)
}

fn is_integer_line(fields: &[&str]) -> bool {
    fields.iter().all(|f| f.parse::<u64>().is_ok())
}

/// Parses a tensor from text. A first line with one field fewer than the
/// entry lines is read as the dims header.
pub fn parse_tensor(text: &str) -> Result<SparseTensor> {
    let lines = data_lines(text);
    let Some(first) = lines.first() else {
        return Err(Error::Empty("tensor file has no entries"));
    };
    let has_header = lines.len() >= 2
        && lines[1].fields.len() == first.fields.len() + 1
        && is_integer_line(&first.fields);
    let (header, body) = if has_header {
        (Some(first), &lines[1..])
    } else {
        (None, &lines[..])
    };
    let order = body[0].fields.len() - 1;
    if order < 2 {
        return Err(Error::parse(
            body[0].line,
            "expected at least two indices and a value",
        ));
    }
    let header_dims = header
        .map(|h| {
            h.fields
                .iter()
                .map(|t| parse_dim(t, h.line))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;

    let mut indices = Vec::with_capacity(body.len() * order);
    let mut values = Vec::with_capacity(body.len());
    let mut max_idx = vec![0usize; order];
    let mut seen = HashSet::with_capacity(body.len());
    for dl in body {
        if dl.fields.len() != order + 1 {
            return Err(Error::parse(
                dl.line,
                format!("expected {} fields, found {}", order + 1, dl.fields.len()),
            ));
        }
        let start = indices.len();
        for (n, tok) in dl.fields[..order].iter().enumerate() {
            let i = parse_index(tok, dl.line)?;
            if let Some(d) = &header_dims {
                if i as usize >= d[n] {
                    return Err(Error::parse(
                        dl.line,
                        format!("index {} exceeds dimension {} of mode {}", i + 1, d[n], n + 1),
                    ));
                }
            }
            max_idx[n] = max_idx[n].max(i as usize + 1);
            indices.push(i);
        }
        if !seen.insert(indices[start..].to_vec()) {
            return Err(Error::parse(
                dl.line,
                format!("duplicate index {}", fmt_index(&indices[start..])),
            ));
        }
        values.push(parse_value(dl.fields[order], dl.line)?);
    }
    let dims = header_dims.unwrap_or(max_idx);
    Ok(SparseTensor::from_parts_unchecked(dims, indices, values))
}

/// Parses a coupled matrix; an optional first line `I K` gives its shape.
pub fn parse_matrix(text: &str, coupled_mode: usize, weight: f64) -> Result<CoupledMatrix> {
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::InvalidData("λ_m must be positive".into()));
    }
    if coupled_mode == 0 {
        return Err(Error::InvalidConfig("coupled mode is 1-based".into()));
    }
    let lines = data_lines(text);
    let (shape, body) = match lines.first() {
        Some(h) if h.fields.len() == 2 => (
            Some((parse_dim(h.fields[0], h.line)?, parse_dim(h.fields[1], h.line)?)),
            &lines[1..],
        ),
        _ => (None, &lines[..]),
    };
    let mut entries = Vec::with_capacity(body.len());
    let mut seen = HashSet::with_capacity(body.len());
    let (mut max_r, mut max_c) = (0usize, 0usize);
    for dl in body {
        if dl.fields.len() != 3 {
            return Err(Error::parse(
                dl.line,
                format!("expected 3 fields, found {}", dl.fields.len()),
            ));
        }
        let r = parse_index(dl.fields[0], dl.line)?;
        let c = parse_index(dl.fields[1], dl.line)?;
        if let Some((nr, nc)) = shape {
            if r as usize >= nr || c as usize >= nc {
                return Err(Error::parse(
                    dl.line,
                    format!("index ({}, {}) outside {nr} x {nc}", r + 1, c + 1),
                ));
            }
        }
        if !seen.insert((r, c)) {
            return Err(Error::parse(
                dl.line,
                format!("duplicate index ({}, {})", r + 1, c + 1),
            ));
        }
        let v = parse_value(dl.fields[2], dl.line)?;
        max_r = max_r.max(r as usize + 1);
        max_c = max_c.max(c as usize + 1);
        entries.push((r, c, v));
    }
    let (nrows, ncols) = match shape {
        Some(s) => s,
        None if entries.is_empty() => return Err(Error::Empty("matrix file has no entries")),
        None => (max_r, max_c),
    };
    CoupledMatrix::new(coupled_mode - 1, nrows, ncols, entries, weight)
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<SparseTensor> {
    let path = path.as_ref();
    with_path(path, parse_tensor(&read_text(path)?))
}

/// `coupled_mode` is 1-based, as on the command line.
pub fn load_matrix(path: impl AsRef<Path>, coupled_mode: usize, weight: f64) -> Result<CoupledMatrix> {
    let path = path.as_ref();
    with_path(path, parse_matrix(&read_text(path)?, coupled_mode, weight))
}

pub fn write_tensor<W: Write>(mut w: W, t: &SparseTensor) -> std::io::Result<()> {
    let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{}", dims.join(" "))?;
    for (idx, v) in t.iter() {
        for i in idx {
            write!(w, "{} ", i + 1)?;
        }
        writeln!(w, "{v}")?;
    }
    Ok(())
}

pub fn write_matrix<W: Write>(mut w: W, m: &CoupledMatrix) -> std::io::Result<()> {
    writeln!(w, "{} {}", m.nrows(), m.ncols())?;
    for (r, c, v) in m.iter() {
        writeln!(w, "{} {} {v}", r + 1, c + 1)?;
    }
    Ok(())
}

pub fn save_tensor(path: impl AsRef<Path>, t: &SparseTensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &CoupledMatrix) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_matrix(&mut w, m)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor_from(dims: &[usize], entries: &[(&[u32], f64)]) -> SparseTensor {
        let indices = entries.iter().flat_map(|(i, _)| i.iter().copied()).collect();
        let values = entries.iter().map(|(_, v)| *v).collect();
        SparseTensor::new(dims.to_vec(), indices, values).unwrap()
    }

    #[test]
    fn packed_records_match_entries() {
        for dims in [vec![5usize, 6, 7], vec![3, 4, 5, 6]] {
            let idx: Vec<u32> = (0..4u32).flat_map(|e| dims.iter().map(move |&d| (e * 7 + 3) % d as u32)).collect();
            let t = SparseTensor::new(dims.clone(), idx, vec![0.5, -1.0, 1e-300, 7.25]).unwrap();
            let b = DataBundle::new(t.clone(), vec![]).unwrap();
            let mut out = vec![0u32; dims.len()];
            for e in 0..t.nnz() {
                assert_eq!(b.record(e, &mut out), t.value(e));
                assert_eq!(out, t.index(e));
            }
        }
    }

    #[test]
    fn parses_header_and_entries() {
        let t = parse_tensor("2 2 2\n1 1 1 5.0\n2 2 2 -1.0").unwrap();
        assert_eq!(t.order(), 3);
        assert_eq!(t.dims(), &[2, 2, 2]);
        assert_eq!(t.nnz(), 2);
        assert_eq!(t.index(1), &[1, 1, 1]);
        assert_eq!(t.value(0), 5.0);
    }

    #[test]
    fn infers_dims_without_header() {
        let t = parse_tensor("# ratings\n1 3 1 5.0\r\n\n2 1 4 1.5\n").unwrap();
        assert_eq!(t.dims(), &[2, 3, 4]);
        assert_eq!(t.nnz(), 2);
    }

    #[test]
    fn zero_index_is_rejected_with_line() {
        let err = parse_tensor("2 2 2\n0 1 1 2.0").unwrap_err();
        assert_eq!(err.to_string(), "index must be ≥ 1 (line 2)");
    }

    #[test]
    fn rejects_duplicates_out_of_range_and_nonfinite() {
        assert!(matches!(
            parse_tensor("1 1 1 1.0\n1 1 1 2.0"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_tensor("2 2 2\n3 1 1 1.0"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_tensor("1 1 1 NaN"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_tensor("1 1 1 inf"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_tensor("1 1 1 1.0\n1 2 1").is_err());
    }

    #[test]
    fn parses_matrix() {
        let m = parse_matrix("4 3\n1 2 1.0\n4 3 0.5", 2, 10.0).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.ncols(), 3);
        assert_eq!(m.nrows(), 4);
        assert_eq!(m.mode(), 1);
        assert_eq!(m.weight(), 10.0);
        assert_eq!(m.entry(1), (3, 2, 0.5));
    }

    #[test]
    fn matrix_weight_must_be_positive() {
        let err = parse_matrix("1 1 1.0", 1, 0.0).unwrap_err();
        assert!(err.to_string().contains("λ_m must be positive"));
    }

    #[test]
    fn bundle_rejects_mode_out_of_range() {
        let t = parse_tensor("1 1 1 1.0").unwrap();
        let m = parse_matrix("1 1 1.0", 4, 1.0).unwrap();
        assert!(DataBundle::new(t, vec![m]).is_err());
    }

    fn random_tensor(seed: u64, dims: &[usize], n: usize) -> SparseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut indices = Vec::new();
        let mut values = Vec::new();
        while values.len() < n {
            let idx: Vec<u32> = dims.iter().map(|&d| rng.random_range(0..d as u32)).collect();
            if seen.insert(idx.clone()) {
                indices.extend(idx);
                values.push(rng.random_range(-5.0..5.0));
            }
        }
        SparseTensor::new(dims.to_vec(), indices, values).unwrap()
    }

    #[test]
    fn tensor_round_trip() {
        let t = random_tensor(3, &[30, 40, 50], 1000);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = parse_tensor(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        while entries.len() < 1000 {
            let (r, c) = (rng.random_range(0..60u32), rng.random_range(0..70u32));
            if seen.insert((r, c)) {
                entries.push((r, c, rng.random_range(-1.0..1.0)));
            }
        }
        let m = CoupledMatrix::new(1, 60, 70, entries, 10.0).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let back = parse_matrix(std::str::from_utf8(&buf).unwrap(), 2, 10.0).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn split_sizes() {
        let t = random_tensor(1, &[5, 5, 5], 10);
        let (train, test) = split_train_test(&t, 0.2, 42).unwrap();
        assert_eq!((train.nnz(), test.nnz()), (8, 2));
        assert_eq!(train.dims(), t.dims());
        assert_eq!(test.dims(), t.dims());

        let t2 = random_tensor(2, &[5, 5, 5], 2);
        let (a, b) = split_train_test(&t2, 0.5, 0).unwrap();
        assert_eq!((a.nnz(), b.nnz()), (1, 1));
    }

    #[test]
    fn split_errors() {
        let empty = SparseTensor::new(vec![2, 2], vec![], vec![]).unwrap();
        assert!(split_train_test(&empty, 0.2, 0).is_err());
        let t = random_tensor(1, &[5, 5, 5], 10);
        assert!(split_train_test(&t, 0.0, 0).is_err());
        assert!(split_train_test(&t, 1.0, 0).is_err());
    }

    #[test]
    fn split_determinism() {
        let t = random_tensor(5, &[20, 20, 20], 200);
        let a = split_train_test(&t, 0.2, 11).unwrap();
        let b = split_train_test(&t, 0.2, 11).unwrap();
        let c = split_train_test(&t, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn hand_counts() {
        let t = tensor_from(&[2, 2, 2], &[(&[0, 0, 0], 1.0), (&[0, 1, 0], 1.0)]);
        let c = ModeIndexCounts::compute(&t, &[]);
        assert_eq!(c.tensor, vec![vec![2, 0], vec![1, 1], vec![2, 0]]);
    }

    #[test]
    fn counts_match_brute_force() {
        let t = random_tensor(8, &[7, 9, 11], 500);
        let c = ModeIndexCounts::compute(&t, &[]);
        for n in 0..3 {
            for i in 0..t.dims()[n] {
                let brute = (0..t.nnz()).filter(|&e| t.index(e)[n] as usize == i).count();
                assert_eq!(c.tensor[n][i] as usize, brute);
            }
            assert_eq!(c.tensor[n].iter().map(|&x| x as usize).sum::<usize>(), t.nnz());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_partition(seed in any::<u64>(), n in 1usize..120, frac in 0.01f64..0.99) {
                let t = random_tensor(seed, &[6, 7, 8], n);
                let (train, test) = split_train_test(&t, frac, seed).unwrap();
                prop_assert_eq!(train.nnz() + test.nnz(), t.nnz());
                prop_assert_eq!(test.nnz(), (frac * n as f64).round() as usize);
                let mut all: Vec<(Vec<u32>, u64)> = train.iter().chain(test.iter())
                    .map(|(i, v)| (i.to_vec(), v.to_bits())).collect();
                let mut orig: Vec<(Vec<u32>, u64)> = t.iter().map(|(i, v)| (i.to_vec(), v.to_bits())).collect();
                all.sort();
                orig.sort();
                prop_assert_eq!(all, orig);
            }

            #[test]
            fn counts_sum_to_nnz(seed in any::<u64>(), n in 0usize..200) {
                let t = random_tensor(seed, &[9, 4, 13], n);
                let c = ModeIndexCounts::compute(&t, &[]);
                for per_mode in &c.tensor {
                    prop_assert_eq!(per_mode.iter().map(|&x| x as usize).sum::<usize>(), n);
                }
            }
        }
    }
}
