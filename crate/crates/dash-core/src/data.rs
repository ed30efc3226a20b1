//! Synthetic dataset generators, delimited-file ingestion and
//! train/validation/test splitting.
//!
//! All generators are pure functions of their parameters and seed, using
//! the pinned [`Rng`](crate::rng::Rng) stream, so the same call always
//! produces the same bytes on disk.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A labelled dataset: inputs `[n, d]`, dense integer labels in
/// `[0, class_count)`, per-dimension feature bounds, and the display
/// names behind the dense label ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Per-dimension (min, max) over the rows; `(0, 0)` when empty.
    pub bounds: Vec<(f64, f64)>,
    /// Display name for each dense label id, in first-appearance order.
    pub label_names: Vec<String>,
    /// Column names (features then label) echoed into saved files.
    pub header: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        label_names: Vec<String>,
        header: Option<Vec<String>>,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                context: "Dataset::new",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if label_names.len() != class_count {
            return Err(Error::Parameter(format!(
                "{} label names for {class_count} classes",
                label_names.len()
            )));
        }
        let bounds = compute_bounds(&inputs);
        Ok(Dataset {
            inputs,
            labels,
            class_count,
            bounds,
            label_names,
            header,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::new(vec![indices.len(), d], data)?,
            labels,
            self.class_count,
            self.label_names.clone(),
            self.header.clone(),
        )
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }
}

fn compute_bounds(inputs: &Tensor) -> Vec<(f64, f64)> {
    let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
    if n == 0 {
        return vec![(0.0, 0.0); d];
    }
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for r in 0..n {
        for (b, &x) in bounds.iter_mut().zip(inputs.row(r)) {
            b.0 = b.0.min(x);
            b.1 = b.1.max(x);
        }
    }
    bounds
}

fn default_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    h.push("label".into());
    h
}

/// Two interleaved half-circles with Gaussian noise.
///
/// With `n_half = n/2` points per class and `t_i = pi * i / (n_half - 1)`
/// (or `t = 0` when `n_half = 1`):
/// - class 0 sits on `(cos t, sin t)`;
/// - class 1 sits on `(1 - cos t, 0.5 - sin t)`;
///
/// then every coordinate gets `noise_sd * N(0,1)` noise, drawn in point
/// order (x before y, class 0 before class 1).
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Parameter(format!(
            "two-moons size must be even and >= 2, got {n}"
        )));
    }
    if noise_sd < 0.0 {
        return Err(Error::Parameter(format!(
            "noise standard deviation must be nonnegative, got {noise_sd}"
        )));
    }
    let n_half = n / 2;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        for i in 0..n_half {
            let t = if n_half == 1 {
                0.0
            } else {
                std::f64::consts::PI * i as f64 / (n_half - 1) as f64
            };
            let (mut x, mut y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            if noise_sd > 0.0 {
                x += noise_sd * rng.normal();
                y += noise_sd * rng.normal();
            }
            data.push(x);
            data.push(y);
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        2,
        vec!["0".into(), "1".into()],
        Some(default_header(2)),
    )
}

/// Interleaved Archimedean spirals, one arm per class.
///
/// With `n_c = n / classes` points per class and `s_j = j / (n_c - 1)`
/// (or `s = 0` when `n_c = 1`), point `j` of class `c` sits at radius
/// `r = 0.1 + 0.9 s` and angle `a = 2 pi turns s + 2 pi c / classes`,
/// i.e. `(r cos a, r sin a)`, plus `noise_sd * N(0,1)` per coordinate in
/// the same draw order as `gen_two_moons`.
pub fn gen_spirals(
    n: usize,
    turns: f64,
    noise_sd: f64,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Parameter(format!(
            "spirals need at least 2 classes, got {classes}"
        )));
    }
    if n == 0 || n % classes != 0 {
        return Err(Error::Parameter(format!(
            "spirals size must be a positive multiple of classes, got n={n} classes={classes}"
        )));
    }
    if noise_sd < 0.0 || turns <= 0.0 {
        return Err(Error::Parameter(format!(
            "spirals need turns > 0 and noise >= 0, got turns={turns} noise={noise_sd}"
        )));
    }
    let n_c = n / classes;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let offset = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        for j in 0..n_c {
            let s = if n_c == 1 {
                0.0
            } else {
                j as f64 / (n_c - 1) as f64
            };
            let r = 0.1 + 0.9 * s;
            let a = 2.0 * std::f64::consts::PI * turns * s + offset;
            let mut x = r * a.cos();
            let mut y = r * a.sin();
            if noise_sd > 0.0 {
                x += noise_sd * rng.normal();
                y += noise_sd * rng.normal();
            }
            data.push(x);
            data.push(y);
            labels.push(class);
        }
    }
    let label_names = (0..classes).map(|c| c.to_string()).collect();
    Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        classes,
        label_names,
        Some(default_header(2)),
    )
}

/// Split one delimited line into fields, honoring double quotes.
fn split_line(line: &str, delimiter: char) -> Vec<String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(ch) = chars.next() {
        if quoted {
            if ch == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    quoted = false;
                }
            } else {
                field.push(ch);
            }
        } else if ch == '"' && field.is_empty() {
            quoted = true;
        } else if ch == delimiter {
            fields.push(std::mem::take(&mut field));
        } else {
            field.push(ch);
        }
    }
    fields.push(field);
    fields
}

/// Quote a field only when it needs it.
fn write_field(out: &mut String, field: &str, delimiter: char) {
    if field.contains(delimiter) || field.contains('"') || field.contains('\n') {
        out.push('"');
        out.push_str(&field.replace('"', "\"\""));
        out.push('"');
    } else {
        out.push_str(field);
    }
}

/// Load a delimited text file.
///
/// - `label_column`: `None` means the last column.
/// - A header is assumed when any feature cell of the first row fails to
///   parse as a number.
/// - Labels are mapped to dense ids in first-appearance order; the
///   mapping is kept in `label_names`.
pub fn load_delimited(
    path: impl AsRef<Path>,
    label_column: Option<usize>,
    delimiter: char,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.as_ref().display())))?;
    parse_delimited(&text, label_column, delimiter)
}

/// Parse delimited text (see [`load_delimited`]).
pub fn parse_delimited(
    text: &str,
    label_column: Option<usize>,
    delimiter: char,
) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().peekable();
    let first = loop {
        match lines.peek() {
            None => return Err(Error::Data("empty file".into())),
            Some((_, l)) if l.is_empty() => {
                lines.next();
            }
            Some((_, l)) => break *l,
        }
    };
    let first_fields = split_line(first, delimiter);
    let columns = first_fields.len();
    if columns < 2 {
        return Err(Error::Data(format!(
            "need at least one feature column and one label column, found {columns}"
        )));
    }
    let label_col = label_column.unwrap_or(columns - 1);
    if label_col >= columns {
        return Err(Error::Data(format!(
            "label column {label_col} out of range for {columns} columns"
        )));
    }

    // Header detection: a non-numeric feature cell in the first row.
    let has_header = first_fields
        .iter()
        .enumerate()
        .any(|(c, f)| c != label_col && f.trim().parse::<f64>().is_err());
    let header = if has_header {
        lines.next();
        Some(first_fields.clone())
    } else {
        None
    };

    let d = columns - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields = split_line(line, delimiter);
        if fields.len() != columns {
            return Err(Error::Data(format!(
                "ragged row at line {}: {} fields, expected {columns}",
                lineno + 1,
                fields.len()
            )));
        }
        for (c, field) in fields.iter().enumerate() {
            if c == label_col {
                let id = match label_names.iter().position(|n| n == field) {
                    Some(id) => id,
                    None => {
                        label_names.push(field.clone());
                        label_names.len() - 1
                    }
                };
                labels.push(id);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "non-numeric feature cell at line {}, column {}: {field:?}",
                        lineno + 1,
                        c + 1
                    ))
                })?;
                data.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let class_count = label_names.len();
    // reorder header so features come first, label last, matching storage
    let header = header.map(|h| {
        let mut out: Vec<String> = h
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label_col)
            .map(|(_, f)| f.clone())
            .collect();
        out.push(h[label_col].clone());
        out
    });
    Dataset::new(
        Tensor::new(vec![rows, d], data)?,
        labels,
        class_count,
        label_names,
        header,
    )
}

/// Render a dataset in the same format `load_delimited` reads: optional
/// header, then one row per sample with features first and the label
/// name last. Round-trips bit-exactly for files with a trailing label
/// column and canonically formatted floats.
pub fn render_delimited(ds: &Dataset, delimiter: char) -> String {
    let mut out = String::new();
    if let Some(header) = &ds.header {
        for (i, name) in header.iter().enumerate() {
            if i > 0 {
                out.push(delimiter);
            }
            write_field(&mut out, name, delimiter);
        }
        out.push('\n');
    }
    for r in 0..ds.len() {
        for &x in ds.inputs.row(r) {
            let _ = write!(out, "{x}");
            out.push(delimiter);
        }
        write_field(&mut out, &ds.label_names[ds.labels[r]], delimiter);
        out.push('\n');
    }
    out
}

/// Save a dataset (see [`render_delimited`]).
pub fn save_delimited(ds: &Dataset, path: impl AsRef<Path>, delimiter: char) -> Result<()> {
    std::fs::write(path, render_delimited(ds, delimiter))?;
    Ok(())
}

/// Floor-then-remainder split sizes: each split gets `floor(f * n)`, the
/// leftover rows go to train first, then validation.
fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let mut sizes = [
        (fractions.0 * n as f64).floor() as usize,
        (fractions.1 * n as f64).floor() as usize,
        (fractions.2 * n as f64).floor() as usize,
    ];
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut slot = 0;
    while rest > 0 {
        sizes[slot % 3] += 1;
        rest -= 1;
        slot += 1;
    }
    sizes
}

/// Split into train/validation/test.
///
/// Fractions must be nonnegative and sum to 1 (within 1e-9). Rows are
/// shuffled once with the seed; under `stratified` the shuffle and the
/// floor-then-remainder size rule are applied per class, so every split
/// preserves class proportions to within one sample.
pub fn split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Parameter(format!(
            "split fractions must be nonnegative, got {fractions:?}"
        )));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    if stratified {
        let positive_splits = [ft, fv, fe].iter().filter(|&&f| f > 0.0).count();
        for class in 0..ds.class_count {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            if idx.len() < positive_splits {
                return Err(Error::Parameter(format!(
                    "class {class} has {} samples, fewer than the {positive_splits} requested splits",
                    idx.len()
                )));
            }
            rng.shuffle(&mut idx);
            let sizes = split_sizes(idx.len(), fractions);
            let mut off = 0;
            for (part, &size) in parts.iter_mut().zip(&sizes) {
                part.extend_from_slice(&idx[off..off + size]);
                off += size;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut idx);
        let sizes = split_sizes(ds.len(), fractions);
        let mut off = 0;
        for (part, &size) in parts.iter_mut().zip(&sizes) {
            part.extend_from_slice(&idx[off..off + size]);
            off += size;
        }
    }
    Ok((
        ds.subset(&parts[0])?,
        ds.subset(&parts[1])?,
        ds.subset(&parts[2])?,
    ))
}

/// Per-dimension standardization statistics fitted on one dataset.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Fit mean and standard deviation per dimension; zero-variance
    /// dimensions keep sd 1 so they pass through unchanged.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::State(
                "cannot fit a standardizer on an empty dataset".into(),
            ));
        }
        let (n, d) = (ds.len(), ds.dim());
        let mut means = vec![0.0; d];
        for r in 0..n {
            for (m, &x) in means.iter_mut().zip(ds.inputs.row(r)) {
                *m += x;
            }
        }
        for m in means.iter_mut() {
            *m /= n as f64;
        }
        let mut vars = vec![0.0; d];
        for r in 0..n {
            for ((v, &m), &x) in vars.iter_mut().zip(&means).zip(ds.inputs.row(r)) {
                *v += (x - m) * (x - m);
            }
        }
        let sds = vars
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { means, sds })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.dim() != self.means.len() {
            return Err(Error::Dimension {
                context: "Standardizer::apply",
                left: vec![ds.dim()],
                right: vec![self.means.len()],
            });
        }
        let d = ds.dim();
        for r in 0..ds.len() {
            for c in 0..d {
                let x = ds.inputs.at(r, c);
                ds.inputs.set(r, c, (x - self.means[c]) / self.sds[c]);
            }
        }
        ds.bounds = compute_bounds(&ds.inputs);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_noiseless_points_on_circles() {
        let ds = gen_two_moons(8, 0.0, 0).unwrap();
        assert_eq!(ds.class_histogram(), vec![4, 4]);
        for i in 0..ds.len() {
            let (x, y) = (ds.inputs.at(i, 0), ds.inputs.at(i, 1));
            if ds.labels[i] == 0 {
                // upper moon: x^2 + y^2 = 1, y >= 0
                assert!((x * x + y * y - 1.0).abs() < 1e-12);
                assert!(y >= -1e-12);
            } else {
                // lower moon: (x-1)^2 + (y-0.5)^2 = 1, y <= 0.5
                let r = (x - 1.0).powi(2) + (y - 0.5).powi(2);
                assert!((r - 1.0).abs() < 1e-12);
                assert!(y <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn two_moons_four_point_exact() {
        let ds = gen_two_moons(4, 0.0, 3).unwrap();
        // class 0 at t in {0, pi}: (1, 0), (-1, 0)
        assert!((ds.inputs.at(0, 0) - 1.0).abs() < 1e-15);
        assert!(ds.inputs.at(0, 1).abs() < 1e-15);
        assert!((ds.inputs.at(1, 0) + 1.0).abs() < 1e-15);
        assert_eq!(ds.class_histogram(), vec![2, 2]);
    }

    #[test]
    fn two_moons_deterministic() {
        let a = gen_two_moons(100, 0.15, 7).unwrap();
        let b = gen_two_moons(100, 0.15, 7).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
        let c = gen_two_moons(100, 0.15, 8).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn two_moons_rejects_odd_n() {
        assert!(gen_two_moons(5, 0.0, 0).is_err());
        assert!(gen_two_moons(0, 0.0, 0).is_err());
    }

    #[test]
    fn spirals_match_parametric_equation() {
        let classes = 2;
        let n = 8;
        let ds = gen_spirals(n, 1.5, 0.0, classes, 0).unwrap();
        let n_c = n / classes;
        let mut row = 0;
        for class in 0..classes {
            for j in 0..n_c {
                let s = j as f64 / (n_c - 1) as f64;
                let r = 0.1 + 0.9 * s;
                let a = 2.0 * std::f64::consts::PI * 1.5 * s
                    + 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
                assert!((ds.inputs.at(row, 0) - r * a.cos()).abs() < 1e-12);
                assert!((ds.inputs.at(row, 1) - r * a.sin()).abs() < 1e-12);
                assert_eq!(ds.labels[row], class);
                row += 1;
            }
        }
    }

    #[test]
    fn spirals_balanced_and_deterministic() {
        let ds = gen_spirals(99, 2.0, 0.1, 3, 5).unwrap();
        assert_eq!(ds.class_histogram(), vec![33, 33, 33]);
        let again = gen_spirals(99, 2.0, 0.1, 3, 5).unwrap();
        assert_eq!(ds.inputs.data(), again.inputs.data());
    }

    #[test]
    fn spirals_reject_bad_params() {
        assert!(gen_spirals(10, 1.0, 0.0, 1, 0).is_err());
        assert!(gen_spirals(10, 1.0, 0.0, 3, 0).is_err()); // not divisible
    }

    #[test]
    fn parse_basic_file_with_header() {
        let text = "x,y,kind\n1.5,2,cat\n-0.5,3,dog\n0,1,cat\n";
        let ds = parse_delimited(text, None, ',').unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.label_names, vec!["cat", "dog"]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.inputs.at(1, 0), -0.5);
    }

    #[test]
    fn parse_headerless_numeric_labels_first_appearance_order() {
        let text = "1,2,5\n3,4,2\n5,6,5\n";
        let ds = parse_delimited(text, None, ',').unwrap();
        assert!(ds.header.is_none());
        // first-appearance order: "5" -> 0, "2" -> 1
        assert_eq!(ds.label_names, vec!["5", "2"]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let ragged = "1,2,a\n3,4\n";
        let err = parse_delimited(ragged, None, ',').unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let bad_cell = "1,2,a\n3,zzz,b\n";
        let err = parse_delimited(bad_cell, None, ',').unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 2"), "{err}");
        assert!(parse_delimited("", None, ',').is_err());
    }

    #[test]
    fn save_load_round_trip_bytes() {
        let text = "x0,x1,label\n1.5,-2.25,a\n0.125,3,b\n-1,0.5,a\n";
        let ds = parse_delimited(text, None, ',').unwrap();
        assert_eq!(render_delimited(&ds, ','), text);
    }

    #[test]
    fn generated_dataset_round_trips_through_files() {
        let ds = gen_two_moons(20, 0.1, 3).unwrap();
        let rendered = render_delimited(&ds, ',');
        let back = parse_delimited(&rendered, None, ',').unwrap();
        assert_eq!(back.inputs.data(), ds.inputs.data());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(render_delimited(&back, ','), rendered);
    }

    #[test]
    fn label_column_override() {
        let text = "kind,x,y\ncat,1,2\ndog,3,4\n";
        let ds = parse_delimited(text, Some(0), ',').unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.label_names, vec!["cat", "dog"]);
        assert_eq!(ds.inputs.at(0, 0), 1.0);
        // header reordered: features first, label last
        assert_eq!(
            ds.header.as_deref().unwrap(),
            ["x".to_string(), "y".into(), "kind".into()]
        );
    }

    #[test]
    fn split_all_train() {
        let ds = gen_two_moons(10, 0.0, 0).unwrap();
        let (train, val, test) = split(&ds, (1.0, 0.0, 0.0), 0, false).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(val.len(), 0);
        assert_eq!(test.len(), 0);
    }

    #[test]
    fn split_sizes_forced_rounding() {
        let ds = gen_two_moons(10, 0.0, 0).unwrap();
        let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), 1, false).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    }

    #[test]
    fn split_remainder_goes_train_first() {
        // n=5, thirds: floors are 1/1/1, remainder 2 -> train then val
        let ds = gen_two_moons(6, 0.0, 0).unwrap();
        let five = ds.subset(&[0, 1, 2, 3, 4]).unwrap();
        let (train, val, test) =
            split(&five, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 2, false).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (2, 2, 1));
    }

    #[test]
    fn split_is_disjoint_cover() {
        let ds = gen_spirals(60, 1.0, 0.05, 3, 9).unwrap();
        let (train, val, test) = split(&ds, (0.6, 0.2, 0.2), 4, false).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), 60);
        // multiset equality on row byte images
        let row_bytes = |part: &Dataset, r: usize| {
            let mut bytes = Vec::new();
            for &x in part.inputs.row(r) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            bytes.push(part.labels[r] as u8);
            bytes
        };
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for part in [&train, &val, &test] {
            for r in 0..part.len() {
                rows.push(row_bytes(part, r));
            }
        }
        rows.sort();
        let mut original: Vec<Vec<u8>> = (0..ds.len()).map(|r| row_bytes(&ds, r)).collect();
        original.sort();
        assert_eq!(rows, original);
    }

    #[test]
    fn stratified_split_balances_classes() {
        let ds = gen_two_moons(100, 0.0, 0).unwrap();
        let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), 3, true).unwrap();
        for part in [&train, &val, &test] {
            let hist = part.class_histogram();
            assert!((hist[0] as i64 - hist[1] as i64).abs() <= 1, "{hist:?}");
        }
        assert_eq!(train.len(), 80);
    }

    #[test]
    fn stratified_split_rejects_tiny_class() {
        let text = "1,2,a\n3,4,b\n5,6,b\n";
        let ds = parse_delimited(text, None, ',').unwrap();
        assert!(split(&ds, (0.4, 0.3, 0.3), 0, true).is_err());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = gen_two_moons(10, 0.0, 0).unwrap();
        assert!(split(&ds, (0.5, 0.5, 0.5), 0, false).is_err());
        assert!(split(&ds, (-0.1, 0.6, 0.5), 0, false).is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let mut ds = gen_spirals(40, 1.0, 0.2, 2, 11).unwrap();
        let std = Standardizer::fit(&ds).unwrap();
        std.apply(&mut ds).unwrap();
        let refit = Standardizer::fit(&ds).unwrap();
        for (m, s) in refit.means.iter().zip(&refit.sds) {
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
