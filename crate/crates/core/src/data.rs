//! Datasets: two-spirals generation, MNIST IDX files, the 0-vs-1 filter,
//! seeded train/validation splits and multi-label CSV files.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LossKind;
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Binary,
    Categorical,
    Multilabel,
}

impl TaskKind {
    pub fn loss(self) -> LossKind {
        match self {
            TaskKind::Binary => LossKind::BinaryCrossEntropy,
            TaskKind::Categorical => LossKind::CategoricalCrossEntropy,
            TaskKind::Multilabel => LossKind::MultilabelBinaryCrossEntropy,
        }
    }
}

/// Inputs (`N x D`) and 0/1 targets (`N x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Matrix,
    task: TaskKind,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix, task: TaskKind) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Data(format!(
                "{} input rows but {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Data("inputs contain non-finite values".into()));
        }
        if targets.as_slice().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Data("targets must be 0 or 1".into()));
        }
        match task {
            TaskKind::Binary if targets.cols() != 1 => {
                return Err(Error::Data("binary targets must have one column".into()))
            }
            TaskKind::Categorical => {
                if let Some(i) = targets.iter_rows().position(|r| r.iter().sum::<f64>() != 1.0) {
                    return Err(Error::Data(format!("categorical target row {i} is not one-hot")));
                }
            }
            _ => {}
        }
        Ok(Dataset { inputs, targets, task })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
            task: self.task,
        }
    }

    /// A seeded random subset of `n` instances (all of them if `n >= len`).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx = Rng::new(seed).permutation(self.len());
        idx.truncate(n.min(self.len()));
        self.select(&idx)
    }

    /// Class index per row (argmax of the one-hot target); binary rows give
    /// their 0/1 value.
    pub fn class_labels(&self) -> Vec<usize> {
        self.targets
            .iter_rows()
            .map(|r| {
                if r.len() == 1 {
                    r[0] as usize
                } else {
                    r.iter().position(|&v| v == 1.0).unwrap_or(0)
                }
            })
            .collect()
    }
}

/// Column-wise standardization to zero mean and unit variance; constant
/// columns are only centered.
pub fn standardize(m: &Matrix) -> Matrix {
    let n = m.rows().max(1) as f64;
    let means = m.column_sums();
    let mut out = m.clone();
    for j in 0..m.cols() {
        let mean = means[j] / n;
        let var = (0..m.rows()).map(|i| (m[(i, j)] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for i in 0..m.rows() {
            out[(i, j)] = if sd > 0.0 {
                (m[(i, j)] - mean) / sd
            } else {
                m[(i, j)] - mean
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpiralVariant {
    Easy,
    Medium,
    Difficult,
}

impl SpiralVariant {
    pub const ALL: [SpiralVariant; 3] = [SpiralVariant::Easy, SpiralVariant::Medium, SpiralVariant::Difficult];

    /// Angle swept by each arm.
    pub fn angle_span(self) -> f64 {
        match self {
            SpiralVariant::Easy => 0.75 * PI,
            SpiralVariant::Medium => 2.0 * PI,
            SpiralVariant::Difficult => 3.5 * PI,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpiralVariant::Easy => "easy",
            SpiralVariant::Medium => "medium",
            SpiralVariant::Difficult => "difficult",
        }
    }
}

impl FromStr for SpiralVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(SpiralVariant::Easy),
            "medium" => Ok(SpiralVariant::Medium),
            "difficult" | "hard" => Ok(SpiralVariant::Difficult),
            other => Err(Error::Config(format!(
                "unknown spiral variant '{other}' (expected easy|medium|difficult)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralSpec {
    pub variant: SpiralVariant,
    pub points_per_class: usize,
    pub start_angle: f64,
    pub angle_span: f64,
    pub min_radius: f64,
    pub radius_slope: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SpiralSpec {
    pub fn new(variant: SpiralVariant, seed: u64) -> Self {
        SpiralSpec {
            variant,
            points_per_class: 200,
            start_angle: PI / 6.0,
            angle_span: variant.angle_span(),
            min_radius: 0.2,
            radius_slope: 1.0 / (2.0 * PI),
            noise_sd: 0.0,
            seed,
        }
    }

    /// Noise-free point of `class` at arm angle `theta`; class 1 is class 0
    /// rotated by π.
    pub fn point(&self, theta: f64, class: usize) -> (f64, f64) {
        let r = self.min_radius + self.radius_slope * theta;
        let angle = if class == 0 { theta } else { theta + PI };
        (r * angle.cos(), r * angle.sin())
    }
}

/// Two interleaved spiral arms, class 0 rows first. Inputs are
/// standardized per coordinate.
pub fn generate_two_spirals(spec: &SpiralSpec) -> Result<Dataset> {
    if spec.points_per_class < 2 {
        return Err(Error::Config("two spirals need at least 2 points per class".into()));
    }
    if spec.angle_span.is_nan() || spec.angle_span <= 0.0 || spec.noise_sd < 0.0 {
        return Err(Error::Config("angle span must be > 0 and noise >= 0".into()));
    }
    let n = spec.points_per_class;
    let mut rng = Rng::new(spec.seed);
    let thetas: Vec<f64> = (0..n)
        .map(|_| spec.start_angle + spec.angle_span * rng.next_f64())
        .collect();
    let mut raw = Matrix::zeros(2 * n, 2);
    let mut targets = Matrix::zeros(2 * n, 1);
    for class in 0..2 {
        for (i, &theta) in thetas.iter().enumerate() {
            let (x, y) = spec.point(theta, class);
            let row = class * n + i;
            let (nx, ny) = if spec.noise_sd > 0.0 {
                (spec.noise_sd * rng.gaussian(), spec.noise_sd * rng.gaussian())
            } else {
                (0.0, 0.0)
            };
            raw[(row, 0)] = x + nx;
            raw[(row, 1)] = y + ny;
            targets[(row, 0)] = class as f64;
        }
    }
    Dataset::new(standardize(&raw), targets, TaskKind::Binary)
}

/// Writes `x0,...,label` rows for a binary dataset.
pub fn write_binary_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..d.input_dim()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for i in 0..d.len() {
        for v in d.inputs().row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", d.targets()[(i, 0)] as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the format written by [`write_binary_csv`].
pub fn load_binary_csv(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 2 || header.last().map(String::as_str) != Some("label") {
        return Err(Error::parse(path, "line 1", "expected header x0,...,label"));
    }
    let d = header.len() - 1;
    let mut inputs = Vec::with_capacity(rows.len() * d);
    let mut targets = Vec::with_capacity(rows.len());
    for (line, vals) in &rows {
        if vals.len() != header.len() {
            return Err(Error::parse(path, format!("line {line}"), "ragged row"));
        }
        inputs.extend_from_slice(&vals[..d]);
        let label = vals[d];
        if label != 0.0 && label != 1.0 {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("label {label} is not 0 or 1"),
            ));
        }
        targets.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let n = rows.len();
    Dataset::new(
        Matrix::from_vec(n, d, inputs)?,
        Matrix::from_vec(n, 1, targets)?,
        TaskKind::Binary,
    )
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, format!("offset {offset}"), "truncated header"))
}

/// Raw IDX image file: count, rows, cols and the pixel bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            path,
            "offset 0",
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} (unsigned byte, 3 dims)"),
        ));
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::parse(
            path,
            format!("offset {}", bytes.len()),
            format!("truncated pixel data: {} bytes, header promises {need}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            path,
            "offset 0",
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} (unsigned byte, 1 dim)"),
        ));
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::parse(
            path,
            format!("offset {}", bytes.len()),
            format!("truncated label data: header promises {n} labels"),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an MNIST image/label pair: pixels scaled by 1/255, labels one-hot
/// over 10 classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    if (rows, cols) != (28, 28) {
        return Err(Error::parse(
            images_path,
            "offset 8",
            format!("images are {rows}x{cols}, expected 28x28"),
        ));
    }
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::parse(
            labels_path,
            "offset 4",
            format!("{} labels for {n} images in {}", labels.len(), images_path.display()),
        ));
    }
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::parse(
            labels_path,
            format!("offset {}", 8 + i),
            format!("label {} > 9", labels[i]),
        ));
    }
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut targets = Matrix::zeros(n, 10);
    for (i, &l) in labels.iter().enumerate() {
        targets[(i, l as usize)] = 1.0;
    }
    Dataset::new(
        Matrix::from_vec(n, rows * cols, inputs)?,
        targets,
        TaskKind::Categorical,
    )
}

/// Keeps only `class_a` (target 0) and `class_b` (target 1).
pub fn filter_binary_mnist(d: &Dataset, class_a: usize, class_b: usize) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::Config("the two classes must differ".into()));
    }
    if d.task() != TaskKind::Categorical || class_a.max(class_b) >= d.output_dim() {
        return Err(Error::Config(
            "binary filter needs a categorical dataset containing both classes".into(),
        ));
    }
    let labels = d.class_labels();
    let keep: Vec<usize> = (0..d.len())
        .filter(|&i| labels[i] == class_a || labels[i] == class_b)
        .collect();
    for c in [class_a, class_b] {
        if !keep.iter().any(|&i| labels[i] == c) {
            return Err(Error::Data(format!("class {c} has no instances")));
        }
    }
    let targets: Vec<f64> = keep.iter().map(|&i| (labels[i] == class_b) as u8 as f64).collect();
    Dataset::new(
        d.inputs().select_rows(&keep),
        Matrix::from_vec(keep.len(), 1, targets)?,
        TaskKind::Binary,
    )
}

/// Seeded shuffle, then the first `train_fraction` of the instances go to
/// training and the rest to validation. 5:1 is `5.0 / 6.0`.
pub fn split_train_validation(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (d.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == d.len() {
        return Err(Error::Config(format!(
            "split of {} instances at {train_fraction} leaves an empty side",
            d.len()
        )));
    }
    let idx = Rng::new(seed).permutation(d.len());
    Ok((d.select(&idx[..n_train]), d.select(&idx[n_train..])))
}

/// Header fields and `(line number, values)` rows.
type CsvTable = (Vec<String>, Vec<(u64, Vec<f64>)>);

fn read_csv(path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::parse(path, "line 1", e.to_string()),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, "line 1", e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, format!("line {line}"), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::parse(
                        path,
                        format!("line {line}, column {}", j + 1),
                        format!("'{s}' is not a number"),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, vals));
    }
    Ok((header, rows))
}

/// Reads `f0,...,fD-1,l0,...,lC-1` rows into a multilabel dataset.
pub fn load_multilabel_csv(path: &Path, standardize_features: bool) -> Result<Dataset> {
    let (header, rows) = read_csv(path)?;
    let d = header.iter().take_while(|h| h.starts_with('f')).count();
    let c = header.len() - d;
    let well_formed = d > 0
        && c > 0
        && header[..d].iter().enumerate().all(|(j, h)| *h == format!("f{j}"))
        && header[d..].iter().enumerate().all(|(j, h)| *h == format!("l{j}"));
    if !well_formed {
        return Err(Error::parse(path, "line 1", "expected header f0,...,fD-1,l0,...,lC-1"));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let mut inputs = Vec::with_capacity(rows.len() * d);
    let mut targets = Vec::with_capacity(rows.len() * c);
    for (line, vals) in &rows {
        if vals.len() != d + c {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("ragged row: {} fields, header has {}", vals.len(), d + c),
            ));
        }
        inputs.extend_from_slice(&vals[..d]);
        for (j, &v) in vals[d..].iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::parse(
                    path,
                    format!("line {line}, column {}", d + j + 1),
                    format!("label value {v} is not 0 or 1"),
                ));
            }
            targets.push(v);
        }
    }
    let n = rows.len();
    let mut inputs = Matrix::from_vec(n, d, inputs)?;
    if standardize_features {
        inputs = standardize(&inputs);
    }
    Dataset::new(inputs, Matrix::from_vec(n, c, targets)?, TaskKind::Multilabel)
}

pub fn write_multilabel_csv(d: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header: Vec<String> = (0..d.input_dim()).map(|j| format!("f{j}")).collect();
    header.extend((0..d.output_dim()).map(|j| format!("l{j}")));
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.inputs().row(i).iter().map(|v| v.to_string()).collect();
        fields.extend(d.targets().row(i).iter().map(|&v| (v as u8).to_string()));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Gaussian features with labels from random hyperplanes through the
/// origin, so each label is linearly separable and roughly balanced.
pub fn generate_synthetic_multilabel(n: usize, features: usize, labels: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || features == 0 || labels == 0 {
        return Err(Error::Config(
            "synthetic multilabel data needs n, features, labels > 0".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let planes: Vec<Vec<f64>> = (0..labels)
        .map(|_| (0..features).map(|_| rng.gaussian()).collect())
        .collect();
    let mut inputs = Matrix::zeros(n, features);
    let mut targets = Matrix::zeros(n, labels);
    for i in 0..n {
        for v in inputs.row_mut(i) {
            *v = rng.gaussian();
        }
        for (k, w) in planes.iter().enumerate() {
            let s: f64 = w.iter().zip(inputs.row(i)).map(|(a, b)| a * b).sum();
            targets[(i, k)] = (s > 0.0) as u8 as f64;
        }
    }
    Dataset::new(inputs, targets, TaskKind::Multilabel)
}
