//! Dataset ingestion: `label,f1,...,fd` CSV files and synthetic oriented
//! grating images.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset};
use crate::matrix::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no data rows")]
    Empty,
    #[error("invalid synthetic dataset spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Expected shape of CSV rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvSchema {
    pub features: usize,
    pub num_classes: usize,
    /// Raw feature values are divided by this; the result must lie in [0, 1].
    pub max_value: f64,
}

fn is_number(s: &str) -> bool {
    s.trim().parse::<f64>().is_ok()
}

/// Parses CSV text. A first row whose first field is not numeric is taken
/// as a header and skipped. Blank lines are ignored.
pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset<f32>, LoadError> {
    if !(schema.max_value > 0.0 && schema.max_value.is_finite()) {
        return Err(LoadError::Spec("max_value must be positive".into()));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut seen_row = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if !seen_row {
            seen_row = true;
            if !is_number(fields[0]) {
                continue;
            }
        }
        let err = |message: String| LoadError::Parse { line, message };
        if fields.len() != schema.features + 1 {
            return Err(err(format!(
                "expected {} fields (label + {} features), found {}",
                schema.features + 1,
                schema.features,
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("label `{}` is not a non-negative integer", fields[0])))?;
        if label >= schema.num_classes {
            return Err(err(format!(
                "label {label} out of range for {} classes",
                schema.num_classes
            )));
        }
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| err(format!("feature {} (`{f}`) is not a number", j + 1)))?;
            let scaled = v / schema.max_value;
            if !(0.0..=1.0).contains(&scaled) {
                return Err(err(format!(
                    "feature {} = {v} outside [0, {}]",
                    j + 1,
                    schema.max_value
                )));
            }
            data.push(scaled as f32);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(LoadError::Empty);
    }
    let features = Matrix::from_vec(labels.len(), schema.features, data).expect("rows checked");
    Ok(Dataset::new(features, labels, schema.num_classes)?)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset<f32>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, schema)
}

/// Parses a headerless CSV of finite numbers into a matrix. Every row must
/// have the same width.
pub fn parse_matrix_csv(text: &str) -> Result<Matrix<f32>, LoadError> {
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let err = |message: String| LoadError::Parse { line: i + 1, message };
        let start = data.len();
        for f in row.split(',').map(str::trim) {
            let v: f32 = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("`{f}` is not finite")));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => return Err(err(format!("expected {c} values, found {width}"))),
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or(LoadError::Empty)?;
    Ok(Matrix::from_vec(rows, cols, data).expect("rows checked"))
}

/// Writes a matrix as headerless CSV using the shortest exact float form.
pub fn matrix_to_csv(m: &Matrix<f32>) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Class-conditional sinusoidal gratings plus Gaussian noise.
///
/// Class `k` uses orientation `pi * (k mod 4) / 4` and `2 + k / 4` cycles
/// across the image; each sample gets a random phase. Pixels are clipped to
/// [0, 1] and stored row-major, channels innermost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub image_side: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset<f32>, LoadError> {
    if spec.n == 0 {
        return Err(LoadError::Spec("n must be at least 1".into()));
    }
    if spec.classes < 2 || spec.image_side == 0 || spec.channels == 0 {
        return Err(LoadError::Spec(
            "need at least 2 classes and a positive image size".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(LoadError::Spec("noise must be a finite non-negative value".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).expect("checked");
    let side = spec.image_side;
    let d = side * side * spec.channels;
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let k = rng.random_range(0..spec.classes);
        let theta = PI * (k % 4) as f64 / 4.0;
        let cycles = 2.0 + (k / 4) as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 * c + y as f64 * s) / side as f64;
                let base = 0.5 + 0.4 * (2.0 * PI * cycles * u + phase).sin();
                for _ in 0..spec.channels {
                    let v = base + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(k);
    }
    let features = Matrix::from_vec(spec.n, d, data).expect("sized above");
    Ok(Dataset::new(features, labels, spec.classes)?)
}
