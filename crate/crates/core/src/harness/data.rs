use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian blobs centred on a circle of radius 4.
    Blobs,
    /// Interleaved 2-D spiral arms, one per class.
    Spirals,
    /// Feature columns followed by a 1-based label column.
    Csv,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "spirals" => Ok(Self::Spirals),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown dataset kind '{other}' (blobs | spirals | csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Total number of points (synthetic kinds).
    pub size: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub train_fraction: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
    pub csv_path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind, size: usize, input_dim: usize, classes: usize, noise: f64) -> Self {
        Self {
            kind,
            size,
            input_dim,
            classes,
            noise,
            train_fraction: 0.8,
            heldout_fraction: 0.2,
            seed: 0,
            csv_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("data.classes must be >= 2, got {}", self.classes)));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("data.input_dim must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.heldout_fraction > 0.0) {
            return Err(Error::Config("split fractions must both be > 0".into()));
        }
        if (self.train_fraction + self.heldout_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {} + {}",
                self.train_fraction, self.heldout_fraction
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("data.noise must be a finite value >= 0, got {}", self.noise)));
        }
        match self.kind {
            DatasetKind::Csv if self.csv_path.is_none() => Err(Error::Config("data.csv_path is required for kind = csv".into())),
            DatasetKind::Spirals if self.input_dim != 2 => Err(Error::Config("spirals require data.input_dim = 2".into())),
            DatasetKind::Blobs | DatasetKind::Spirals if self.size < self.classes => Err(Error::Config(format!(
                "data.size {} leaves some of the {} classes empty",
                self.size, self.classes
            ))),
            _ => Ok(()),
        }
    }
}

/// Generate (or load) the data and split it per class into `(train, heldout)`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(Batch, Batch)> {
    spec.validate()?;
    let (inputs, labels) = match spec.kind {
        DatasetKind::Blobs => blobs(spec),
        DatasetKind::Spirals => spirals(spec),
        DatasetKind::Csv => read_csv(spec)?,
    };
    split(spec, &inputs, &labels)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Row i belongs to class i mod M, so class sizes differ by at most one.
fn blobs(spec: &DatasetSpec) -> (Array2<f64>, Vec<usize>) {
    let (n, d, m) = (spec.size, spec.input_dim, spec.classes);
    let mut rng = rng_for(spec.seed, 0);
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % m;
        let mut center = vec![0.0; d];
        if d == 1 {
            center[0] = 4.0 * k as f64;
        } else {
            let angle = 2.0 * PI * k as f64 / m as f64;
            center[0] = 4.0 * angle.cos();
            center[1] = 4.0 * angle.sin();
        }
        for (j, c) in center.into_iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            x[[i, j]] = c + spec.noise * z;
        }
        labels.push(k + 1);
    }
    (x, labels)
}

fn spirals(spec: &DatasetSpec) -> (Array2<f64>, Vec<usize>) {
    let (n, m) = (spec.size, spec.classes);
    let mut rng = rng_for(spec.seed, 0);
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % m;
        let per_class = n / m + usize::from(k < n % m);
        let t = (i / m) as f64 / per_class as f64;
        let r = 0.3 + 1.7 * t;
        let angle = 2.0 * PI * (t + k as f64 / m as f64);
        let (zx, zy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        x[[i, 0]] = r * angle.cos() + spec.noise * zx;
        x[[i, 1]] = r * angle.sin() + spec.noise * zy;
        labels.push(k + 1);
    }
    (x, labels)
}

fn read_csv(spec: &DatasetSpec) -> Result<(Array2<f64>, Vec<usize>)> {
    let path = spec.csv_path.as_ref().expect("validated");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?;
    let width = spec.input_dim + 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Ingestion { row, message: e.to_string() })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let fields = match parsed {
            Ok(f) => f,
            // A non-numeric first row is a header.
            Err(_) if row == 1 => continue,
            Err(e) => return Err(Error::Ingestion { row, message: e.to_string() }),
        };
        if fields.len() != width {
            return Err(Error::Ingestion { row, message: format!("expected {width} fields, found {}", fields.len()) });
        }
        let label = fields[width - 1];
        if label.fract() != 0.0 || label < 1.0 || label > spec.classes as f64 {
            return Err(Error::Ingestion { row, message: format!("label {label} outside 1..={}", spec.classes) });
        }
        if let Some(bad) = fields[..width - 1].iter().find(|v| !v.is_finite()) {
            return Err(Error::Ingestion { row, message: format!("non-finite feature {bad}") });
        }
        values.extend_from_slice(&fields[..width - 1]);
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::Ingestion { row: 0, message: "no data rows".into() });
    }
    let x = Array2::from_shape_vec((labels.len(), spec.input_dim), values).expect("row width checked");
    Ok((x, labels))
}

fn split(spec: &DatasetSpec, x: &Array2<f64>, labels: &[usize]) -> Result<(Batch, Batch)> {
    let mut rng = rng_for(spec.seed, 1);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for class in 1..=spec.classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.is_empty() {
            return Err(Error::Config(format!("class {class} has no examples")));
        }
        rows.shuffle(&mut rng);
        let k = (spec.train_fraction * rows.len() as f64).round() as usize;
        train.extend_from_slice(&rows[..k]);
        heldout.extend_from_slice(&rows[k..]);
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Config("split leaves the train or heldout set empty".into()));
    }
    train.sort_unstable();
    heldout.sort_unstable();
    let all = Batch::new(x.clone(), labels.to_vec(), spec.classes)?;
    Ok((all.select(&train), all.select(&heldout)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn bits(b: &Batch) -> Vec<u64> {
        b.inputs.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::synthetic(DatasetKind::Spirals, 200, 2, 2, 0.1);
        let (a, b) = make_dataset(&spec).unwrap();
        let (c, d) = make_dataset(&spec).unwrap();
        assert_eq!(bits(&a), bits(&c));
        assert_eq!(bits(&b), bits(&d));
        assert_eq!(a.labels, c.labels);
    }

    #[test]
    fn splits_are_disjoint_stratified_and_balanced() {
        let spec = DatasetSpec::synthetic(DatasetKind::Blobs, 300, 3, 3, 0.5);
        let (train, heldout) = make_dataset(&spec).unwrap();
        assert_eq!(train.len() + heldout.len(), 300);
        assert_eq!(train.len(), 240);
        for k in 1..=3 {
            assert_eq!(train.labels.iter().filter(|&&y| y == k).count(), 80);
            assert_eq!(heldout.labels.iter().filter(|&&y| y == k).count(), 20);
        }
        let rows = |b: &Batch| -> Vec<Vec<u64>> { b.inputs.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect() };
        let tr = rows(&train);
        assert!(rows(&heldout).iter().all(|r| !tr.contains(r)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = DatasetSpec::synthetic(DatasetKind::Blobs, 10, 2, 2, 0.0);
        spec.train_fraction = 0.7;
        assert!(matches!(make_dataset(&spec), Err(Error::Config(_))));
        let spec = DatasetSpec::synthetic(DatasetKind::Spirals, 10, 3, 2, 0.0);
        assert!(matches!(make_dataset(&spec), Err(Error::Config(_))));
        let spec = DatasetSpec::synthetic(DatasetKind::Blobs, 1, 2, 2, 0.0);
        assert!(matches!(make_dataset(&spec), Err(Error::Config(_))));
    }

    fn csv_spec(body: &str) -> (tempfile::NamedTempFile, DatasetSpec) {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        let mut spec = DatasetSpec::synthetic(DatasetKind::Csv, 0, 2, 2, 0.0);
        spec.csv_path = Some(f.path().to_path_buf());
        spec.train_fraction = 0.5;
        spec.heldout_fraction = 0.5;
        (f, spec)
    }

    #[test]
    fn csv_with_header_loads() {
        let (_f, spec) = csv_spec("x1,x2,label\n0,0,1\n0,1,1\n1,0,2\n1,1,2\n");
        let (train, heldout) = make_dataset(&spec).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(heldout.len(), 2);
    }

    #[test]
    fn csv_errors_carry_row_numbers() {
        let (_f, spec) = csv_spec("0,0,1\n0,1,1\n1,zero,2\n");
        match make_dataset(&spec) {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected ingestion error, got {other:?}"),
        }
        let (_f, spec) = csv_spec("0,0,1\n0,1,3\n");
        assert!(matches!(make_dataset(&spec), Err(Error::Ingestion { row: 2, .. })));
        let (_f, spec) = csv_spec("0,0,1\n0,1\n");
        assert!(matches!(make_dataset(&spec), Err(Error::Ingestion { row: 2, .. })));
    }
}
