//! Synthetic biased datasets and the tabular file formats.
//!
//! Dataset file: `feature_0,..,feature_{D-1},y_t_star,y_s_star,partition`.
//! Prediction dump: `sample_id,p_0,..,p_{K_t-1},y_t_star,y_s_star`, with
//! probabilities written to 17 significant digits.
//! Both are comma separated UTF-8 with LF line endings and a header row.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::ProbBatch;
use crate::error::{input_err, Error, Result};

/// Distance between class means before the group penalty, in feature units.
pub const CLASS_SEPARATION: f64 = 2.5;
/// Penalty of the last group; the separation of group `c` shrinks by
/// `bias_strength * group_penalty(c)`.
pub const MAX_GROUP_PENALTY: f64 = 0.4;
/// Probability that a sample's target is forced to its group's preferred
/// class when `bias_strength = 1`.
pub const LABEL_COUPLING: f64 = 0.3;

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.2;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DUMP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub k_t: usize,
    pub k_s: usize,
    pub feature_dim: usize,
    /// In `[0, 1]`: couples target labels to groups and shrinks the class
    /// separation of penalized groups.
    pub bias_strength: f64,
    /// Group proportions, summing to one.
    pub group_imbalance: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            k_t: 2,
            k_s: 2,
            feature_dim: 4,
            bias_strength: 0.8,
            group_imbalance: vec![0.9, 0.1],
            noise_scale: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_t < 2 || self.k_s < 2 {
            return Err(input_err!("k_t and k_s must be at least 2"));
        }
        // class means live on the first k_t axes, the group code on the last
        if self.feature_dim < self.k_t + 1 {
            return Err(input_err!(
                "feature_dim must be at least k_t + 1 = {}, got {}",
                self.k_t + 1,
                self.feature_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(input_err!("bias_strength must lie in [0, 1]"));
        }
        if self.group_imbalance.len() != self.k_s
            || self.group_imbalance.iter().any(|w| !(*w >= 0.0))
            || (self.group_imbalance.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(input_err!(
                "group_imbalance must be {} nonnegative weights summing to 1",
                self.k_s
            ));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(input_err!("noise_scale must be positive"));
        }
        if self.n_samples < 10 {
            return Err(input_err!(
                "n_samples = {} is too small for a 70/20/10 split",
                self.n_samples
            ));
        }
        Ok(())
    }

    /// Position of group `c` on `[0, 1]`; also its feature code.
    pub fn group_code(&self, c: usize) -> f64 {
        c as f64 / (self.k_s - 1) as f64
    }

    /// Separation penalty of group `c`: 0 for group 0 rising linearly to
    /// `MAX_GROUP_PENALTY` for the last group.
    pub fn group_penalty(&self, c: usize) -> f64 {
        MAX_GROUP_PENALTY * self.group_code(c)
    }
}

/// Features with labels and a train/val/test tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub target: Vec<usize>,
    pub sensitive: Vec<usize>,
    pub partition: Vec<Partition>,
    pub k_t: usize,
    pub k_s: usize,
}

/// Features and labels of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Vec<f64>,
    pub dim: usize,
    pub target: Vec<usize>,
    pub sensitive: Vec<usize>,
    pub k_t: usize,
    pub k_s: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k_t];
        for &t in &self.target {
            counts[t] += 1;
        }
        counts
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn split(&self, part: Partition) -> Split {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.partition[i] == part).collect();
        Split {
            features: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dim: self.dim,
            target: idx.iter().map(|&i| self.target[i]).collect(),
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
            k_t: self.k_t,
            k_s: self.k_s,
        }
    }
}

/// Seeded permutation; the first 70% of positions are train, the next 20% val.
pub fn assign_partitions(n: usize, seed: u64) -> Vec<Partition> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5041_5254));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    let mut out = vec![Partition::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < n_train {
            Partition::Train
        } else if pos < n_train + n_val {
            Partition::Val
        } else {
            Partition::Test
        };
    }
    out
}

/// Draws a dataset whose sensitive groups differ in label mix and in how
/// separable the target classes are.
///
/// Per sample: the group is drawn from `group_imbalance`; with probability
/// `LABEL_COUPLING * bias_strength` the target is the group's preferred class
/// (`c mod k_t`), otherwise uniform. The first `feature_dim - 1` features are
/// Gaussian around `CLASS_SEPARATION * (1 - bias_strength * penalty(c)) * e_t`
/// with `noise_scale` spread; the last one is the group code.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_scale).expect("positive noise scale");
    let d = spec.feature_dim;
    let coupling = LABEL_COUPLING * spec.bias_strength;

    let mut features = Vec::with_capacity(spec.n_samples * d);
    let mut target = Vec::with_capacity(spec.n_samples);
    let mut sensitive = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let c = draw_group(&spec.group_imbalance, rng.random());
        let t = if rng.random::<f64>() < coupling {
            c % spec.k_t
        } else {
            rng.random_range(0..spec.k_t)
        };
        let sep = CLASS_SEPARATION * (1.0 - spec.bias_strength * spec.group_penalty(c));
        for j in 0..d - 1 {
            let mean = if j == t { sep } else { 0.0 };
            features.push(mean + noise.sample(&mut rng));
        }
        features.push(spec.group_code(c));
        target.push(t);
        sensitive.push(c);
    }
    Ok(Dataset {
        features,
        dim: d,
        target,
        sensitive,
        partition: assign_partitions(spec.n_samples, spec.seed),
        k_t: spec.k_t,
        k_s: spec.k_s,
    })
}

/// Inverse-CDF draw; zero-weight groups are never chosen.
fn draw_group(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            return c;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| input_err!("{} is not a file path", path.display()))?;
    let tmp: PathBuf = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn dataset_to_string(data: &Dataset) -> String {
    let mut out = String::new();
    for j in 0..data.dim {
        let _ = write!(out, "feature_{j},");
    }
    out.push_str("y_t_star,y_s_star,partition\n");
    for i in 0..data.len() {
        for v in data.row(i) {
            // shortest representation that round-trips exactly
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(
            out,
            "{},{},{}",
            data.target[i],
            data.sensitive[i],
            data.partition[i].as_str()
        );
    }
    out
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_string(data).as_bytes())
}

pub fn dump_to_string(batch: &ProbBatch) -> String {
    let mut out = String::from("sample_id");
    for a in 0..batch.k_t() {
        let _ = write!(out, ",p_{a}");
    }
    out.push_str(",y_t_star,y_s_star\n");
    for (i, row) in batch.rows().enumerate() {
        let _ = write!(out, "{i}");
        for p in row {
            let _ = write!(out, ",{p:.16e}");
        }
        let _ = writeln!(out, ",{},{}", batch.target()[i], batch.sensitive()[i]);
    }
    out
}

pub fn write_dump(batch: &ProbBatch, path: &Path) -> Result<()> {
    write_atomic(path, dump_to_string(batch).as_bytes())
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    /// (line number, fields)
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "no data rows".to_string()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

impl Table {
    fn err(&self, line: u64, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn float(&self, line: u64, s: &str) -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(line, format!("'{s}' is not a finite number")))
    }

    fn label(&self, line: u64, s: &str, bound: Option<usize>, what: &str) -> Result<usize> {
        let v = s
            .parse::<usize>()
            .map_err(|_| self.err(line, format!("{what} '{s}' is not a label")))?;
        if bound.is_some_and(|k| v >= k) {
            return Err(self.err(line, format!("{what} {v} out of range 0..{}", bound.unwrap())));
        }
        Ok(v)
    }

    fn check_header(&self, expected: &[String]) -> Result<()> {
        if self.header != expected {
            return Err(self.err(
                1,
                format!("header '{}' does not match '{}'", self.header.join(","), expected.join(",")),
            ));
        }
        Ok(())
    }
}

fn infer_classes(labels: &[usize], given: Option<usize>) -> usize {
    given.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1).max(2)
}

/// Reads a dataset file. Label ranges are checked against `k_t`/`k_s` when
/// given, otherwise inferred as `max label + 1` (at least 2).
pub fn read_dataset(path: &Path, k_t: Option<usize>, k_s: Option<usize>) -> Result<Dataset> {
    let table = read_table(path)?;
    let n_cols = table.header.len();
    if n_cols < 4 {
        return Err(table.err(1, "dataset needs at least one feature column"));
    }
    let dim = n_cols - 3;
    let mut expected: Vec<String> = (0..dim).map(|j| format!("feature_{j}")).collect();
    expected.extend(["y_t_star", "y_s_star", "partition"].map(String::from));
    table.check_header(&expected)?;

    let mut features = Vec::with_capacity(table.rows.len() * dim);
    let mut target = Vec::new();
    let mut sensitive = Vec::new();
    let mut partition = Vec::new();
    for (line, row) in &table.rows {
        for s in &row[..dim] {
            features.push(table.float(*line, s)?);
        }
        target.push(table.label(*line, &row[dim], k_t, "y_t_star")?);
        sensitive.push(table.label(*line, &row[dim + 1], k_s, "y_s_star")?);
        partition.push(
            Partition::parse(&row[dim + 2])
                .ok_or_else(|| table.err(*line, format!("unknown partition '{}'", row[dim + 2])))?,
        );
    }
    Ok(Dataset {
        k_t: infer_classes(&target, k_t),
        k_s: infer_classes(&sensitive, k_s),
        features,
        dim,
        target,
        sensitive,
        partition,
    })
}

/// Reads a prediction dump into a validated batch. `k_t` comes from the
/// header; `k_s` is inferred unless given.
pub fn read_dump(path: &Path, k_s: Option<usize>) -> Result<ProbBatch> {
    let table = read_table(path)?;
    let k_t = table.header.len().saturating_sub(3);
    if k_t < 2 {
        return Err(table.err(1, "dump needs at least two probability columns"));
    }
    let mut expected = vec!["sample_id".to_string()];
    expected.extend((0..k_t).map(|a| format!("p_{a}")));
    expected.extend(["y_t_star", "y_s_star"].map(String::from));
    table.check_header(&expected)?;

    let mut probs = Vec::with_capacity(table.rows.len() * k_t);
    let mut target = Vec::new();
    let mut sensitive = Vec::new();
    for (line, row) in &table.rows {
        let mut sum = 0.0;
        for s in &row[1..=k_t] {
            let p = table.float(*line, s)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(table.err(*line, format!("probability {p} outside [0, 1]")));
            }
            sum += p;
            probs.push(p);
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(table.err(*line, format!("probabilities sum to {sum}")));
        }
        target.push(table.label(*line, &row[k_t + 1], Some(k_t), "y_t_star")?);
        sensitive.push(table.label(*line, &row[k_t + 2], k_s, "y_s_star")?);
    }
    let k_s = infer_classes(&sensitive, k_s);
    ProbBatch::new(probs, k_t, k_s, target, sensitive)
}
