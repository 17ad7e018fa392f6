//! CSV ingestion, preprocessing into standardized feature matrices, stratified
//! splits and a synthetic two-blob generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use larar_autodiff::Tensor;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Reader, Writer, MATRIX_MAGIC};
use crate::error::{LararError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaHints {
    pub label: String,
    pub drop: Vec<String>,
    pub categorical: Vec<String>,
    pub numeric: Vec<String>,
}

impl Default for SchemaHints {
    /// Column conventions of the UNSW-NB15 CSV distribution.
    fn default() -> Self {
        Self {
            label: "label".into(),
            drop: vec!["id".into(), "attack_cat".into()],
            categorical: Vec::new(),
            numeric: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label_index(&self) -> Result<usize> {
        self.kinds
            .iter()
            .position(|&k| k == ColumnKind::Label)
            .ok_or_else(|| LararError::MissingLabelColumn("<none>".into()))
    }

    /// Binary labels, `0` for normal traffic.
    ///
    /// Numeric labels must be `0` or `1`. Two distinct string labels are
    /// accepted when one of them reads `normal` or `benign`.
    pub fn labels(&self) -> Result<Vec<u8>> {
        let li = self.label_index()?;
        let cells: Vec<&str> = self.rows.iter().map(|r| r[li].trim()).collect();
        let numeric: Option<Vec<u8>> = cells
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(v) if v == 0.0 => Some(0),
                Ok(v) if v == 1.0 => Some(1),
                _ => None,
            })
            .collect();
        if let Some(v) = numeric {
            return Ok(v);
        }
        let distinct: BTreeSet<String> = cells.iter().map(|c| c.to_ascii_lowercase()).collect();
        let is_normal = |s: &str| matches!(s.to_ascii_lowercase().as_str(), "normal" | "benign");
        if distinct.len() <= 2 && distinct.iter().filter(|s| is_normal(s)).count() == 1 {
            return Ok(cells.iter().map(|c| u8::from(!is_normal(c))).collect());
        }
        let shown: Vec<String> = distinct.into_iter().take(5).collect();
        Err(LararError::NonBinaryLabel(format!("values {shown:?}")))
    }
}

pub fn ingest_csv(path: &Path, hints: &SchemaHints) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| LararError::io(path, e))?;
    ingest_reader(file, hints)
}

pub fn ingest_reader<R: Read>(reader: R, hints: &SchemaHints) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(e, i + 2))?;
        rows.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let label = names
        .iter()
        .position(|n| *n == hints.label)
        .ok_or_else(|| LararError::MissingLabelColumn(hints.label.clone()))?;
    let kinds = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if j == label {
                ColumnKind::Label
            } else if hints.drop.contains(name) {
                ColumnKind::Ignored
            } else if hints.categorical.contains(name) {
                ColumnKind::Categorical
            } else if hints.numeric.contains(name) {
                ColumnKind::Numeric
            } else if rows.iter().all(|r| {
                let c = r[j].trim();
                c.is_empty() || c.parse::<f64>().is_ok()
            }) {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            }
        })
        .collect();
    Ok(RawTable { names, kinds, rows })
}

/// Ingests several CSV files with identical headers as one table, such as
/// the separate training and testing files of a published distribution.
pub fn ingest_csv_files(paths: &[PathBuf], hints: &SchemaHints) -> Result<RawTable> {
    let (first, rest) = paths
        .split_first()
        .ok_or(LararError::EmptyInput("no CSV files given"))?;
    let mut table = ingest_csv(first, hints)?;
    for path in rest {
        let next = ingest_csv(path, hints)?;
        if next.names != table.names {
            return Err(LararError::Parse {
                row: 1,
                message: format!("header of {} differs from {}", path.display(), first.display()),
            });
        }
        for (kind, other) in table.kinds.iter_mut().zip(&next.kinds) {
            if *other == ColumnKind::Categorical && *kind == ColumnKind::Numeric {
                *kind = ColumnKind::Categorical;
            }
        }
        table.rows.extend(next.rows);
    }
    Ok(table)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> LararError {
    let row = e
        .position()
        .map(|p| p.line() as usize)
        .filter(|&l| l > 0)
        .unwrap_or(fallback_line);
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        _ => e.to_string(),
    };
    LararError::Parse { row, message }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    /// Share of the training split held out for threshold calibration.
    pub calibration_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            stratified: true,
            calibration_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.train_fraction) || !open(self.calibration_fraction) {
            return Err(LararError::InvalidConfig(format!(
                "split fractions must lie in (0, 1): train {}, calibration {}",
                self.train_fraction, self.calibration_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    /// Category strings in code order; code `c ≥ 1` is `categories[c − 1]`
    /// and code `0` is reserved for unseen or missing values.
    pub categories: Option<Vec<String>>,
    pub mean: f64,
    pub std: f64,
}

impl ColumnMeta {
    pub fn encode(&self, value: &str) -> Option<f64> {
        let cats = self.categories.as_ref()?;
        Some(match cats.binary_search_by(|c| c.as_str().cmp(value)) {
            Ok(i) => (i + 1) as f64,
            Err(_) => 0.0,
        })
    }

    pub fn decode(&self, code: usize) -> Option<&str> {
        let cats = self.categories.as_ref()?;
        code.checked_sub(1).and_then(|i| cats.get(i)).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub x: Tensor,
    pub y: Vec<u8>,
    pub columns: Vec<ColumnMeta>,
}

impl FeatureMatrix {
    pub fn new(x: Tensor, y: Vec<u8>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(LararError::ShapeMismatch(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        let columns = (0..x.cols())
            .map(|j| ColumnMeta {
                name: format!("f{j}"),
                categories: None,
                mean: 0.0,
                std: 1.0,
            })
            .collect();
        Ok(Self { x, y, columns })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            columns: self.columns.clone(),
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `[count of label 0, count of label 1]`.
    pub fn class_counts(&self) -> [usize; 2] {
        class_counts(&self.y)
    }
}

fn class_counts(y: &[u8]) -> [usize; 2] {
    let ones = y.iter().filter(|&&v| v == 1).count();
    [y.len() - ones, ones]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: FeatureMatrix,
    pub calibration: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Row indices of the three splits, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

fn take_fraction(idx: &mut Vec<usize>, fraction: f64) -> Vec<usize> {
    let k = ((idx.len() as f64) * fraction).round() as usize;
    let rest = idx.split_off(k.min(idx.len()));
    std::mem::replace(idx, rest)
}

pub fn split_indices(y: &[u8], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let counts = class_counts(y);
    if counts[0] == 0 || counts[1] == 0 {
        let only = u8::from(counts[1] > 0);
        return Err(LararError::SingleClass(only));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..2u8)
            .map(|c| (0..y.len()).filter(|&i| y[i] == c).collect())
            .collect()
    } else {
        vec![(0..y.len()).collect()]
    };
    let mut out = SplitIndices {
        train: Vec::new(),
        calibration: Vec::new(),
        test: Vec::new(),
    };
    for mut g in groups {
        g.shuffle(&mut rng);
        let mut train = take_fraction(&mut g, spec.train_fraction);
        out.test.extend(g);
        let calib = take_fraction(&mut train, spec.calibration_fraction);
        out.calibration.extend(calib);
        out.train.extend(train);
    }
    out.train.sort_unstable();
    out.calibration.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Encodes, imputes and standardizes the table, fitting every statistic on
/// the training rows only.
pub fn preprocess(raw: &RawTable, spec: &SplitSpec) -> Result<Splits> {
    let y = raw.labels()?;
    let idx = split_indices(&y, spec)?;
    let features: Vec<usize> = raw
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, ColumnKind::Numeric | ColumnKind::Categorical))
        .map(|(j, _)| j)
        .collect();
    if features.is_empty() {
        return Err(LararError::InvalidConfig("no feature columns".into()));
    }

    let mut columns: Vec<ColumnMeta> = features
        .iter()
        .map(|&j| ColumnMeta {
            name: raw.names[j].clone(),
            categories: (raw.kinds[j] == ColumnKind::Categorical).then(|| {
                let set: BTreeSet<&str> = idx
                    .train
                    .iter()
                    .map(|&i| raw.rows[i][j].trim())
                    .filter(|c| !c.is_empty())
                    .collect();
                set.into_iter().map(str::to_string).collect()
            }),
            mean: 0.0,
            std: 1.0,
        })
        .collect();

    let mut unseen: BTreeMap<String, usize> = BTreeMap::new();
    let encode = |rows: &[usize], unseen: &mut BTreeMap<String, usize>, columns: &[ColumnMeta]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * features.len());
        for &i in rows {
            for (meta, &j) in columns.iter().zip(&features) {
                let cell = raw.rows[i][j].trim();
                let v = if cell.is_empty() {
                    0.0
                } else if let Some(code) = meta.encode(cell) {
                    if code == 0.0 {
                        *unseen.entry(meta.name.clone()).or_default() += 1;
                    }
                    code
                } else {
                    cell.parse::<f64>().map_err(|_| LararError::Parse {
                        row: i + 2,
                        message: format!("column `{}`: `{cell}` is not numeric", meta.name),
                    })?
                };
                data.push(v);
            }
        }
        Ok(Tensor::from_vec(rows.len(), features.len(), data)?)
    };

    let mut train_x = encode(&idx.train, &mut unseen, &columns)?;
    let n = train_x.rows().max(1) as f64;
    for (j, meta) in columns.iter_mut().enumerate() {
        let mean = (0..train_x.rows()).map(|i| train_x.get(i, j)).sum::<f64>() / n;
        let var = (0..train_x.rows())
            .map(|i| (train_x.get(i, j) - mean).powi(2))
            .sum::<f64>()
            / n;
        meta.mean = mean;
        meta.std = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut calib_x = encode(&idx.calibration, &mut unseen, &columns)?;
    let mut test_x = encode(&idx.test, &mut unseen, &columns)?;
    for (name, count) in &unseen {
        warn!("column `{name}`: {count} value(s) outside the training categories mapped to code 0");
    }
    for t in [&mut train_x, &mut calib_x, &mut test_x] {
        let cols = t.cols();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let meta = &columns[k % cols];
            *v = (*v - meta.mean) / meta.std;
        }
    }
    let labels = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<u8>>();
    Ok(Splits {
        train: FeatureMatrix {
            x: train_x,
            y: labels(&idx.train),
            columns: columns.clone(),
        },
        calibration: FeatureMatrix {
            x: calib_x,
            y: labels(&idx.calibration),
            columns: columns.clone(),
        },
        test: FeatureMatrix {
            x: test_x,
            y: labels(&idx.test),
            columns,
        },
    })
}

/// Parameters of [`synth_dataset`], parsed from `n=2000,d=10,sep=6[,seed=3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub sep: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FromStr for SynthSpec {
    type Err = LararError;

    fn from_str(s: &str) -> Result<Self> {
        let (mut n, mut d, mut sep, mut seed) = (None, None, None, None);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| LararError::InvalidConfig(format!("synth spec entry `{part}` is not key=value")))?;
            let bad = || LararError::InvalidConfig(format!("synth spec: bad value for `{k}`: `{v}`"));
            match k.trim() {
                "n" => n = Some(v.trim().parse().map_err(|_| bad())?),
                "d" => d = Some(v.trim().parse().map_err(|_| bad())?),
                "sep" => sep = Some(v.trim().parse().map_err(|_| bad())?),
                "seed" => seed = Some(v.trim().parse().map_err(|_| bad())?),
                other => return Err(LararError::InvalidConfig(format!("synth spec: unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| LararError::InvalidConfig(format!("synth spec needs `{k}`"));
        let spec = SynthSpec {
            n: n.ok_or_else(|| missing("n"))?,
            d: d.ok_or_else(|| missing("d"))?,
            sep: sep.ok_or_else(|| missing("sep"))?,
            seed,
        };
        if spec.n < 2 || spec.d < 1 || !spec.sep.is_finite() {
            return Err(LararError::InvalidConfig("synth spec needs n >= 2, d >= 1, finite sep".into()));
        }
        Ok(spec)
    }
}

/// Two unit-variance Gaussian blobs centred at `∓sep/2` on every coordinate,
/// with labels alternating so the classes are exactly balanced.
pub fn synth_dataset(n: usize, d: usize, sep: f64, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    names.push("label".into());
    let mut kinds = vec![ColumnKind::Numeric; d];
    kinds.push(ColumnKind::Label);
    let rows = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let centre = if label == 1 { sep / 2.0 } else { -sep / 2.0 };
            let mut row: Vec<String> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (centre + z).to_string()
                })
                .collect();
            row.push(label.to_string());
            row
        })
        .collect();
    RawTable { names, kinds, rows }
}

impl SynthSpec {
    pub fn generate(&self, default_seed: u64) -> RawTable {
        synth_dataset(self.n, self.d, self.sep, self.seed.unwrap_or(default_seed))
    }
}

fn write_matrix(w: &mut Writer, m: &FeatureMatrix) {
    w.tensor(&m.x).u64(m.y.len() as u64);
    for &v in &m.y {
        w.u8(v);
    }
}

fn read_matrix(bytes: &[u8], columns: &[ColumnMeta]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    let x = r.tensor()?;
    let n = r.u64()? as usize;
    if n != x.rows() || x.cols() != columns.len() {
        return Err(LararError::CorruptFile("matrix shape disagrees with metadata".into()));
    }
    let y = r.take(n)?.to_vec();
    Ok(FeatureMatrix {
        x,
        y,
        columns: columns.to_vec(),
    })
}

/// Writes preprocessed splits to a cache file in the shared container format.
pub fn save_splits(splits: &Splits, path: &Path) -> Result<()> {
    let mut c = Container::default();
    let meta = serde_json::to_vec(&splits.train.columns).map_err(|e| LararError::Serialization(e.to_string()))?;
    c.push(b"COLS", meta);
    for (tag, m) in [(b"TRAI", &splits.train), (b"CALI", &splits.calibration), (b"TEST", &splits.test)] {
        let mut w = Writer::new();
        write_matrix(&mut w, m);
        c.push(tag, w.finish());
    }
    c.write(path, MATRIX_MAGIC)
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let c = Container::read(path, MATRIX_MAGIC)?;
    let columns: Vec<ColumnMeta> =
        serde_json::from_slice(c.require(b"COLS")?).map_err(|e| LararError::CorruptFile(format!("column metadata: {e}")))?;
    Ok(Splits {
        train: read_matrix(c.require(b"TRAI")?, &columns)?,
        calibration: read_matrix(c.require(b"CALI")?, &columns)?,
        test: read_matrix(c.require(b"TEST")?, &columns)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_parsing() {
        let s: SynthSpec = "n=2000, d=10, sep=6".parse().unwrap();
        assert_eq!((s.n, s.d, s.sep, s.seed), (2000, 10, 6.0, None));
        assert!("n=2000,d=10".parse::<SynthSpec>().is_err());
        assert!("n=2000,d=10,sep=6,k=1".parse::<SynthSpec>().is_err());
        assert!("n=1,d=10,sep=6".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn string_labels_map_normal_to_zero() {
        let raw = RawTable {
            names: vec!["a".into(), "label".into()],
            kinds: vec![ColumnKind::Numeric, ColumnKind::Label],
            rows: vec![
                vec!["1".into(), "Normal".into()],
                vec!["2".into(), "Exploits".into()],
            ],
        };
        assert_eq!(raw.labels().unwrap(), vec![0, 1]);
    }

    #[test]
    fn category_codes_round_trip() {
        let meta = ColumnMeta {
            name: "proto".into(),
            categories: Some(vec!["tcp".into(), "udp".into()]),
            mean: 0.0,
            std: 1.0,
        };
        assert_eq!(meta.encode("tcp"), Some(1.0));
        assert_eq!(meta.encode("udp"), Some(2.0));
        assert_eq!(meta.encode("icmp"), Some(0.0));
        assert_eq!(meta.decode(2), Some("udp"));
        assert_eq!(meta.decode(0), None);
    }
}
