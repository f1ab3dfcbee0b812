//! Categorical multi-scenario interaction data: schema, CSV ingestion,
//! chronological splitting, mini-batching and the synthetic generator.

mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{DetRng, Matrix};

pub use synth::{synth_generate, GroundTruth, SynthOutput, SyntheticConfig};

pub const DOMAIN_FIELD: &str = "domain";
pub const USER_FIELD: &str = "user";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Field {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered feature fields. The first two are always `domain` and `user`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<Field>,
    pub num_scenarios: usize,
    pub embedding_dim: usize,
}

impl FeatureSchema {
    pub fn new(fields: Vec<Field>, num_scenarios: usize, embedding_dim: usize) -> Result<Self> {
        let s = Self {
            fields,
            num_scenarios,
            embedding_dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scenarios < 2 {
            return Err(Error::Validation(format!(
                "num_scenarios must be >= 2, got {}",
                self.num_scenarios
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be >= 1".into()));
        }
        if self.fields.len() < 2
            || self.fields[0].name != DOMAIN_FIELD
            || self.fields[1].name != USER_FIELD
        {
            return Err(Error::Validation(
                "schema must start with fields `domain` and `user`".into(),
            ));
        }
        if self.fields[0].cardinality != self.num_scenarios {
            return Err(Error::Validation(format!(
                "domain cardinality {} != num_scenarios {}",
                self.fields[0].cardinality, self.num_scenarios
            )));
        }
        for f in &self.fields {
            if f.cardinality == 0 {
                return Err(Error::Validation(format!("field `{}` has cardinality 0", f.name)));
            }
            if matches!(f.name.as_str(), "label" | "order") {
                return Err(Error::Validation(format!("field name `{}` is reserved", f.name)));
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn num_users(&self) -> usize {
        self.fields[1].cardinality
    }

    /// Width of the concatenated embedding, `M · Dim`.
    pub fn embedding_width(&self) -> usize {
        self.fields.len() * self.embedding_dim
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.fields.iter().map(|f| f.name.clone()).collect();
        h.push("label".into());
        h.push("order".into());
        h
    }
}

/// One interaction. `features[0]` is the scenario, `features[1]` the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<u32>,
    pub label: u8,
    pub order: u64,
}

impl Sample {
    #[inline]
    pub fn domain(&self) -> usize {
        self.features[0] as usize
    }

    #[inline]
    pub fn user(&self) -> usize {
        self.features[1] as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { schema, samples };
        for (i, s) in ds.samples.iter().enumerate() {
            ds.check_sample(s).map_err(|m| Error::Validation(format!("sample {i}: {m}")))?;
        }
        Ok(ds)
    }

    fn check_sample(&self, s: &Sample) -> std::result::Result<(), String> {
        if s.features.len() != self.schema.num_fields() {
            return Err(format!(
                "expected {} features, got {}",
                self.schema.num_fields(),
                s.features.len()
            ));
        }
        for (f, &v) in self.schema.fields.iter().zip(&s.features) {
            if v as usize >= f.cardinality {
                return Err(format!(
                    "field `{}` index {v} out of range (cardinality {})",
                    f.name, f.cardinality
                ));
            }
        }
        if s.label > 1 {
            return Err(format!("label {} is not 0 or 1", s.label));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scenario_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_scenarios];
        for s in &self.samples {
            counts[s.domain()] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.schema.csv_header().join(",")).map_err(io)?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            for v in &s.features {
                line.push_str(&v.to_string());
                line.push(',');
            }
            line.push_str(&format!("{},{}", s.label, s.order));
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        let expected = schema.csv_header();
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(path, 1, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != expected {
            return Err(Error::parse(
                path,
                1,
                format!("header {:?} does not match schema columns {:?}", header, expected),
            ));
        }
        let m = schema.num_fields();
        let mut samples = Vec::new();
        let mut last_order = 0u64;
        let probe = Dataset {
            schema: schema.clone(),
            samples: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::parse(path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| -> Result<u64> {
                rec[i].trim().parse::<u64>().map_err(|_| {
                    Error::parse(path, line, format!("column `{}`: `{}` is not a non-negative integer", expected[i], &rec[i]))
                })
            };
            let mut features = Vec::with_capacity(m);
            for (i, name) in expected.iter().enumerate().take(m) {
                let v = num(i)?;
                let v = u32::try_from(v).map_err(|_| Error::parse(path, line, format!("column `{name}` overflows")))?;
                features.push(v);
            }
            let label = num(m)?;
            if label > 1 {
                return Err(Error::parse(path, line, format!("label {label} is not 0 or 1")));
            }
            let order = num(m + 1)?;
            if order < last_order {
                return Err(Error::parse(
                    path,
                    line,
                    format!("order {order} decreases (previous {last_order})"),
                ));
            }
            last_order = order;
            let s = Sample {
                features,
                label: label as u8,
                order,
            };
            probe.check_sample(&s).map_err(|msg| Error::parse(path, line, msg))?;
            samples.push(s);
        }
        Ok(Dataset {
            schema: schema.clone(),
            samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// One chronological cut over the whole dataset.
    #[default]
    Global,
    /// Each scenario is cut chronologically on its own.
    PerScenario,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Boundaries `(n_train, n_train + n_valid)` for `n` ranked items.
pub fn split_bounds(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let first = (n as f64 * a).round() as usize;
    let second = ((n as f64 * (a + b)).round() as usize).clamp(first, n);
    Ok((first.min(n), second))
}

/// Chronological split by `order`, ties broken by file position.
pub fn split_chrono(ds: &Dataset, ratios: (f64, f64, f64), mode: SplitMode) -> Result<Splits> {
    let ranked = |idx: &mut Vec<usize>| idx.sort_by_key(|&i| ds.samples[i].order);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    let groups: Vec<Vec<usize>> = match mode {
        SplitMode::Global => vec![(0..ds.len()).collect()],
        SplitMode::PerScenario => {
            let mut g = vec![Vec::new(); ds.schema.num_scenarios];
            for (i, s) in ds.samples.iter().enumerate() {
                g[s.domain()].push(i);
            }
            g
        }
    };
    for mut idx in groups {
        ranked(&mut idx);
        let (a, b) = split_bounds(idx.len(), ratios)?;
        tr.extend_from_slice(&idx[..a]);
        va.extend_from_slice(&idx[a..b]);
        te.extend_from_slice(&idx[b..]);
    }
    for (name, part) in [("train", &mut tr), ("valid", &mut va), ("test", &mut te)] {
        if part.is_empty() {
            return Err(Error::Validation(format!("{name} split is empty ({} samples)", ds.len())));
        }
        ranked(part);
    }
    Ok(Splits {
        train: ds.subset(&tr),
        valid: ds.subset(&va),
        test: ds.subset(&te),
    })
}

/// A mixed-scenario mini-batch borrowed from a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
}

impl<'a> Batch<'a> {
    pub fn from_indices(ds: &'a Dataset, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| &ds.samples[i]).collect(),
        }
    }

    pub fn all(ds: &'a Dataset) -> Self {
        Self {
            samples: ds.samples.iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Matrix {
        Matrix::from_vec(
            self.samples.len(),
            1,
            self.samples.iter().map(|s| s.label as f64).collect(),
        )
        .expect("sized")
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.domain()).collect()
    }

    pub fn users(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.user()).collect()
    }
}

/// A fresh shuffled visiting order for one epoch.
pub fn epoch_order(n: usize, rng: &mut DetRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

/// One shuffled pass over `ds` in batches of `batch_size`; the last batch may be short.
pub fn make_batches<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut DetRng) -> Vec<Batch<'a>> {
    assert!(batch_size >= 1, "batch size must be positive");
    epoch_order(ds.len(), rng)
        .chunks(batch_size)
        .map(|c| Batch::from_indices(ds, c))
        .collect()
}

/// Per-scenario positive interactions of one user in chronological order.
pub fn positives_by_scenario(ds: &Dataset, user: usize) -> BTreeMap<usize, Vec<&Sample>> {
    let mut out: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in ds.samples.iter().filter(|s| s.user() == user && s.label == 1) {
        out.entry(s.domain()).or_default().push(s);
    }
    for v in out.values_mut() {
        v.sort_by_key(|s| s.order);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                Field { name: "domain".into(), cardinality: 2 },
                Field { name: "user".into(), cardinality: 3 },
                Field { name: "item".into(), cardinality: 5 },
            ],
            2,
            4,
        )
        .unwrap()
    }

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                features: vec![(i % 2) as u32, (i % 3) as u32, (i % 5) as u32],
                label: (i % 2 == 0) as u8,
                order: i as u64,
            })
            .collect();
        Dataset::new(schema(), samples).unwrap()
    }

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("d.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "domain,user,item,label,order\n0,1,4,1,10\n1,2,0,0,11\n0,0,3,0,11\n");
        let ds = Dataset::load_csv(&p, &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.scenario_counts(), vec![2, 1]);
    }

    #[test]
    fn rejects_bad_label_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "domain,user,item,label,order\n0,1,4,1,10\n0,1,4,2,11\n");
        let err = Dataset::load_csv(&p, &schema()).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("label"), "{err}");
    }

    #[test]
    fn rejects_index_at_cardinality() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "domain,user,item,label,order\n0,1,5,1,10\n");
        let err = Dataset::load_csv(&p, &schema()).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("item"), "{err}");
    }

    #[test]
    fn rejects_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "domain,user,label,order\n0,1,1,10\n");
        let err = Dataset::load_csv(&p, &schema()).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(17);
        let p = dir.path().join("rt.csv");
        ds.save_csv(&p).unwrap();
        assert_eq!(Dataset::load_csv(&p, &ds.schema).unwrap(), ds);
    }

    #[test]
    fn split_sizes() {
        let s = split_chrono(&dataset(10), (0.8, 0.1, 0.1), SplitMode::Global).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert_eq!(split_bounds(100, (0.8, 0.1, 0.1)).unwrap(), (80, 90));
    }

    #[test]
    fn split_ties_follow_file_order() {
        let mut ds = dataset(10);
        ds.samples.iter_mut().for_each(|s| s.order = 5);
        let s = split_chrono(&ds, (0.8, 0.1, 0.1), SplitMode::Global).unwrap();
        assert_eq!(s.train.samples, ds.samples[..8].to_vec());
        assert_eq!(s.test.samples[0], ds.samples[9]);
    }

    #[test]
    fn split_rejects_empty_part() {
        assert!(split_chrono(&dataset(3), (0.8, 0.1, 0.1), SplitMode::Global).is_err());
        assert!(split_chrono(&dataset(10), (0.8, 0.1, 0.2), SplitMode::Global).is_err());
    }

    #[test]
    fn per_scenario_split_cuts_each_scenario() {
        let s = split_chrono(&dataset(40), (0.5, 0.25, 0.25), SplitMode::PerScenario).unwrap();
        assert_eq!(s.train.scenario_counts(), vec![10, 10]);
        assert_eq!(s.test.scenario_counts(), vec![5, 5]);
    }

    #[test]
    fn batches_partition_and_are_deterministic() {
        let ds = dataset(10);
        let sizes: Vec<usize> = make_batches(&ds, 4, &mut DetRng::new(1)).iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let orders = |seed| -> Vec<u64> {
            make_batches(&ds, 4, &mut DetRng::new(seed))
                .iter()
                .flat_map(|b| b.samples.iter().map(|s| s.order))
                .collect()
        };
        assert_eq!(orders(3), orders(3));
        let seen: HashSet<u64> = orders(3).into_iter().collect();
        assert_eq!(seen.len(), 10);
    }
}
