use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Scenario,
    User,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Scenario => "scenario",
            Scope::User => "user",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "scenario" => Ok(Scope::Scenario),
            "user" => Ok(Scope::User),
            other => Err(format!("unknown scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeVector {
    pub scope: Scope,
    pub id: usize,
    pub values: Vec<f64>,
}

/// What a lookup miss returns. Scenario misses are always errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Error,
    Zero,
}

/// Fixed-width knowledge vectors keyed by `(scope, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    vectors: BTreeMap<(Scope, usize), Vec<f64>>,
    pub fallback: FallbackPolicy,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
            fallback: FallbackPolicy::Error,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, scope: Scope, id: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Validation(format!(
                "{scope} {id}: vector has {} values, store dim is {}",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{scope} {id}: non-finite value")));
        }
        self.vectors.insert((scope, id), values);
        Ok(())
    }

    pub fn contains(&self, scope: Scope, id: usize) -> bool {
        self.vectors.contains_key(&(scope, id))
    }

    pub fn ids(&self, scope: Scope) -> impl Iterator<Item = usize> + '_ {
        self.vectors.keys().filter(move |k| k.0 == scope).map(|k| k.1)
    }

    fn lookup(&self, scope: Scope, id: usize) -> Result<Option<&[f64]>> {
        match self.vectors.get(&(scope, id)) {
            Some(v) => Ok(Some(v)),
            None if scope == Scope::User && self.fallback == FallbackPolicy::Zero => Ok(None),
            None => Err(Error::Lookup {
                scope: scope.to_string(),
                id,
            }),
        }
    }

    pub fn get_vector(&self, scope: Scope, id: usize) -> Result<KnowledgeVector> {
        let values = match self.lookup(scope, id)? {
            Some(v) => v.to_vec(),
            None => vec![0.0; self.dim],
        };
        Ok(KnowledgeVector { scope, id, values })
    }

    /// Stacks the vectors for `ids` into an `ids.len() × dim` matrix.
    pub fn rows(&self, scope: Scope, ids: &[usize]) -> Result<Matrix> {
        let mut m = Matrix::zeros(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            if let Some(v) = self.lookup(scope, id)? {
                m.row_mut(r).copy_from_slice(v);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "#dim={}", self.dim).map_err(io)?;
        let mut line = String::new();
        for ((scope, id), values) in &self.vectors {
            line.clear();
            line.push_str(&format!("{scope}\t{id}\t"));
            for (i, v) in values.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty vector store"))?
            .map_err(|e| Error::io(path, e))?;
        let dim: usize = header
            .strip_prefix("#dim=")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse(path, 1, format!("expected `#dim=H` header, got `{header}`")))?;
        let mut store = VectorStore::new(dim);
        for (i, line) in lines.enumerate() {
            let lineno = i as u64 + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(scope), Some(id), Some(vals), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(path, lineno, "expected `scope<TAB>id<TAB>values`"));
            };
            let scope: Scope = scope.parse().map_err(|m: String| Error::parse(path, lineno, m))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad id `{id}`")))?;
            let values = vals
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(path, lineno, format!("bad float: {e}")))?;
            if values.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row has {} values but header declares dim={dim}", values.len()),
                ));
            }
            if store.contains(scope, id) {
                return Err(Error::parse(path, lineno, format!("duplicate entry for {scope} {id}")));
            }
            store
                .insert(scope, id, values)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::DetRng;

    fn random_store(dim: usize, seed: u64) -> VectorStore {
        let mut rng = DetRng::new(seed);
        let mut vs = VectorStore::new(dim);
        for d in 0..2 {
            vs.insert(Scope::Scenario, d, (0..dim).map(|_| rng.normal() * 1e3).collect()).unwrap();
        }
        for u in 0..5 {
            vs.insert(Scope::User, u, (0..dim).map(|_| rng.normal() / 7.0).collect()).unwrap();
        }
        vs
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        let vs = random_store(6, 9);
        vs.save(&p).unwrap();
        let back = VectorStore::load(&p).unwrap();
        for (k, v) in &vs.vectors {
            let w = &back.vectors[k];
            assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back, vs);
    }

    #[test]
    fn short_row_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        std::fs::write(&p, "#dim=4\nuser\t0\t1,2,3,4\nuser\t1\t1,2,3\n").unwrap();
        let err = VectorStore::load(&p).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("dim=4"), "{err}");
    }

    #[test]
    fn full_scale_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        let vs = random_store(4096, 1);
        vs.save(&p).unwrap();
        assert_eq!(VectorStore::load(&p).unwrap().dim(), 4096);
    }

    #[test]
    fn lookup_and_fallbacks() {
        let mut vs = random_store(3, 2);
        let v = vs.get_vector(Scope::User, 4).unwrap();
        assert_eq!(v.values, vs.vectors[&(Scope::User, 4)]);
        assert!(matches!(vs.get_vector(Scope::User, 99), Err(Error::Lookup { .. })));
        vs.fallback = FallbackPolicy::Zero;
        assert_eq!(vs.get_vector(Scope::User, 99).unwrap().values, vec![0.0; 3]);
        let err = vs.get_vector(Scope::Scenario, 7).unwrap_err().to_string();
        assert!(err.contains("scenario 7"), "{err}");
    }
}
