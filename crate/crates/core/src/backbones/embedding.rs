use crate::data::{Batch, FeatureSchema};
use crate::error::{Error, Result};
use crate::gradcore::{DetRng, HasParams, Matrix, Parameter};

/// One `u_m × Dim` table per field; a sample's embedding is the concatenation
/// of its looked-up rows.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub tables: Vec<Parameter>,
    dim: usize,
    cache: Option<Vec<Vec<u32>>>,
}

impl EmbeddingLayer {
    pub fn new(schema: &FeatureSchema, rng: &mut DetRng) -> Self {
        let dim = schema.embedding_dim;
        let tables = schema
            .fields
            .iter()
            .map(|f| Parameter::glorot(format!("embedding.{}", f.name), f.cardinality, dim, rng))
            .collect();
        Self {
            tables,
            dim,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.tables.len() * self.dim
    }

    fn lookup(&self, rows: &[Vec<u32>]) -> Result<Matrix> {
        let m = self.tables.len();
        let mut out = Matrix::zeros(rows.len(), self.width());
        for (r, idx) in rows.iter().enumerate() {
            if idx.len() != m {
                return Err(Error::Dimension {
                    op: "embed",
                    left: (1, idx.len()),
                    right: (1, m),
                });
            }
            let dst = out.row_mut(r);
            for (f, (&i, table)) in idx.iter().zip(&self.tables).enumerate() {
                let i = i as usize;
                if i >= table.value.rows() {
                    return Err(Error::Validation(format!(
                        "{}: index {i} out of range (cardinality {})",
                        table.name,
                        table.value.rows()
                    )));
                }
                dst[f * self.dim..(f + 1) * self.dim].copy_from_slice(table.value.row(i));
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, batch: &Batch) -> Result<Matrix> {
        let rows: Vec<Vec<u32>> = batch.samples.iter().map(|s| s.features.clone()).collect();
        let out = self.lookup(&rows)?;
        self.cache = Some(rows);
        Ok(out)
    }

    /// Scatter-adds row gradients into the touched table rows.
    pub fn backward(&mut self, d_out: &Matrix) -> Result<()> {
        let rows = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("embedding: backward without forward".into()))?;
        if d_out.shape() != (rows.len(), self.width()) {
            return Err(Error::Dimension {
                op: "embed_backward",
                left: d_out.shape(),
                right: (rows.len(), self.width()),
            });
        }
        for (r, idx) in rows.iter().enumerate() {
            let g = d_out.row(r);
            for (f, &i) in idx.iter().enumerate() {
                let dst = self.tables[f].grad.row_mut(i as usize);
                for (d, s) in dst.iter_mut().zip(&g[f * self.dim..(f + 1) * self.dim]) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

impl HasParams for EmbeddingLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.tables.iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.tables.iter_mut().for_each(f);
    }
}
