//! Speaker-ID lookup table with a learned projection.
//!
//! Rows are trained jointly with the rest of the model unless external
//! d-vectors are imported, in which case the table is frozen.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f64>,
    pub projected: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SpeakerTable {
    table: ParamId,
    projection: Linear,
    num_speakers: usize,
}

impl SpeakerTable {
    pub fn new(init: &mut Init, num_speakers: usize, dim: usize, projected: usize) -> Self {
        Self {
            table: init.normal("speaker.table", num_speakers, dim, 0.1),
            projection: Linear::new(init, "speaker.proj", dim, projected),
            num_speakers,
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    fn check(&self, id: usize) -> Result<()> {
        if id >= self.num_speakers {
            return Err(Error::Lookup {
                id,
                size: self.num_speakers,
            });
        }
        Ok(())
    }

    /// Returns `(vectors [B x dim], projected [B x proj])` for a batch of ids.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<(Var, Var)> {
        for &id in ids {
            self.check(id)?;
        }
        let table = g.param(self.table);
        let vectors = g.gather_rows(table, ids);
        let projected = self.projection.forward(g, vectors);
        Ok((vectors, projected))
    }

    /// Stores an externally computed vector for `id` and freezes the table.
    pub fn import(&self, params: &mut ParamStore, id: usize, vector: &[f64]) -> Result<()> {
        self.check(id)?;
        let table = params.get_mut(self.table);
        if vector.len() != table.ncols() {
            return Err(Error::Shape(format!(
                "speaker vector has {} values, table expects {}",
                vector.len(),
                table.ncols()
            )));
        }
        table.row_mut(id).assign(&Array1::from(vector.to_vec()));
        params.set_trainable(self.table, false);
        Ok(())
    }

    /// Imports every row of a `[num_speakers x dim]` matrix.
    pub fn import_all(&self, params: &mut ParamStore, vectors: &Array2<f64>) -> Result<()> {
        if vectors.nrows() != self.num_speakers {
            return Err(Error::Shape(format!(
                "{} imported vectors for {} speakers",
                vectors.nrows(),
                self.num_speakers
            )));
        }
        for (id, row) in vectors.rows().into_iter().enumerate() {
            self.import(params, id, row.as_slice().expect("contiguous row"))?;
        }
        Ok(())
    }

    pub fn is_frozen(&self, params: &ParamStore) -> bool {
        !params.is_trainable(self.table)
    }

    pub fn table_param(&self) -> ParamId {
        self.table
    }
}

pub fn speaker_lookup(speaker_id: usize, table: &SpeakerTable, params: &ParamStore) -> Result<SpeakerEmbedding> {
    let mut g = Graph::eval(params);
    let (v, p) = table.forward(&mut g, &[speaker_id])?;
    Ok(SpeakerEmbedding {
        vector: g.value(v).row(0).to_owned(),
        projected: g.value(p).row(0).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_table() -> (ParamStore, SpeakerTable) {
        let mut store = ParamStore::new();
        let table = SpeakerTable::new(&mut Init::new(&mut store, 4), 33, 256, 64);
        (store, table)
    }

    #[test]
    fn lookup_is_deterministic_and_sized() {
        let (store, table) = grid_table();
        let a = speaker_lookup(0, &table, &store).unwrap();
        let b = speaker_lookup(0, &table, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 256);
        assert_eq!(a.projected.len(), 64);
    }

    #[test]
    fn grid_cardinality_bounds() {
        let (store, table) = grid_table();
        for id in 0..33 {
            assert!(speaker_lookup(id, &table, &store).is_ok());
        }
        assert!(matches!(
            speaker_lookup(33, &table, &store),
            Err(Error::Lookup { id: 33, size: 33 })
        ));
    }

    #[test]
    fn imported_vector_is_returned_exactly() {
        let (mut store, table) = grid_table();
        let v: Vec<f64> = (0..256).map(|i| (i as f64 * 0.731).sin()).collect();
        assert!(!table.is_frozen(&store));
        table.import(&mut store, 5, &v).unwrap();
        assert!(table.is_frozen(&store));
        let got = speaker_lookup(5, &table, &store).unwrap();
        assert_eq!(got.vector.to_vec(), v);
        assert!(table.import(&mut store, 5, &v[..10]).is_err());
    }

    #[test]
    fn projection_is_linear_in_vector() {
        let (mut store, table) = grid_table();
        let v1: Vec<f64> = (0..256).map(|i| i as f64 / 256.0).collect();
        let v2: Vec<f64> = v1.iter().map(|x| 2.0 * x).collect();
        table.import(&mut store, 0, &vec![0.0; 256]).unwrap();
        table.import(&mut store, 1, &v1).unwrap();
        table.import(&mut store, 2, &v2).unwrap();
        let p0 = speaker_lookup(0, &table, &store).unwrap().projected;
        let p1 = speaker_lookup(1, &table, &store).unwrap().projected;
        let p2 = speaker_lookup(2, &table, &store).unwrap().projected;
        // p(2v) - p(0) = 2 (p(v) - p(0))
        let lhs = &p2 - &p0;
        let rhs = (&p1 - &p0) * 2.0;
        assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
