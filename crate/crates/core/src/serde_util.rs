//! JSON encodings for nalgebra values: matrices as row-major nested arrays,
//! vectors as flat arrays, polyhedra as `{ "a": [[..]], "b": [..] }`.

use nalgebra::{DMatrix, DVector};
use numkit::Polyhedron;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>, cols_hint: Option<usize>) -> Result<DMatrix<f64>, E> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).or(cols_hint).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(E::custom("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub mod mat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        rows_of(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        matrix_from_rows(Vec::<Vec<f64>>::deserialize(d)?, None)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn poly_to_repr(p: &Polyhedron) -> PolyRepr {
    PolyRepr {
        a: rows_of(&p.a),
        b: p.b.as_slice().to_vec(),
    }
}

fn poly_from_repr<E: serde::de::Error>(r: PolyRepr) -> Result<Polyhedron, E> {
    let a = matrix_from_rows::<E>(r.a, None)?;
    Polyhedron::new(a, DVector::from_vec(r.b)).map_err(E::custom)
}

pub mod opt_poly {
    use super::*;

    pub fn serialize<S: Serializer>(p: &Option<Polyhedron>, s: S) -> Result<S::Ok, S::Error> {
        p.as_ref().map(poly_to_repr).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Polyhedron>, D::Error> {
        Option::<PolyRepr>::deserialize(d)?.map(poly_from_repr).transpose()
    }
}
