//! `FGEMB1` embedding matrices.
//!
//! Layout (little-endian): 6-byte magic `FGEMB1`, `u32` rows, `u32` dim, then
//! `rows·dim` `f32` values. Row ids live in a sidecar `<file>.ids.jsonl` with
//! one `{"row": i, "id": "..."}` object per line.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::numerics::Tensor;

const MAGIC: &[u8; 6] = b"FGEMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    row: usize,
    id: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self, FormatError> {
        if data.len() != ids.len() * dim {
            return Err(FormatError::Invalid(format!(
                "{} values do not fill {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(FormatError::Invalid(format!("duplicate row id {id:?}")));
            }
        }
        Ok(Self { dim, data, ids, index })
    }

    /// Rows of a `[n, dim]` tensor, ids `"0".."n-1"`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, FormatError> {
        let n = t.rows();
        Self::new(t.row_len(), t.data().to_vec(), (0..n).map(|i| i.to_string()).collect())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows()).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).and_then(|&i| self.row(i))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.rows(), self.dim], self.data.clone()).expect("matrix shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parse the binary part; `ids` must have one entry per row.
    pub fn from_bytes(buf: &[u8], ids: Vec<String>) -> Result<Self, FormatError> {
        let (rows, dim, data) = parse_matrix(buf)?;
        if ids.len() != rows {
            return Err(FormatError::Invalid(format!("{} ids for {rows} rows", ids.len())));
        }
        Self::new(dim, data, ids)
    }

    pub fn ids_jsonl(&self) -> String {
        let mut s = String::new();
        for (row, id) in self.ids.iter().enumerate() {
            s.push_str(&serde_json::to_string(&IdLine { row, id: id.clone() }).expect("id line"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes())?;
        let mut f = std::fs::File::create(sidecar_path(path))?;
        f.write_all(self.ids_jsonl().as_bytes())?;
        Ok(())
    }

    /// Load a matrix and its sidecar. Without a sidecar rows are named by index.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let buf = std::fs::read(path)?;
        let (rows, dim, data) = parse_matrix(&buf)?;
        let side = sidecar_path(path);
        let ids = if side.exists() {
            parse_ids(&std::fs::read_to_string(side)?, rows)?
        } else {
            (0..rows).map(|i| i.to_string()).collect()
        };
        Self::new(dim, data, ids)
    }
}

fn parse_matrix(buf: &[u8]) -> Result<(usize, usize, Vec<f32>), FormatError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic { expected: "FGEMB1" });
    }
    let header = buf.get(6..14).ok_or(FormatError::Truncated { what: "header" })?;
    let rows = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let n = rows.checked_mul(dim).and_then(|n| n.checked_mul(4));
    let body = &buf[14..];
    match n {
        Some(n) if n == body.len() => {}
        Some(n) if n > body.len() => return Err(FormatError::Truncated { what: "embedding data" }),
        Some(_) => return Err(FormatError::Invalid("trailing bytes after embedding data".into())),
        None => return Err(FormatError::Invalid("embedding size overflows".into())),
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

fn parse_ids(text: &str, rows: usize) -> Result<Vec<String>, FormatError> {
    let mut ids: Vec<Option<String>> = vec![None; rows];
    let mut count = 0;
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: IdLine = serde_json::from_str(line)
            .map_err(|e| FormatError::Invalid(format!("id sidecar line {}: {e}", lineno + 1)))?;
        let slot = ids
            .get_mut(l.row)
            .ok_or_else(|| FormatError::Invalid(format!("id sidecar row {} out of range ({rows} rows)", l.row)))?;
        if slot.replace(l.id).is_some() {
            return Err(FormatError::Invalid(format!("id sidecar repeats row {}", l.row)));
        }
        count += 1;
    }
    if count != rows {
        return Err(FormatError::Invalid(format!("id sidecar has {count} lines for {rows} rows")));
    }
    Ok(ids.into_iter().map(|s| s.expect("counted")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_matrix_round_trips() {
        let m = EmbeddingMatrix::new(7, vec![], vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.fgemb");
        m.save(&p).unwrap();
        let back = EmbeddingMatrix::load(&p).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.dim(), 7);
    }

    #[test]
    fn sidecar_mismatch_is_a_format_error() {
        let m = EmbeddingMatrix::new(2, vec![1.0, 2.0, 3.0, 4.0], vec!["a".into(), "b".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.fgemb");
        m.save(&p).unwrap();
        std::fs::write(sidecar_path(&p), "{\"row\":0,\"id\":\"a\"}\n").unwrap();
        assert!(matches!(EmbeddingMatrix::load(&p), Err(FormatError::Invalid(_))));
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes, vec!["a".into(), "b".into()]),
            Err(FormatError::Truncated { .. })
        ));
        assert_eq!(m.row_by_id("b").unwrap(), &[3.0, 4.0]);
    }
}
