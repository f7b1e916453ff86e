use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use super::{EmbeddingMatrix, EncoderError};
use crate::annotations::FrameRef;
use crate::numerics::Tensor;

/// Resolves frame references to `[tokens, input_dim]` token grids.
///
/// `emb:<row>` refers to a row of a packed matrix whose rows are flattened
/// grids; a path refers to an `FGEMB1` file with one row per token, relative
/// to `base_dir`.
#[derive(Debug)]
pub struct FrameStore {
    packed: Option<EmbeddingMatrix>,
    base_dir: PathBuf,
    tokens: usize,
    input_dim: usize,
    files: RwLock<HashMap<String, Tensor<f32>>>,
}

impl FrameStore {
    pub fn new(packed: Option<EmbeddingMatrix>, base_dir: impl Into<PathBuf>, tokens: usize, input_dim: usize) -> Self {
        Self {
            packed,
            base_dir: base_dir.into(),
            tokens,
            input_dim,
            files: RwLock::new(HashMap::new()),
        }
    }

    pub fn packed(matrix: EmbeddingMatrix, tokens: usize, input_dim: usize) -> Self {
        Self::new(Some(matrix), PathBuf::new(), tokens, input_dim)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn grid(&self, frame: &FrameRef) -> Result<Tensor<f32>, EncoderError> {
        let shape_err = |got: Vec<usize>| EncoderError::FrameShape {
            frame: frame.to_string(),
            tokens: self.tokens,
            dim: self.input_dim,
            got,
        };
        match frame {
            FrameRef::Row(i) => {
                let m = self.packed.as_ref().ok_or_else(|| EncoderError::MissingFrame(frame.to_string()))?;
                let row = m.row(*i).ok_or_else(|| EncoderError::MissingFrame(frame.to_string()))?;
                if row.len() != self.tokens * self.input_dim {
                    return Err(shape_err(vec![row.len()]));
                }
                Ok(Tensor::new(vec![self.tokens, self.input_dim], row.to_vec())?)
            }
            FrameRef::Path(p) => {
                if let Some(t) = self.files.read().expect("frame cache").get(p) {
                    return Ok(t.clone());
                }
                let full: PathBuf = if Path::new(p).is_absolute() { p.into() } else { self.base_dir.join(p) };
                if !full.exists() {
                    return Err(EncoderError::MissingFrame(frame.to_string()));
                }
                let m = EmbeddingMatrix::load(&full)?;
                if m.rows() != self.tokens || m.dim() != self.input_dim {
                    return Err(shape_err(vec![m.rows(), m.dim()]));
                }
                let t = m.to_tensor();
                self.files.write().expect("frame cache").insert(p.clone(), t.clone());
                Ok(t)
            }
        }
    }
}
