//! Toy classification heads over a shared tile feature vector.
//!
//! A head is either a single linear layer or two linear layers with a
//! rectifier in between. The registry keeps several named variants per
//! taxonomy level so models can be assembled by picking one per level.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Level;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("feature vector has {got} entries, head expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("malformed head: {0}")]
    Malformed(String),
    #[error("no {level} head named `{name}`")]
    UnknownHead { level: Level, name: String },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x + bias`.
    fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| dot(self.row(r), x) + bias[r])
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear {
        weight: Matrix,
        bias: Vec<f64>,
    },
    TwoLayer {
        hidden: Matrix,
        hidden_bias: Vec<f64>,
        output: Matrix,
        output_bias: Vec<f64>,
    },
}

impl Head {
    pub fn linear(weight: Matrix) -> Self {
        let bias = vec![0.0; weight.rows];
        Head::Linear { weight, bias }
    }

    pub fn two_layer(hidden: Matrix, output: Matrix) -> Self {
        let hidden_bias = vec![0.0; hidden.rows];
        let output_bias = vec![0.0; output.rows];
        Head::TwoLayer {
            hidden,
            hidden_bias,
            output,
            output_bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Linear { weight, .. } => weight.cols,
            Head::TwoLayer { hidden, .. } => hidden.cols,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Head::Linear { weight, .. } => weight.rows,
            Head::TwoLayer { output, .. } => output.rows,
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let check = |m: &Matrix, bias: &[f64], what: &str| {
            if m.data.len() != m.rows * m.cols {
                return Err(HeadError::Malformed(format!(
                    "{what} matrix has {} entries for {}x{}",
                    m.data.len(),
                    m.rows,
                    m.cols
                )));
            }
            if bias.len() != m.rows {
                return Err(HeadError::Malformed(format!(
                    "{what} bias has {} entries for {} rows",
                    bias.len(),
                    m.rows
                )));
            }
            Ok(())
        };
        match self {
            Head::Linear { weight, bias } => check(weight, bias, "weight"),
            Head::TwoLayer {
                hidden,
                hidden_bias,
                output,
                output_bias,
            } => {
                check(hidden, hidden_bias, "hidden")?;
                check(output, output_bias, "output")?;
                if output.cols != hidden.rows {
                    return Err(HeadError::Malformed(format!(
                        "output layer takes {} inputs, hidden layer gives {}",
                        output.cols, hidden.rows
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>, HeadError> {
        if feature.len() != self.input_dim() {
            return Err(HeadError::DimensionMismatch {
                got: feature.len(),
                expected: self.input_dim(),
            });
        }
        Ok(match self {
            Head::Linear { weight, bias } => weight.affine(feature, bias),
            Head::TwoLayer {
                hidden,
                hidden_bias,
                output,
                output_bias,
            } => {
                let mut h = hidden.affine(feature, hidden_bias);
                for x in &mut h {
                    *x = x.max(0.0);
                }
                output.affine(&h, output_bias)
            }
        })
    }
}

/// Named head variants per taxonomy level, all reading the same feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRegistry {
    pub feature_dim: usize,
    heads: BTreeMap<Level, BTreeMap<String, Arc<Head>>>,
}

impl HeadRegistry {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            heads: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        level: Level,
        name: impl Into<String>,
        head: Head,
    ) -> Result<(), HeadError> {
        head.validate()?;
        if head.input_dim() != self.feature_dim {
            return Err(HeadError::DimensionMismatch {
                got: head.input_dim(),
                expected: self.feature_dim,
            });
        }
        self.heads
            .entry(level)
            .or_default()
            .insert(name.into(), Arc::new(head));
        Ok(())
    }

    pub fn get(&self, level: Level, name: &str) -> Result<&Arc<Head>, HeadError> {
        self.heads
            .get(&level)
            .and_then(|m| m.get(name))
            .ok_or_else(|| HeadError::UnknownHead {
                level,
                name: name.to_string(),
            })
    }

    pub fn names(&self, level: Level) -> impl Iterator<Item = &str> {
        self.heads
            .get(&level)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        for m in self.heads.values() {
            for h in m.values() {
                h.validate()?;
                if h.input_dim() != self.feature_dim {
                    return Err(HeadError::DimensionMismatch {
                        got: h.input_dim(),
                        expected: self.feature_dim,
                    });
                }
            }
        }
        Ok(())
    }

    /// Apply the named head of `level` to a feature vector.
    pub fn head_logits(
        &self,
        level: Level,
        name: &str,
        feature: &[f64],
    ) -> Result<Vec<f64>, HeadError> {
        self.get(level, name)?.forward(feature)
    }
}
