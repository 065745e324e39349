//! Adaptive-moment optimizer with lazy per-row updates for embedding tables.
//!
//! Dense tensors take a classic step each batch. Embedding tables only see
//! gradients for the rows a batch touched, so moments and step counts are
//! kept per row — an untouched row's state is bitwise unchanged, which keeps
//! a 2¹⁶-row table affordable on every step.

use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorMoments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct VectorMoments {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseMoments {
    pub w: TensorMoments,
    pub b: VectorMoments,
}

#[derive(Debug, Clone)]
pub struct TableMoments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-row step count for bias correction.
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Global step count for dense tensors.
    pub step: u64,
    pub dense: Vec<DenseMoments>,
    pub tables: Vec<TableMoments>,
}

impl AdamState {
    pub fn new(
        config: AdamConfig,
        dense_shapes: &[(usize, usize)],
        table_shapes: &[(usize, usize)],
    ) -> AdamState {
        AdamState {
            config,
            step: 0,
            dense: dense_shapes
                .iter()
                .map(|&(out, inp)| DenseMoments {
                    w: TensorMoments {
                        m: Array2::zeros((out, inp)),
                        v: Array2::zeros((out, inp)),
                    },
                    b: VectorMoments {
                        m: Array1::zeros(out),
                        v: Array1::zeros(out),
                    },
                })
                .collect(),
            tables: table_shapes
                .iter()
                .map(|&(rows, width)| TableMoments {
                    m: Array2::zeros((rows, width)),
                    v: Array2::zeros((rows, width)),
                    steps: vec![0; rows],
                })
                .collect(),
        }
    }

    /// One Adam step for a dense tensor pair `(w, b)` at slot `idx`.
    /// `step` must already be advanced by the caller for this batch.
    pub fn apply_dense(
        &mut self,
        idx: usize,
        w: &mut Array2<f64>,
        b: &mut Array1<f64>,
        gw: &Array2<f64>,
        gb: &Array1<f64>,
    ) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let slot = &mut self.dense[idx];

        azip_update(&mut slot.w.m, &mut slot.w.v, gw, beta1, beta2);
        ndarray::Zip::from(w)
            .and(&slot.w.m)
            .and(&slot.w.v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });

        ndarray::Zip::from(&mut slot.b.m)
            .and(&mut slot.b.v)
            .and(gb)
            .for_each(|m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
        ndarray::Zip::from(b)
            .and(&slot.b.m)
            .and(&slot.b.v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
    }

    /// Lazy Adam over the touched rows of table `idx`.
    pub fn apply_table(
        &mut self,
        idx: usize,
        table: &mut Array2<f64>,
        row_grads: &BTreeMap<usize, Array1<f64>>,
    ) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let slot = &mut self.tables[idx];
        for (&row, g) in row_grads {
            slot.steps[row] += 1;
            let t = slot.steps[row] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let mut m = slot.m.row_mut(row);
            let mut v = slot.v.row_mut(row);
            let mut p = table.row_mut(row);
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
    }
}

fn azip_update(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    g: &Array2<f64>,
    beta1: f64,
    beta2: f64,
) {
    ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
    });
}
