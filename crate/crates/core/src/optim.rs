//! Adam with independent parameter groups whose rows can be compacted or
//! extended as Gaussians are pruned and created.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First/second moments for a group of equally sized parameter rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamGroup {
    stride: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamGroup {
    pub fn new(stride: usize, rows: usize) -> Self {
        Self {
            stride,
            m: vec![0.0; stride * rows],
            v: vec![0.0; stride * rows],
            step: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.stride
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before the row updates of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to `params` (one row) in place.
    pub fn update_row(&mut self, row: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.stride);
        debug_assert_eq!(grads.len(), self.stride);
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let base = row * self.stride;
        for k in 0..self.stride {
            let g = grads[k];
            let m = &mut self.m[base + k];
            let v = &mut self.v[base + k];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }

    /// Keeps only the rows whose flag is set, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.rows());
        let s = self.stride;
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for (row, &k) in keep.iter().enumerate() {
            if k {
                m.extend_from_slice(&self.m[row * s..(row + 1) * s]);
                v.extend_from_slice(&self.v[row * s..(row + 1) * s]);
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Appends `rows` rows of zeroed moments.
    pub fn extend_zeros(&mut self, rows: usize) {
        self.m.resize(self.m.len() + rows * self.stride, 0.0);
        self.v.resize(self.v.len() + rows * self.stride, 0.0);
    }

    pub fn moments(&self, row: usize) -> (&[f64], &[f64]) {
        let s = self.stride;
        (&self.m[row * s..(row + 1) * s], &self.v[row * s..(row + 1) * s])
    }
}
