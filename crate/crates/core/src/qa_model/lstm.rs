//! LSTM cell, unrolled forward pass and backpropagation through time.
//!
//! Gate pre-activations are stacked in the order input, forget, cell
//! candidate, output, so every weight matrix has `4 * hidden` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `4h × input_dim`, row-major.
    pub w_input: Vec<f64>,
    /// `4h × h`, row-major.
    pub w_recurrent: Vec<f64>,
    /// `4h`.
    pub bias: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w_input: vec![0.0; 4 * hidden * input_dim],
            w_recurrent: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with
    /// `fan_in = input_dim + hidden`.
    pub fn init_uniform<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input_dim + hidden) as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden);
        for v in p
            .w_input
            .iter_mut()
            .chain(p.w_recurrent.iter_mut())
            .chain(p.bias.iter_mut())
        {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    /// Input weights, recurrent weights, bias.
    pub(crate) fn tensors(&self) -> [&Vec<f64>; 3] {
        [&self.w_input, &self.w_recurrent, &self.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.w_input, &mut self.w_recurrent, &mut self.bias]
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Runs the cell over `inputs` in the given order, from a zero state.
    pub fn run<'a>(&self, inputs: impl IntoIterator<Item = &'a [f64]>) -> Trace {
        let h = self.hidden;
        let mut trace = Trace::default();
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in inputs {
            debug_assert_eq!(x.len(), self.input_dim);
            let mut z = self.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                *zr += dot(&self.w_input[r * self.input_dim..(r + 1) * self.input_dim], x)
                    + dot(&self.w_recurrent[r * h..(r + 1) * h], &h_prev);
            }
            let mut step = Step {
                x: x.to_vec(),
                h_prev: h_prev.clone(),
                c_prev: c_prev.clone(),
                gates: vec![0.0; 4 * h],
                c: vec![0.0; h],
                tanh_c: vec![0.0; h],
                h: vec![0.0; h],
            };
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                let c = f * c_prev[k] + i * g;
                let tc = c.tanh();
                step.gates[k] = i;
                step.gates[h + k] = f;
                step.gates[2 * h + k] = g;
                step.gates[3 * h + k] = o;
                step.c[k] = c;
                step.tanh_c[k] = tc;
                step.h[k] = o * tc;
            }
            h_prev.clone_from(&step.h);
            c_prev.clone_from(&step.c);
            trace.steps.push(step);
        }
        trace
    }

    /// Backpropagation through time.
    ///
    /// `dh[t]` is the loss gradient with respect to the hidden state emitted
    /// at step `t` (processing order). Parameter gradients are accumulated
    /// into `grads`; the returned vectors are gradients with respect to each
    /// step's input.
    pub fn backward(&self, trace: &Trace, dh: &[Vec<f64>], grads: &mut Self) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let d = self.input_dim;
        let n = trace.steps.len();
        debug_assert_eq!(dh.len(), n);
        let mut dx_all = vec![vec![0.0; d]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];

        for t in (0..n).rev() {
            let s = &trace.steps[t];
            for k in 0..h {
                let dh_k = dh[t][k] + dh_next[k];
                let i = s.gates[k];
                let f = s.gates[h + k];
                let g = s.gates[2 * h + k];
                let o = s.gates[3 * h + k];
                let tc = s.tanh_c[k];
                let dc = dh_k * o * (1.0 - tc * tc) + dc_next[k];
                dz[k] = dc * g * i * (1.0 - i);
                dz[h + k] = dc * s.c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - g * g);
                dz[3 * h + k] = dh_k * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }

            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dx = &mut dx_all[t];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                grads.bias[r] += dzr;
                let wi = &self.w_input[r * d..(r + 1) * d];
                let gwi = &mut grads.w_input[r * d..(r + 1) * d];
                for c in 0..d {
                    gwi[c] += dzr * s.x[c];
                    dx[c] += dzr * wi[c];
                }
                let wr = &self.w_recurrent[r * h..(r + 1) * h];
                let gwr = &mut grads.w_recurrent[r * h..(r + 1) * h];
                for c in 0..h {
                    gwr[c] += dzr * s.h_prev[c];
                    dh_next[c] += dzr * wr[c];
                }
            }
        }
        dx_all
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, stacked i, f, g, o.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Cached activations of one unrolled pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub steps: Vec<Step>,
}
