//! Answer-selection scorer for (bug report, patch description) pairs.
//!
//! Both texts go through the same bidirectional LSTM. Every description
//! position then attends over the bug-report positions; the bug-report
//! states and the attended vectors are flattened and compared by cosine
//! similarity, squashed by a sigmoid:
//!
//! ```text
//! e_b = BiLSTM(bug)            e_c = BiLSTM(description)
//! alpha_j = softmax(e_b · e_c[j])   over unmasked bug positions
//! att_j   = sum_n alpha_j[n] · e_b[n]
//! score   = sigmoid(cosine(flatten(e_b), flatten(att)))
//! ```
//!
//! Padding never enters the recurrence: each direction only runs over the
//! real tokens, and padded rows are zero in every flattened vector.
//! The score is therefore confined to `[sigmoid(-1), sigmoid(1)]`.

mod adam;
pub mod checkpoint;
mod lstm;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::SequenceMatrix;

pub use adam::Adam;
pub use lstm::{LstmCellParams, Trace};

use lstm::sigmoid;

/// Lower bound of [`QaModel::score`], `sigmoid(-1)`.
pub const SCORE_MIN: f64 = 0.268_941_421_369_995_1;
/// Upper bound of [`QaModel::score`], `sigmoid(1)`.
pub const SCORE_MAX: f64 = 0.731_058_578_630_004_9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: model expects {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("sequence length mismatch: model expects {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("all attention positions are masked")]
    AllMasked,
    #[error("attention shapes disagree: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training needs at least one example")]
    NoExamples,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub max_seq_len: usize,
    /// Hidden units per direction; encoded rows are twice as wide.
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 64,
            hidden_size: 16,
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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
        let mut m = Self::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged rows");
            m.row_mut(r).copy_from_slice(row);
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One (bug report, description) pair in model input form.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchExample {
    pub bug: SequenceMatrix,
    pub description: SequenceMatrix,
    /// `true` when the description answers the bug report.
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub label: bool,
    pub score: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Softmax of `e_b · query` over the unmasked rows of `e_b`. Masked
/// positions get weight zero.
pub fn attention_weights(e_b: &Matrix, query: &[f64], mask: &[bool]) -> Result<Vec<f64>, ModelError> {
    if query.len() != e_b.cols || mask.len() != e_b.rows {
        return Err(ModelError::Shape(format!(
            "e_b is {}x{}, query has {} entries, mask has {}",
            e_b.rows,
            e_b.cols,
            query.len(),
            mask.len()
        )));
    }
    let logits: Vec<f64> = (0..e_b.rows)
        .map(|n| {
            if mask[n] {
                dot(e_b.row(n), query)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ModelError::AllMasked);
    }
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Weighted sum of the rows of `e_b`.
pub fn attention_apply(alpha: &[f64], e_b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; e_b.cols];
    for (n, &a) in alpha.iter().enumerate().take(e_b.rows) {
        if a != 0.0 {
            axpy(a, e_b.row(n), &mut out);
        }
    }
    out
}

/// Binary cross-entropy of a probability against a 0/1 label.
/// Cosine of two flattened sequences. The shorter one is treated as
/// zero-padded; a zero-norm side gives 0.
pub fn cosine(re_b: &[f64], re_c: &[f64]) -> f64 {
    let nb = dot(re_b, re_b).sqrt();
    let nc = dot(re_c, re_c).sqrt();
    if nb > 0.0 && nc > 0.0 {
        // Rounding can push a parallel pair just past 1.
        (dot(re_b, re_c) / (nb * nc)).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// `sigmoid(cosine(re_b, re_c))`.
pub fn cosine_score(re_b: &[f64], re_c: &[f64]) -> f64 {
    sigmoid(cosine(re_b, re_c))
}

pub fn bce_loss(score: f64, label: bool) -> f64 {
    if label {
        -score.ln()
    } else {
        -(1.0 - score).ln()
    }
}

/// Derivative of [`bce_loss`] with respect to `score`.
pub fn bce_grad(score: f64, label: bool) -> f64 {
    if label {
        -1.0 / score
    } else {
        1.0 / (1.0 - score)
    }
}

/// BiLSTM output over the real tokens of one sequence.
struct Encoded {
    len: usize,
    forward: Trace,
    backward: Trace,
    /// `len` rows of `2 * hidden`: forward state then backward state.
    rows: Vec<Vec<f64>>,
}

/// Cached activations of one scored example.
pub struct ForwardPass {
    bug: Encoded,
    desc: Encoded,
    /// `alphas[j]` are the weights of description position `j` over the
    /// bug positions.
    alphas: Vec<Vec<f64>>,
    attended: Vec<Vec<f64>>,
    norm_bug: f64,
    norm_desc: f64,
    pub cosine: f64,
    pub score: f64,
}

/// Per-parameter gradients, shaped like the model's two cells.
#[derive(Debug, Clone, PartialEq)]
pub struct QaGradients {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl QaGradients {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            forward: LstmCellParams::zeros(input_dim, hidden),
            backward: LstmCellParams::zeros(input_dim, hidden),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.forward.add_assign(&other.forward);
        self.backward.add_assign(&other.backward);
    }

    fn scale(&mut self, k: f64) {
        self.forward.scale(k);
        self.backward.scale(k);
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.forward
            .tensors()
            .into_iter()
            .chain(self.backward.tensors())
            .collect()
    }
}

/// Gradients of one example's loss.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub loss: f64,
    pub score: f64,
    pub params: QaGradients,
    /// Same layout as `BatchExample::bug.rows`.
    pub bug_input: Vec<f64>,
    /// Same layout as `BatchExample::description.rows`.
    pub description_input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch, measured before each batch update.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    /// Shared by the bug report and the description.
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

pub const TENSOR_NAMES: [&str; 6] = [
    "forward.w_input",
    "forward.w_recurrent",
    "forward.bias",
    "backward.w_input",
    "backward.w_recurrent",
    "backward.bias",
];

impl QaModel {
    /// Randomly initialized model; the config seed drives initialization.
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(ModelError::InvalidConfig("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_size;
        let forward = LstmCellParams::init_uniform(input_dim, h, &mut rng);
        let backward = LstmCellParams::init_uniform(input_dim, h, &mut rng);
        Ok(Self {
            config,
            input_dim,
            forward,
            backward,
        })
    }

    pub fn zeros(config: ModelConfig, input_dim: usize) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden_size;
        Ok(Self {
            forward: LstmCellParams::zeros(input_dim, h),
            backward: LstmCellParams::zeros(input_dim, h),
            config,
            input_dim,
        })
    }

    /// Width of an encoded row.
    pub fn output_dim(&self) -> usize {
        2 * self.config.hidden_size
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.forward
            .tensors()
            .into_iter()
            .chain(self.backward.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.forward
            .tensors_mut()
            .into_iter()
            .chain(self.backward.tensors_mut())
            .collect()
    }

    fn check(&self, m: &SequenceMatrix) -> Result<(), ModelError> {
        if m.dim != self.input_dim {
            return Err(ModelError::DimMismatch {
                expected: self.input_dim,
                found: m.dim,
            });
        }
        if m.max_len() != self.config.max_seq_len {
            return Err(ModelError::LengthMismatch {
                expected: self.config.max_seq_len,
                found: m.max_len(),
            });
        }
        Ok(())
    }

    fn encode(&self, m: &SequenceMatrix) -> Encoded {
        let len = m.len();
        let forward = self.forward.run((0..len).map(|t| m.row(t)));
        let backward = self.backward.run((0..len).rev().map(|t| m.row(t)));
        let rows = (0..len)
            .map(|t| {
                let mut r = forward.steps[t].h.clone();
                r.extend_from_slice(&backward.steps[len - 1 - t].h);
                r
            })
            .collect();
        Encoded {
            len,
            forward,
            backward,
            rows,
        }
    }

    /// `max_seq_len × 2·hidden` encoding; padded rows are zero.
    pub fn bilstm_forward(&self, m: &SequenceMatrix) -> Result<Matrix, ModelError> {
        self.check(m)?;
        let enc = self.encode(m);
        let mut out = Matrix::zeros(m.max_len(), self.output_dim());
        for (t, r) in enc.rows.iter().enumerate() {
            out.row_mut(t).copy_from_slice(r);
        }
        Ok(out)
    }

    pub fn forward_pass(&self, ex: &BatchExample) -> Result<ForwardPass, ModelError> {
        self.check(&ex.bug)?;
        self.check(&ex.description)?;
        let bug = self.encode(&ex.bug);
        let desc = self.encode(&ex.description);
        let e_b = Matrix::from_rows(&bug.rows);
        let mask = vec![true; bug.len];

        let mut alphas = Vec::with_capacity(desc.len);
        let mut attended = Vec::with_capacity(desc.len);
        for query in &desc.rows {
            if bug.len == 0 {
                alphas.push(Vec::new());
                attended.push(vec![0.0; self.output_dim()]);
                continue;
            }
            let alpha = attention_weights(&e_b, query, &mask)?;
            attended.push(attention_apply(&alpha, &e_b));
            alphas.push(alpha);
        }

        let re_b: Vec<f64> = bug.rows.concat();
        let re_c: Vec<f64> = attended.concat();
        let norm_bug = dot(&re_b, &re_b).sqrt();
        let norm_desc = dot(&re_c, &re_c).sqrt();
        let cosine = cosine(&re_b, &re_c);
        Ok(ForwardPass {
            bug,
            desc,
            alphas,
            attended,
            norm_bug,
            norm_desc,
            cosine,
            score: sigmoid(cosine),
        })
    }

    /// Match probability in `[SCORE_MIN, SCORE_MAX]`.
    pub fn score(&self, ex: &BatchExample) -> Result<f64, ModelError> {
        Ok(self.forward_pass(ex)?.score)
    }

    /// `label = score >= threshold`.
    pub fn predict(&self, ex: &BatchExample, threshold: f64) -> Result<Prediction, ModelError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ModelError::InvalidThreshold(threshold));
        }
        let score = self.score(ex)?;
        Ok(Prediction {
            label: score >= threshold,
            score,
        })
    }

    /// Backpropagates `d_cosine` (the loss gradient with respect to the
    /// cosine) through attention and both BiLSTM passes.
    fn backward_pass(&self, fp: &ForwardPass, d_cosine: f64) -> (QaGradients, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let h = self.config.hidden_size;
        let width = self.output_dim();
        let mut grads = QaGradients::zeros(self.input_dim, h);
        let lb = fp.bug.len;
        let lc = fp.desc.len;
        let mut g_bug = vec![vec![0.0; width]; lb];
        let mut g_desc = vec![vec![0.0; width]; lc];

        if fp.norm_bug > 0.0 && fp.norm_desc > 0.0 && d_cosine != 0.0 {
            let inv = 1.0 / (fp.norm_bug * fp.norm_desc);
            let kb = fp.cosine / (fp.norm_bug * fp.norm_bug);
            let kc = fp.cosine / (fp.norm_desc * fp.norm_desc);
            let zero = vec![0.0; width];

            for (t, g) in g_bug.iter_mut().enumerate() {
                let att = fp.attended.get(t).unwrap_or(&zero);
                let e = &fp.bug.rows[t];
                for k in 0..width {
                    g[k] = d_cosine * (att[k] * inv - kb * e[k]);
                }
            }
            let g_att: Vec<Vec<f64>> = (0..lc)
                .map(|j| {
                    let e = fp.bug.rows.get(j).unwrap_or(&zero);
                    let att = &fp.attended[j];
                    (0..width)
                        .map(|k| d_cosine * (e[k] * inv - kc * att[k]))
                        .collect()
                })
                .collect();

            if lb > 0 {
                for j in 0..lc {
                    let alpha = &fp.alphas[j];
                    let ga: Vec<f64> = fp.bug.rows.iter().map(|e| dot(&g_att[j], e)).collect();
                    let mean: f64 = alpha.iter().zip(&ga).map(|(a, g)| a * g).sum();
                    let query = &fp.desc.rows[j];
                    for n in 0..lb {
                        axpy(alpha[n], &g_att[j], &mut g_bug[n]);
                        let g_logit = alpha[n] * (ga[n] - mean);
                        if g_logit != 0.0 {
                            axpy(g_logit, query, &mut g_bug[n]);
                            axpy(g_logit, &fp.bug.rows[n], &mut g_desc[j]);
                        }
                    }
                }
            }
        }

        let bug_dx = self.backward_bilstm(&fp.bug, &g_bug, &mut grads);
        let desc_dx = self.backward_bilstm(&fp.desc, &g_desc, &mut grads);
        (grads, bug_dx, desc_dx)
    }

    fn backward_bilstm(&self, enc: &Encoded, g_rows: &[Vec<f64>], grads: &mut QaGradients) -> Vec<Vec<f64>> {
        let h = self.config.hidden_size;
        let len = enc.len;
        let dh_fwd: Vec<Vec<f64>> = g_rows.iter().map(|g| g[..h].to_vec()).collect();
        let dh_bwd: Vec<Vec<f64>> = (0..len).map(|k| g_rows[len - 1 - k][h..].to_vec()).collect();
        let mut dx = self.forward.backward(&enc.forward, &dh_fwd, &mut grads.forward);
        let dx_bwd = self.backward.backward(&enc.backward, &dh_bwd, &mut grads.backward);
        for (k, g) in dx_bwd.iter().enumerate() {
            axpy(1.0, g, &mut dx[len - 1 - k]);
        }
        dx
    }

    /// Loss, score and all gradients for one example.
    pub fn example_gradients(&self, ex: &BatchExample) -> Result<ExampleGradients, ModelError> {
        let fp = self.forward_pass(ex)?;
        // d(BCE)/d(cosine) through the sigmoid simplifies to score - label.
        let d_cosine = fp.score - if ex.label { 1.0 } else { 0.0 };
        let (params, bug_dx, desc_dx) = self.backward_pass(&fp, d_cosine);
        let flatten = |dx: Vec<Vec<f64>>, m: &SequenceMatrix| {
            let mut out = vec![0.0; m.rows.len()];
            for (t, g) in dx.into_iter().enumerate() {
                out[t * m.dim..(t + 1) * m.dim].copy_from_slice(&g);
            }
            out
        };
        Ok(ExampleGradients {
            loss: bce_loss(fp.score, ex.label),
            score: fp.score,
            params,
            bug_input: flatten(bug_dx, &ex.bug),
            description_input: flatten(desc_dx, &ex.description),
        })
    }

    /// Mean loss and mean parameter gradients over `batch`, summed in order.
    pub fn batch_gradients(&self, batch: &[&BatchExample]) -> Result<(f64, QaGradients), ModelError> {
        let per: Vec<ExampleGradients> = batch
            .par_iter()
            .map(|ex| self.example_gradients(ex))
            .collect::<Result<_, _>>()?;
        let mut total = QaGradients::zeros(self.input_dim, self.config.hidden_size);
        let mut loss = 0.0;
        for g in &per {
            total.add_assign(&g.params);
            loss += g.loss;
        }
        let k = 1.0 / batch.len() as f64;
        total.scale(k);
        Ok((loss * k, total))
    }

    /// Mini-batch Adam over shuffled examples for `config.epochs` epochs.
    /// Deterministic for a fixed config seed.
    pub fn train(&mut self, examples: &[BatchExample]) -> Result<TrainReport, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::NoExamples);
        }
        for ex in examples {
            self.check(&ex.bug)?;
            self.check(&ex.description)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        // Stream 0 initialized the parameters.
        rng.set_stream(1);
        let mut adam = Adam::new(self.config.learning_rate);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut loss_history = Vec::with_capacity(self.config.epochs);

        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<&BatchExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let (loss, grads) = self.batch_gradients(&batch)?;
                let finite = loss.is_finite() && grads.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
                if !finite {
                    return Err(ModelError::NonFiniteLoss { epoch, batch: b });
                }
                epoch_loss += loss * chunk.len() as f64;
                let grad_refs = grads.tensors();
                adam.update(&mut self.tensors_mut(), &grad_refs);
            }
            loss_history.push(epoch_loss / examples.len() as f64);
        }
        Ok(TrainReport { loss_history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, len: usize, dim: usize, max_len: usize) -> SequenceMatrix {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        SequenceMatrix::from_rows(&rows, dim, max_len)
    }

    fn small_config(hidden: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            max_seq_len: max_len,
            hidden_size: hidden,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.max_seq_len, c.hidden_size, c.epochs, c.batch_size), (64, 16, 10, 128));
        assert_eq!(c.learning_rate, 0.01);
        assert!(ModelConfig { epochs: 0, ..c }.validate().is_err());
    }

    #[test]
    fn zero_model_on_zero_input_is_zero() {
        let model = QaModel::zeros(small_config(4, 6), 3).unwrap();
        let m = SequenceMatrix::from_rows(&vec![vec![0.0; 3]; 6], 3, 6);
        let e = model.bilstm_forward(&m).unwrap();
        assert!(e.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_at_default_config() {
        let model = QaModel::new(ModelConfig::default(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 10, 8, 64);
        let e = model.bilstm_forward(&m).unwrap();
        assert_eq!((e.rows, e.cols), (64, 32));
        assert!((10..64).all(|t| e.row(t).iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = QaModel::new(small_config(2, 4), 3).unwrap();
        let m = SequenceMatrix::from_rows(&[vec![1.0; 5]], 5, 4);
        assert!(matches!(
            model.bilstm_forward(&m),
            Err(ModelError::DimMismatch { expected: 3, found: 5 })
        ));
    }

    #[test]
    fn reversal_swaps_directions_when_cells_are_tied() {
        let mut model = QaModel::new(small_config(3, 3), 4).unwrap();
        model.backward = model.forward.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let a = model.bilstm_forward(&SequenceMatrix::from_rows(&rows, 4, 3)).unwrap();
        let b = model.bilstm_forward(&SequenceMatrix::from_rows(&reversed, 4, 3)).unwrap();
        for t in 0..3 {
            let ra = a.row(t);
            let rb = b.row(2 - t);
            for k in 0..3 {
                assert!((ra[k] - rb[3 + k]).abs() < 1e-15);
                assert!((ra[3 + k] - rb[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_edge_cases() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let alpha = attention_weights(&e, &[0.3, -0.7], &[true; 3]).unwrap();
        assert!(alpha.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));

        let alpha = attention_weights(&e, &[0.3, -0.7], &[false, true, false]).unwrap();
        assert_eq!(alpha, vec![0.0, 1.0, 0.0]);

        assert!(matches!(
            attention_weights(&e, &[0.3, -0.7], &[false; 3]),
            Err(ModelError::AllMasked)
        ));
        assert!(attention_weights(&e, &[0.3], &[true; 3]).is_err());
    }

    #[test]
    fn attention_matches_brute_force_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let q: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e = Matrix::from_rows(&rows);
            let alpha = attention_weights(&e, &q, &[true; 3]).unwrap();
            // Direct exp-normalize, no max shift.
            let exps: Vec<f64> = rows.iter().map(|r| (r[0] * q[0] + r[1] * q[1]).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (a, x) in alpha.iter().zip(&exps) {
                assert!((a - x / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_apply_cases() {
        let rows = vec![vec![1.0, 0.0], vec![2.0, 5.0], vec![-4.0, 3.0]];
        let e = Matrix::from_rows(&rows);
        assert_eq!(attention_apply(&[0.0, 0.0, 1.0], &e), rows[2]);
        let uniform = attention_apply(&[0.5, 0.5, 0.0], &e);
        assert_eq!(uniform, vec![1.5, 2.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|a| a / s).collect();
        let got = attention_apply(&alpha, &e);
        for k in 0..2 {
            let brute = alpha[0] * rows[0][k] + alpha[1] * rows[1][k] + alpha[2] * rows[2][k];
            assert!((got[k] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_values_and_gradient() {
        assert!((bce_loss(0.5, true) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.5, false) - 2f64.ln()).abs() < 1e-15);
        let h = 1e-6;
        let fd = (bce_loss(0.5 + h, true) - bce_loss(0.5 - h, true)) / (2.0 * h);
        assert!((fd - -2.0).abs() < 1e-6);
        assert_eq!(bce_grad(0.5, true), -2.0);
    }

    #[test]
    fn predict_tie_goes_to_correct_and_rejects_bad_threshold() {
        let model = QaModel::new(small_config(2, 4), 2).unwrap();
        let ex = BatchExample {
            bug: SequenceMatrix::from_rows(&[], 2, 4),
            description: SequenceMatrix::from_rows(&[vec![1.0, 1.0]], 2, 4),
            label: true,
        };
        // Empty bug report: cosine is defined as 0, so the score is exactly 0.5.
        let p = model.predict(&ex, 0.5).unwrap();
        assert_eq!(p.score, 0.5);
        assert!(p.label);
        assert!(!model.predict(&ex, 0.9).unwrap().label);
        assert!(model.predict(&ex, 1.5).is_err());
    }

    #[test]
    fn score_bounds_constants() {
        assert!((SCORE_MIN - sigmoid(-1.0)).abs() < 1e-16);
        assert!((SCORE_MAX - sigmoid(1.0)).abs() < 1e-16);
    }

    fn batch_loss(model: &QaModel, batch: &[&BatchExample]) -> f64 {
        batch
            .iter()
            .map(|ex| bce_loss(model.score(ex).unwrap(), ex.label))
            .sum::<f64>()
            / batch.len() as f64
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    fn two_example_batch(seed: u64) -> (QaModel, Vec<BatchExample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = QaModel::new(small_config(3, 5), 4).unwrap();
        let examples = vec![
            BatchExample {
                bug: random_matrix(&mut rng, 5, 4, 5),
                description: random_matrix(&mut rng, 4, 4, 5),
                label: true,
            },
            BatchExample {
                bug: random_matrix(&mut rng, 3, 4, 5),
                description: random_matrix(&mut rng, 5, 4, 5),
                label: false,
            },
        ];
        (model, examples)
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let h = 1e-4;
        let (model, examples) = two_example_batch(21);
        let batch: Vec<&BatchExample> = examples.iter().collect();
        let (_, grads) = model.batch_gradients(&batch).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().cloned().collect();
        for (ti, (name, tensor)) in TENSOR_NAMES.iter().zip(&analytic).enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti][i] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti][i] -= h;
                let numeric = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
                // Entries this small are below the difference quotient's own noise.
                if a.abs().max(numeric.abs()) < 1e-7 {
                    continue;
                }
                assert!(rel_err(a, numeric) < 1e-3, "{name}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn input_gradients_match_central_differences() {
        let h = 1e-4;
        let (model, examples) = two_example_batch(22);
        for ex in &examples {
            let g = model.example_gradients(ex).unwrap();
            let loss = |e: &BatchExample| bce_loss(model.score(e).unwrap(), e.label);
            for (which, analytic) in [(0, &g.bug_input), (1, &g.description_input)] {
                for (i, &a) in analytic.iter().enumerate() {
                    let mut plus = ex.clone();
                    let mut minus = ex.clone();
                    if which == 0 {
                        plus.bug.rows[i] += h;
                        minus.bug.rows[i] -= h;
                    } else {
                        plus.description.rows[i] += h;
                        minus.description.rows[i] -= h;
                    }
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    if a.abs().max(numeric.abs()) < 1e-7 {
                        continue;
                    }
                    assert!(rel_err(a, numeric) < 1e-3, "input {which}[{i}]");
                }
            }
        }
    }

    #[test]
    fn training_a_single_positive_raises_its_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = BatchExample {
            bug: random_matrix(&mut rng, 6, 5, 8),
            description: random_matrix(&mut rng, 4, 5, 8),
            label: true,
        };
        let config = ModelConfig {
            epochs: 1,
            ..small_config(4, 8)
        };
        let mut model = QaModel::new(config, 5).unwrap();
        let mut scores = vec![model.score(&ex).unwrap()];
        // One epoch at a time; Adam state restarts, so each step is a fresh first step.
        for _ in 0..10 {
            model.train(std::slice::from_ref(&ex)).unwrap();
            scores.push(model.score(&ex).unwrap());
        }
        let drops = scores.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops <= 1, "{scores:?}");
        assert!(scores[10] > scores[0]);
    }

    #[test]
    fn training_single_run_is_monotone_over_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ex = BatchExample {
            bug: random_matrix(&mut rng, 6, 5, 8),
            description: random_matrix(&mut rng, 4, 5, 8),
            label: true,
        };
        let config = ModelConfig {
            epochs: 10,
            ..small_config(4, 8)
        };
        let mut model = QaModel::new(config, 5).unwrap();
        let report = model.train(std::slice::from_ref(&ex)).unwrap();
        assert_eq!(report.loss_history.len(), 10);
        // Loss of a positive is decreasing in its score.
        let rises = report.loss_history.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 1, "{:?}", report.loss_history);
    }

    #[test]
    fn training_is_deterministic() {
        let (_, examples) = two_example_batch(30);
        let config = ModelConfig {
            epochs: 4,
            batch_size: 1,
            ..small_config(3, 5)
        };
        let run = || {
            let mut m = QaModel::new(config.clone(), 4).unwrap();
            let r = m.train(&examples).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1.to_bytes(), m2.to_bytes());
        let (_, r3) = {
            let mut m = QaModel::new(ModelConfig { seed: 4, ..config.clone() }, 4).unwrap();
            let r = m.train(&examples).unwrap();
            (m, r)
        };
        assert_ne!(r1, r3);
    }

    #[test]
    fn training_rejects_empty_and_mismatched_input() {
        let mut model = QaModel::new(small_config(2, 4), 3).unwrap();
        assert!(matches!(model.train(&[]), Err(ModelError::NoExamples)));
        let bad = BatchExample {
            bug: SequenceMatrix::from_rows(&[vec![1.0, 2.0]], 2, 4),
            description: SequenceMatrix::from_rows(&[vec![1.0, 2.0]], 2, 4),
            label: true,
        };
        assert!(model.train(&[bad]).is_err());
    }

    #[test]
    fn cosine_score_cases() {
        assert!((cosine_score(&[1.0, 2.0], &[2.0, 4.0]) - SCORE_MAX).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]), 0.5);
        assert!((cosine_score(&[1.0, 1.0], &[-1.0, -1.0]) - SCORE_MIN).abs() < 1e-15);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn attention_weights_sum_to_one(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
            query in prop::collection::vec(-5.0f64..5.0, 3),
            mask_bits in prop::collection::vec(any::<bool>(), 8),
        ) {
            let n = rows.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let alpha = attention_weights(&Matrix::from_rows(&rows), &query, &mask).unwrap();
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, m) in alpha.iter().zip(&mask) {
                prop_assert!(*a >= 0.0);
                if !m {
                    prop_assert_eq!(*a, 0.0);
                }
            }
        }

        #[test]
        fn score_is_scale_invariant(
            re_b in prop::collection::vec(-3.0f64..3.0, 1..20),
            re_c in prop::collection::vec(-3.0f64..3.0, 1..20),
        ) {
            let base = cosine_score(&re_b, &re_c);
            for k in [0.5, 3.0] {
                let sb: Vec<f64> = re_b.iter().map(|v| v * k).collect();
                let sc: Vec<f64> = re_c.iter().map(|v| v * k).collect();
                prop_assert!((cosine_score(&sb, &sc) - base).abs() < 1e-9);
            }
        }

        #[test]
        fn model_scores_stay_in_range(seed in any::<u64>(), lb in 0usize..6, lc in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = QaModel::new(ModelConfig { seed, ..small_config(3, 6) }, 4).unwrap();
            let ex = BatchExample {
                bug: random_matrix(&mut rng, lb, 4, 6),
                description: random_matrix(&mut rng, lc, 4, 6),
                label: true,
            };
            let s = model.score(&ex).unwrap();
            prop_assert!((SCORE_MIN..=SCORE_MAX).contains(&s));
        }
    }
}
