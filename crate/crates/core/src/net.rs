//! Feed-forward networks with batch normalization, exact reverse-mode
//! gradients, and the Adam optimizer — the whole gradient engine, from
//! scratch.
//!
//! Architecture per network: input -> [affine -> batch-norm -> ReLU] x
//! (L - 1) -> affine. Batch norm sits right before the activation in every
//! hidden layer; the output layer is plain affine. In train mode batch norm
//! uses minibatch statistics (and the tape records them); in infer mode it
//! uses frozen running moments, so inference is a pure function of
//! (parameters, input).
//!
//! The backward pass returns gradients for every weight, bias and
//! batch-norm scale/shift plus the cotangent with respect to the input —
//! the policy recurrence needs the latter to flow gradients through the
//! previous-position feed.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
/// EMA momentum for batch-norm running moments.
const BN_MOMENTUM: f64 = 0.99;
/// Inference-mode bound on normalized activations. Train-mode batch
/// statistics bound every row's normalized value by sqrt(batch size), so
/// the optimizer never sees anything outside +-16 at batch 256; clamping
/// frozen-moment inference to the same range keeps extreme out-of-sample
/// states (deep variance tails feeding back through the position
/// recurrence) inside the trained domain instead of extrapolating into a
/// multiplicative blow-up.
const BN_INFER_CLAMP: f64 = 16.0;

/// Parallel work-splitting policy for the batched matrix ops. Everything is
/// a pure function of the operand shape so results never depend on the
/// worker count: small products run serially, minibatch-sized ones split
/// into fixed 32-row chunks, bulk evaluation into 4096-row chunks, and
/// chunk partials are always reduced in chunk order.
fn par_chunk(rows: usize, k: usize, n: usize) -> Option<usize> {
    if rows * k * n < 150_000 || rows < 64 {
        None
    } else if rows >= 65_536 {
        Some(4096)
    } else {
        Some(32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm parameters and running moments for one hidden layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// One affine layer, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    /// (out, in) weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub batch_norm: Option<BatchNorm>,
    pub relu: bool,
}

/// Parameters of one feed-forward network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Per-layer activation record from a forward pass. The post-activation
/// output of layer l is the input of layer l + 1, so only inputs are
/// stored; the ReLU mask of a hidden layer is read off the next layer's
/// input.
#[derive(Clone, Debug)]
struct LayerTape {
    input: Array2<f64>,
    /// (x - mean)/sqrt(var + eps), train or infer moments as per mode.
    normalized: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    /// Minibatch statistics (train mode only), for the running-moment update.
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
}

/// Activation tape for one forward pass; consumed by [`MlpParams::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    layers: Vec<LayerTape>,
    /// Final output, kept only when the last layer has an activation.
    output_post: Option<Array2<f64>>,
    mode: Mode,
}

impl Tape {
    /// Minibatch (mean, variance) recorded for a batch-norm layer in train
    /// mode.
    pub fn batch_stats(&self, layer: usize) -> Option<(&Array1<f64>, &Array1<f64>)> {
        let lt = self.layers.get(layer)?;
        Some((lt.batch_mean.as_ref()?, lt.batch_var.as_ref()?))
    }
}

/// Gradients (or any parameter-shaped accumulator) for one network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpGrads {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
    pub gamma: Vec<Option<Array1<f64>>>,
    pub beta: Vec<Option<Array1<f64>>>,
}

impl MlpParams {
    /// He-uniform initialization: weights uniform on
    /// +-sqrt(6/fan_in), biases zero, batch-norm scale 1 shift 0.
    /// Hidden layers get batch norm + ReLU, the output layer neither.
    pub fn init(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("architecture needs at least 2 dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 1..dims.len() {
            let (fan_in, fan_out) = (dims[l - 1], dims[l]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Shape("zero-width layer".into()));
            }
            let limit = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                (2.0 * rng.uniform() - 1.0) * limit
            });
            let hidden = l < dims.len() - 1;
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
                batch_norm: hidden.then(|| BatchNorm::new(fan_out)),
                relu: hidden,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_width()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    /// Forward pass over a (batch, input) matrix. Pure: running moments are
    /// not touched here — the training loop applies
    /// [`MlpParams::update_running_moments`] with the returned tape.
    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = affine(&current.view(), &layer.weight, &layer.bias);
            let (normalized, inv_std, batch_mean, batch_var) = match &layer.batch_norm {
                None => (None, None, None, None),
                Some(bn) => {
                    let m = z.nrows() as f64;
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                            let mut var: Array1<f64> = Array1::zeros(z.ncols());
                            for row in z.rows() {
                                Zip::from(&mut var).and(&row).and(&mean).for_each(
                                    |v, &zi, &mu| *v += (zi - mu) * (zi - mu),
                                );
                            }
                            var.mapv_inplace(|v| v / m);
                            (mean, var)
                        }
                        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    // normalized = (z - mean) inv_std; z = gamma normalized + beta
                    let clamp = match mode {
                        Mode::Train => f64::INFINITY,
                        Mode::Infer => BN_INFER_CLAMP,
                    };
                    let mut normalized = z;
                    z = Array2::zeros(normalized.dim());
                    rowwise2(&mut normalized, &mut z, |nrow, zrow| {
                        Zip::from(nrow)
                            .and(zrow)
                            .and(&mean)
                            .and(&inv_std)
                            .and(&bn.gamma)
                            .and(&bn.beta)
                            .for_each(|n, zi, &mu, &is, &g, &b| {
                                *n = ((*n - mu) * is).clamp(-clamp, clamp);
                                *zi = g * *n + b;
                            });
                    });
                    (
                        Some(normalized),
                        Some(inv_std),
                        matches!(mode, Mode::Train).then_some(mean),
                        matches!(mode, Mode::Train).then_some(var),
                    )
                }
            };
            if layer.relu {
                rowwise1(&mut z, |row| row.mapv_inplace(|v| v.max(0.0)));
            }
            tapes.push(LayerTape {
                input: std::mem::replace(&mut current, z),
                normalized,
                inv_std,
                batch_mean,
                batch_var,
            });
        }
        let output_post = self
            .layers
            .last()
            .is_some_and(|l| l.relu)
            .then(|| current.clone());
        Ok((
            current,
            Tape {
                layers: tapes,
                output_post,
                mode,
            },
        ))
    }

    /// Inference-only forward: frozen moments, no tape, minimal allocation.
    pub fn forward_infer(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = affine(&current.view(), &layer.weight, &layer.bias);
            if let Some(bn) = &layer.batch_norm {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                rowwise1(&mut z, |row| {
                    Zip::from(row)
                        .and(&bn.running_mean)
                        .and(&inv_std)
                        .and(&bn.gamma)
                        .and(&bn.beta)
                        .for_each(|zi, &mu, &is, &g, &b| {
                            let n = ((*zi - mu) * is).clamp(-BN_INFER_CLAMP, BN_INFER_CLAMP);
                            *zi = g * n + b;
                        });
                });
            }
            if layer.relu {
                rowwise1(&mut z, |row| row.mapv_inplace(|v| v.max(0.0)));
            }
            current = z;
        }
        Ok(current)
    }

    /// Fold the minibatch statistics recorded on a train-mode tape into the
    /// running moments (EMA with momentum 0.99).
    pub fn update_running_moments(&mut self, tape: &Tape) {
        debug_assert_eq!(tape.mode, Mode::Train);
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(mean), Some(var)) =
                (layer.batch_norm.as_mut(), &lt.batch_mean, &lt.batch_var)
            {
                Zip::from(&mut bn.running_mean)
                    .and(mean)
                    .for_each(|r, &m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
                Zip::from(&mut bn.running_var)
                    .and(var)
                    .for_each(|r, &v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
            }
        }
    }

    /// Overwrite the running moments with the exact batch statistics of a
    /// train-mode tape. Used once after training to re-estimate the frozen
    /// moments from a large population pass, which keeps inference faithful
    /// even where a feature is deterministic (zero batch variance) and the
    /// training EMA would otherwise amplify its own lag.
    pub fn set_running_moments(&mut self, tape: &Tape) {
        debug_assert_eq!(tape.mode, Mode::Train);
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(mean), Some(var)) =
                (layer.batch_norm.as_mut(), &lt.batch_mean, &lt.batch_var)
            {
                bn.running_mean.assign(mean);
                bn.running_var.assign(var);
            }
        }
    }

    /// Reverse pass: accumulate parameter gradients into `grads` and return
    /// the cotangent with respect to the input batch.
    ///
    /// Exact for the tape's mode; in train mode the batch-statistics
    /// dependence of batch norm is differentiated through.
    pub fn backward_into(
        &self,
        tape: &Tape,
        d_out: ArrayView2<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Result<Array2<f64>> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::Shape("stale tape".into()));
        }
        let mut d = d_out.to_owned();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lt = &tape.layers[l];
            if layer.relu {
                // the post-activation output of layer l is layer l+1's input
                let post = if l + 1 < n_layers {
                    &tape.layers[l + 1].input
                } else {
                    tape.output_post
                        .as_ref()
                        .ok_or_else(|| Error::Shape("tape missing final activation".into()))?
                };
                if d.dim() != post.dim() {
                    return Err(Error::Shape("cotangent shape does not match tape".into()));
                }
                Zip::from(&mut d).and(post).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            if let Some(bn) = &layer.batch_norm {
                let normalized = lt.normalized.as_ref().expect("bn tape");
                let inv_std = lt.inv_std.as_ref().expect("bn tape");
                // d gamma, d beta
                let g_gamma = grads.gamma[l].as_mut().expect("bn grads");
                let g_beta = grads.beta[l].as_mut().expect("bn grads");
                for (drow, nrow) in d.rows().into_iter().zip(normalized.rows()) {
                    Zip::from(&mut *g_gamma)
                        .and(&drow)
                        .and(&nrow)
                        .for_each(|g, &di, &ni| *g += di * ni);
                    Zip::from(&mut *g_beta).and(&drow).for_each(|g, &di| *g += di);
                }
                // d x_hat = d * gamma
                for mut drow in d.rows_mut() {
                    Zip::from(&mut drow).and(&bn.gamma).for_each(|di, &g| *di *= g);
                }
                match tape.mode {
                    Mode::Infer => {
                        // frozen moments: d z = d x_hat * inv_std, zero where
                        // the inference clamp is active
                        for (mut drow, nrow) in d.rows_mut().into_iter().zip(normalized.rows()) {
                            Zip::from(&mut drow).and(inv_std).and(&nrow).for_each(
                                |di, &is, &ni| {
                                    *di = if ni.abs() < BN_INFER_CLAMP { *di * is } else { 0.0 };
                                },
                            );
                        }
                    }
                    Mode::Train => {
                        // batch statistics: for biased variance over m rows,
                        // dz_i = inv_std/m (m dxh_i - sum_j dxh_j - xh_i sum_j dxh_j xh_j)
                        let m = d.nrows() as f64;
                        let sum_d = d.sum_axis(Axis(0));
                        let mut sum_dn: Array1<f64> = Array1::zeros(d.ncols());
                        for (drow, nrow) in d.rows().into_iter().zip(normalized.rows()) {
                            Zip::from(&mut sum_dn)
                                .and(&drow)
                                .and(&nrow)
                                .for_each(|s, &di, &ni| *s += di * ni);
                        }
                        for (mut drow, nrow) in d.rows_mut().into_iter().zip(normalized.rows()) {
                            Zip::from(&mut drow)
                                .and(&nrow)
                                .and(&sum_d)
                                .and(&sum_dn)
                                .and(inv_std)
                                .for_each(|di, &ni, &sd, &sdn, &is| {
                                    *di = is / m * (m * *di - sd - ni * sdn);
                                });
                        }
                    }
                }
            }
            // affine: dW += d^T input, db += sum_rows d, d_in = d W
            mm_tn_add(&d.view(), &lt.input.view(), &mut grads.weight[l]);
            let db = d.sum_axis(Axis(0));
            grads.bias[l] += &db;
            d = mm_nn(&d.view(), &layer.weight.view());
        }
        Ok(d)
    }

    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<'_, f64>) -> Result<(MlpGrads, Array2<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let d_in = self.backward_into(tape, d_out, &mut grads)?;
        Ok((grads, d_in))
    }
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weight: params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.dim()))
                .collect(),
            bias: params
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
            gamma: params
                .layers
                .iter()
                .map(|l| l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.gamma.len())))
                .collect(),
            beta: params
                .layers
                .iter()
                .map(|l| l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.beta.len())))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weight.iter_mut().for_each(|a| a.fill(0.0));
        self.bias.iter_mut().for_each(|a| a.fill(0.0));
        self.gamma.iter_mut().flatten().for_each(|a| a.fill(0.0));
        self.beta.iter_mut().flatten().for_each(|a| a.fill(0.0));
    }

    pub fn scale(&mut self, c: f64) {
        self.weight.iter_mut().for_each(|a| *a *= c);
        self.bias.iter_mut().for_each(|a| *a *= c);
        self.gamma.iter_mut().flatten().for_each(|a| *a *= c);
        self.beta.iter_mut().flatten().for_each(|a| *a *= c);
    }
}

/// y = x W^T + b, row-chunk parallel above the threshold.
fn affine(x: &ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = mm_nt(x, &w.view());
    rowwise1(&mut y, |row| *row += b);
    y
}

/// Row transformation, parallel over fixed 4096-row chunks for bulk inputs.
fn rowwise1<F>(a: &mut Array2<f64>, f: F)
where
    F: Fn(&mut ndarray::ArrayViewMut1<'_, f64>) + Sync,
{
    if a.nrows() >= 65_536 {
        a.axis_chunks_iter_mut(Axis(0), 4096)
            .into_par_iter()
            .for_each(|mut chunk| {
                for mut row in chunk.rows_mut() {
                    f(&mut row);
                }
            });
    } else {
        for mut row in a.rows_mut() {
            f(&mut row);
        }
    }
}

/// Lock-step row transformation over two equally shaped matrices.
fn rowwise2<F>(a: &mut Array2<f64>, b: &mut Array2<f64>, f: F)
where
    F: Fn(ndarray::ArrayViewMut1<'_, f64>, ndarray::ArrayViewMut1<'_, f64>) + Sync,
{
    debug_assert_eq!(a.dim(), b.dim());
    if a.nrows() >= 65_536 {
        a.axis_chunks_iter_mut(Axis(0), 4096)
            .into_par_iter()
            .zip(b.axis_chunks_iter_mut(Axis(0), 4096).into_par_iter())
            .for_each(|(mut ca, mut cb)| {
                for (ra, rb) in ca.rows_mut().into_iter().zip(cb.rows_mut()) {
                    f(ra, rb);
                }
            });
    } else {
        for (ra, rb) in a.rows_mut().into_iter().zip(b.rows_mut()) {
            f(ra, rb);
        }
    }
}

/// a (m,k) . b^T with b (n,k) -> (m,n)
fn mm_nt(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let m = a.nrows();
    let mut out = Array2::zeros((m, b.nrows()));
    match par_chunk(m, a.ncols(), b.nrows()) {
        None => ndarray::linalg::general_mat_mul(1.0, a, &b.t(), 0.0, &mut out),
        Some(chunk) => {
            out.axis_chunks_iter_mut(Axis(0), chunk)
                .into_par_iter()
                .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
                .for_each(|(mut oc, ac)| {
                    ndarray::linalg::general_mat_mul(1.0, &ac, &b.t(), 0.0, &mut oc);
                });
        }
    }
    out
}

/// a (m,k) . b (k,n) -> (m,n)
fn mm_nn(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let m = a.nrows();
    let mut out = Array2::zeros((m, b.ncols()));
    match par_chunk(m, a.ncols(), b.ncols()) {
        None => ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut out),
        Some(chunk) => {
            out.axis_chunks_iter_mut(Axis(0), chunk)
                .into_par_iter()
                .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
                .for_each(|(mut oc, ac)| {
                    ndarray::linalg::general_mat_mul(1.0, &ac, b, 0.0, &mut oc);
                });
        }
    }
    out
}

/// out += a^T (k,m) . b with a (m,k), b (m,n): a batch reduction. Chunk
/// partials are summed in chunk order, so the result is independent of the
/// thread count.
fn mm_tn_add(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, out: &mut Array2<f64>) {
    let m = a.nrows();
    let Some(chunk) = par_chunk(m, a.ncols(), b.ncols()) else {
        ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, out);
        return;
    };
    let partials: Vec<Array2<f64>> = a
        .axis_chunks_iter(Axis(0), chunk)
        .into_par_iter()
        .zip(b.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .map(|(ac, bc)| {
            let mut p = Array2::zeros(out.dim());
            ndarray::linalg::general_mat_mul(1.0, &ac.t(), &bc, 0.0, &mut p);
            p
        })
        .collect();
    for p in partials {
        *out += &p;
    }
}

/// Adam hyper-parameters; the defaults follow the original paper, with the
/// experiments' learning rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub first: MlpGrads,
    pub second: MlpGrads,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &MlpParams, hyper: AdamHyper) -> Self {
        Self {
            first: MlpGrads::zeros_like(params),
            second: MlpGrads::zeros_like(params),
            step: 0,
            hyper,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        self.step += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.step as i32);
        let c2 = 1.0 - h.beta2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= h.learning_rate * mhat / (vhat.sqrt() + h.epsilon);
        };
        for l in 0..params.layers.len() {
            azip_mut(
                params.layers[l].weight.as_slice_mut().unwrap(),
                grads.weight[l].as_slice().unwrap(),
                self.first.weight[l].as_slice_mut().unwrap(),
                self.second.weight[l].as_slice_mut().unwrap(),
                update,
            );
            azip_mut(
                params.layers[l].bias.as_slice_mut().unwrap(),
                grads.bias[l].as_slice().unwrap(),
                self.first.bias[l].as_slice_mut().unwrap(),
                self.second.bias[l].as_slice_mut().unwrap(),
                update,
            );
            if let Some(bn) = params.layers[l].batch_norm.as_mut() {
                azip_mut(
                    bn.gamma.as_slice_mut().unwrap(),
                    grads.gamma[l].as_ref().unwrap().as_slice().unwrap(),
                    self.first.gamma[l].as_mut().unwrap().as_slice_mut().unwrap(),
                    self.second.gamma[l].as_mut().unwrap().as_slice_mut().unwrap(),
                    update,
                );
                azip_mut(
                    bn.beta.as_slice_mut().unwrap(),
                    grads.beta[l].as_ref().unwrap().as_slice().unwrap(),
                    self.first.beta[l].as_mut().unwrap().as_slice_mut().unwrap(),
                    self.second.beta[l].as_mut().unwrap().as_slice_mut().unwrap(),
                    update,
                );
            }
        }
    }
}

fn azip_mut(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    f: impl Fn(&mut f64, f64, &mut f64, &mut f64),
) {
    for i in 0..p.len() {
        f(&mut p[i], g[i], &mut m[i], &mut v[i]);
    }
}

/// Scalar Adam, used for the trainable OCE level w.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub first: f64,
    pub second: f64,
    pub step: u64,
}

impl ScalarAdam {
    pub fn step(&mut self, hyper: &AdamHyper, param: &mut f64, grad: f64) {
        self.step += 1;
        self.first = hyper.beta1 * self.first + (1.0 - hyper.beta1) * grad;
        self.second = hyper.beta2 * self.second + (1.0 - hyper.beta2) * grad * grad;
        let mhat = self.first / (1.0 - hyper.beta1.powi(self.step as i32));
        let vhat = self.second / (1.0 - hyper.beta2.powi(self.step as i32));
        *param -= hyper.learning_rate * mhat / (vhat.sqrt() + hyper.epsilon);
    }
}
