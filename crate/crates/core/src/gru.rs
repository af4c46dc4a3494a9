//! Two-layer GRU with a sigmoid readout, trained by backpropagation through time.
//!
//! Sequences are processed time-major as `(T, N, dim)` arrays so that every
//! timestep of a batch is a single matrix product. Gate weights are stacked
//! row-wise in the order update, reset, candidate.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonology::FEATURES;
use crate::representations::REP_DIM;

pub const INPUT_DIM: usize = FEATURES;
pub const OUTPUT_DIM: usize = REP_DIM;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayerParams {
    /// 3h × input, blocks [update; reset; candidate].
    pub input_weights: Array2<f64>,
    /// 3h × h, same block order.
    pub recurrent_weights: Array2<f64>,
    /// 3h.
    pub bias: Array1<f64>,
}

impl GruLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input_weights: Array2::zeros((3 * hidden, input)),
            recurrent_weights: Array2::zeros((3 * hidden, hidden)),
            bias: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.ncols()
    }

    pub fn input(&self) -> usize {
        self.input_weights.ncols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.recurrent_weights.nrows() != 3 * h {
            return Err(Error::dim("recurrent weight rows", 3 * h, self.recurrent_weights.nrows()));
        }
        if self.input_weights.nrows() != 3 * h {
            return Err(Error::dim("input weight rows", 3 * h, self.input_weights.nrows()));
        }
        if self.bias.len() != 3 * h {
            return Err(Error::dim("gate bias", 3 * h, self.bias.len()));
        }
        Ok(())
    }
}

/// All trainable tensors of the network. Also used for gradients and velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub layer1: GruLayerParams,
    pub layer2: GruLayerParams,
    /// 250 × h2.
    pub readout_weights: Array2<f64>,
    pub readout_bias: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "layer1.input_weights",
    "layer1.recurrent_weights",
    "layer1.bias",
    "layer2.input_weights",
    "layer2.recurrent_weights",
    "layer2.bias",
    "readout.weights",
    "readout.bias",
];

impl GruParams {
    pub fn zeros(h1: usize, h2: usize) -> Self {
        Self {
            layer1: GruLayerParams::zeros(INPUT_DIM, h1),
            layer2: GruLayerParams::zeros(h1, h2),
            readout_weights: Array2::zeros((OUTPUT_DIM, h2)),
            readout_bias: Array1::zeros(OUTPUT_DIM),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layer1.hidden(), self.layer2.hidden())
    }

    pub fn hidden_sizes(&self) -> (usize, usize) {
        (self.layer1.hidden(), self.layer2.hidden())
    }

    /// Row-major views of every tensor, in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&[f64]; 8] {
        fn v(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters are kept in standard layout")
        }
        [
            v(self.layer1.input_weights.as_slice()),
            v(self.layer1.recurrent_weights.as_slice()),
            v(self.layer1.bias.as_slice()),
            v(self.layer2.input_weights.as_slice()),
            v(self.layer2.recurrent_weights.as_slice()),
            v(self.layer2.bias.as_slice()),
            v(self.readout_weights.as_slice()),
            v(self.readout_bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        fn v(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters are kept in standard layout")
        }
        [
            v(self.layer1.input_weights.as_slice_mut()),
            v(self.layer1.recurrent_weights.as_slice_mut()),
            v(self.layer1.bias.as_slice_mut()),
            v(self.layer2.input_weights.as_slice_mut()),
            v(self.layer2.recurrent_weights.as_slice_mut()),
            v(self.layer2.bias.as_slice_mut()),
            v(self.readout_weights.as_slice_mut()),
            v(self.readout_bias.as_slice_mut()),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 8] {
        [
            self.layer1.input_weights.shape().to_vec(),
            self.layer1.recurrent_weights.shape().to_vec(),
            self.layer1.bias.shape().to_vec(),
            self.layer2.input_weights.shape().to_vec(),
            self.layer2.recurrent_weights.shape().to_vec(),
            self.layer2.bias.shape().to_vec(),
            self.readout_weights.shape().to_vec(),
            self.readout_bias.shape().to_vec(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    /// `self += alpha * other`
    pub fn scaled_add(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Scalar access in flattened `tensors()` order.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruModel {
    pub params: GruParams,
    pub seed: u64,
}

impl GruModel {
    pub fn hidden_sizes(&self) -> (usize, usize) {
        self.params.hidden_sizes()
    }
}

/// Uniform weights in ±1/sqrt(fan-in) per matrix, zero biases.
pub fn init_model(h1: usize, h2: usize, seed: u64) -> Result<GruModel> {
    if h1 == 0 || h2 == 0 {
        return Err(Error::Parameter(format!("hidden sizes must be positive, got ({h1}, {h2})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GruParams::zeros(h1, h2);
    let mut fill = |m: &mut Array2<f64>| {
        let bound = 1.0 / (m.ncols() as f64).sqrt();
        m.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
    };
    fill(&mut params.layer1.input_weights);
    fill(&mut params.layer1.recurrent_weights);
    fill(&mut params.layer2.input_weights);
    fill(&mut params.layer2.recurrent_weights);
    fill(&mut params.readout_weights);
    Ok(GruModel { params, seed })
}

/// One GRU cell update for a single vector.
pub fn gru_step(x: &Array1<f64>, h_prev: &Array1<f64>, p: &GruLayerParams) -> Result<Array1<f64>> {
    p.check()?;
    let h = p.hidden();
    if x.len() != p.input() {
        return Err(Error::dim("gru_step input", p.input(), x.len()));
    }
    if h_prev.len() != h {
        return Err(Error::dim("gru_step hidden", h, h_prev.len()));
    }
    let gx = p.input_weights.dot(x) + &p.bias;
    let gh = p.recurrent_weights.slice(s![..2 * h, ..]).dot(h_prev);
    let z = (&gx.slice(s![..h]) + &gh.slice(s![..h])).mapv(sigmoid);
    let r = (&gx.slice(s![h..2 * h]) + &gh.slice(s![h..])).mapv(sigmoid);
    let q = &r * h_prev;
    let c = (&gx.slice(s![2 * h..]) + &p.recurrent_weights.slice(s![2 * h.., ..]).dot(&q)).mapv(f64::tanh);
    Ok(h_prev + &(&z * &(&c - h_prev)))
}

/// Cached activations of one layer across a batch.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// (T + 1, N, h); index 0 is the zero initial state.
    pub hidden: Array3<f64>,
    pub update: Array3<f64>,
    pub reset: Array3<f64>,
    pub candidate: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// (T, N, 20)
    pub inputs: Array3<f64>,
    pub layer1: LayerTrace,
    pub layer2: LayerTrace,
    /// (T, N, 250), sigmoid outputs.
    pub outputs: Array3<f64>,
}

impl ForwardTrace {
    pub fn steps(&self) -> usize {
        self.outputs.len_of(Axis(0))
    }

    pub fn batch(&self) -> usize {
        self.outputs.len_of(Axis(1))
    }

    /// Output of sequence `n` at timestep `t`.
    pub fn output(&self, t: usize, n: usize) -> ndarray::ArrayView1<'_, f64> {
        self.outputs.slice(s![t, n, ..])
    }
}

fn flat(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (t, n, d) = a.dim();
    a.view().into_shape_with_order((t * n, d)).expect("standard layout")
}

fn layer_forward(p: &GruLayerParams, inputs: &Array3<f64>) -> LayerTrace {
    let (steps, batch, _) = inputs.dim();
    let h = p.hidden();
    let mut gx = flat(inputs).dot(&p.input_weights.t());
    gx += &p.bias;
    let gx = gx.into_shape_with_order((steps, batch, 3 * h)).expect("standard layout");

    let u_zr = p.recurrent_weights.slice(s![..2 * h, ..]);
    let u_c = p.recurrent_weights.slice(s![2 * h.., ..]);
    let mut hidden = Array3::zeros((steps + 1, batch, h));
    let mut update = Array3::zeros((steps, batch, h));
    let mut reset = Array3::zeros((steps, batch, h));
    let mut candidate = Array3::zeros((steps, batch, h));
    let mut q = Array2::zeros((batch, h));
    for t in 0..steps {
        let gxt = gx.index_axis(Axis(0), t);
        let (prev, mut rest) = hidden.view_mut().split_at(Axis(0), t + 1);
        let h_prev = prev.index_axis(Axis(0), t);
        let mut h_next = rest.index_axis_mut(Axis(0), 0);

        let gh = h_prev.dot(&u_zr.t());
        let mut z = update.index_axis_mut(Axis(0), t);
        Zip::from(&mut z)
            .and(gxt.slice(s![.., ..h]))
            .and(gh.slice(s![.., ..h]))
            .for_each(|z, &a, &b| *z = sigmoid(a + b));
        let mut r = reset.index_axis_mut(Axis(0), t);
        Zip::from(&mut r)
            .and(gxt.slice(s![.., h..2 * h]))
            .and(gh.slice(s![.., h..]))
            .for_each(|r, &a, &b| *r = sigmoid(a + b));
        Zip::from(&mut q).and(&r).and(&h_prev).for_each(|q, &r, &hp| *q = r * hp);
        let mut c = candidate.index_axis_mut(Axis(0), t);
        let gc = q.dot(&u_c.t());
        Zip::from(&mut c)
            .and(gxt.slice(s![.., 2 * h..]))
            .and(&gc)
            .for_each(|c, &a, &b| *c = (a + b).tanh());
        Zip::from(&mut h_next)
            .and(&h_prev)
            .and(&z)
            .and(&c)
            .for_each(|hn, &hp, &z, &c| *hn = hp + z * (c - hp));
    }
    LayerTrace {
        hidden,
        update,
        reset,
        candidate,
    }
}

fn check_model(model: &GruModel) -> Result<()> {
    let p = &model.params;
    p.layer1.check()?;
    p.layer2.check()?;
    if p.layer1.input() != INPUT_DIM {
        return Err(Error::dim("layer1 input", INPUT_DIM, p.layer1.input()));
    }
    if p.layer2.input() != p.layer1.hidden() {
        return Err(Error::dim("layer2 input", p.layer1.hidden(), p.layer2.input()));
    }
    if p.readout_weights.dim() != (OUTPUT_DIM, p.layer2.hidden()) || p.readout_bias.len() != OUTPUT_DIM {
        return Err(Error::dim("readout rows", OUTPUT_DIM, p.readout_weights.nrows()));
    }
    Ok(())
}

/// Runs a batch of equal-length sequences, `inputs` shaped (T, N, 20).
pub fn forward_batch(model: &GruModel, inputs: &Array3<f64>) -> Result<ForwardTrace> {
    check_model(model)?;
    let (steps, batch, cols) = inputs.dim();
    if cols != INPUT_DIM {
        return Err(Error::dim("frame columns", INPUT_DIM, cols));
    }
    let inputs = inputs.as_standard_layout().into_owned();
    let p = &model.params;
    let layer1 = layer_forward(&p.layer1, &inputs);
    let h1 = layer1.hidden.slice(s![1.., .., ..]).to_owned();
    let layer2 = layer_forward(&p.layer2, &h1);
    let h2 = layer2.hidden.slice(s![1.., .., ..]).to_owned();
    let mut out = flat(&h2).dot(&p.readout_weights.t());
    out += &p.readout_bias;
    out.mapv_inplace(sigmoid);
    let outputs = out
        .into_shape_with_order((steps, batch, OUTPUT_DIM))
        .expect("standard layout");
    Ok(ForwardTrace {
        inputs,
        layer1,
        layer2,
        outputs,
    })
}

/// Runs one sequence of T×20 frames from a zero initial state.
pub fn forward(model: &GruModel, frames: &Array2<f64>) -> Result<ForwardTrace> {
    if frames.ncols() != INPUT_DIM {
        return Err(Error::dim("frame columns", INPUT_DIM, frames.ncols()));
    }
    let inputs = frames.view().insert_axis(Axis(1)).to_owned();
    forward_batch(model, &inputs)
}

fn check_targets(trace: &ForwardTrace, targets: &Array3<f64>) -> Result<()> {
    if targets.dim() != trace.outputs.dim() {
        let (t, n, d) = targets.dim();
        let (et, en, ed) = trace.outputs.dim();
        let context = if t != et { "target steps" } else if n != en { "target batch" } else { "target dims" };
        let (e, a) = if t != et { (et, t) } else if n != en { (en, n) } else { (ed, d) };
        return Err(Error::dim(context, e, a));
    }
    Ok(())
}

/// Summed squared error over timesteps, batch and output dimensions.
pub fn loss(trace: &ForwardTrace, targets: &Array3<f64>) -> Result<f64> {
    check_targets(trace, targets)?;
    Ok(Zip::from(&trace.outputs)
        .and(targets)
        .fold(0.0, |acc, &y, &t| acc + (y - t) * (y - t)))
}

/// Summed squared error for a single sequence with T×250 targets.
pub fn sequence_loss(trace: &ForwardTrace, targets: &Array2<f64>) -> Result<f64> {
    loss(trace, &targets.view().insert_axis(Axis(1)).to_owned())
}

/// Backpropagates one layer. Returns parameter gradients and, when asked,
/// the gradient with respect to the layer inputs.
fn layer_backward(
    p: &GruLayerParams,
    inputs: ArrayView2<'_, f64>,
    tr: &LayerTrace,
    d_hidden: &Array3<f64>,
    want_input_grad: bool,
) -> (GruLayerParams, Option<Array2<f64>>) {
    let (steps, batch, h) = d_hidden.dim();
    let u_zr = p.recurrent_weights.slice(s![..2 * h, ..]);
    let u_c = p.recurrent_weights.slice(s![2 * h.., ..]);

    let mut grads = GruLayerParams::zeros(p.input(), h);
    let mut d_gates = Array3::<f64>::zeros((steps, batch, 3 * h));
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dh = Array2::<f64>::zeros((batch, h));
    let mut dz = Array2::<f64>::zeros((batch, h));
    let mut q = Array2::<f64>::zeros((batch, h));

    for t in (0..steps).rev() {
        let h_prev = tr.hidden.index_axis(Axis(0), t);
        let z = tr.update.index_axis(Axis(0), t);
        let r = tr.reset.index_axis(Axis(0), t);
        let c = tr.candidate.index_axis(Axis(0), t);
        Zip::from(&mut dh)
            .and(d_hidden.index_axis(Axis(0), t))
            .and(&dh_next)
            .for_each(|d, &a, &b| *d = a + b);

        let mut dg = d_gates.index_axis_mut(Axis(0), t);
        // candidate pre-activation and the direct path to h_prev
        Zip::from(dg.slice_mut(s![.., 2 * h..]))
            .and(&mut dh_next)
            .and(&dh)
            .and(&z)
            .and(&c)
            .for_each(|dac, dhp, &dh, &z, &c| {
                *dac = dh * z * (1.0 - c * c);
                *dhp = dh * (1.0 - z);
            });
        Zip::from(&mut dz)
            .and(&dh)
            .and(&c)
            .and(&h_prev)
            .for_each(|dz, &dh, &c, &hp| *dz = dh * (c - hp));

        Zip::from(&mut q).and(&r).and(&h_prev).for_each(|q, &r, &hp| *q = r * hp);
        let dac = dg.slice(s![.., 2 * h..]).to_owned();
        grads
            .recurrent_weights
            .slice_mut(s![2 * h.., ..])
            .scaled_add(1.0, &dac.t().dot(&q));
        let dq = dac.dot(&u_c);

        {
            let (mut dzr_z, mut rest) = dg.view_mut().split_at(Axis(1), h);
            let mut dzr_r = rest.slice_mut(s![.., ..h]);
            Zip::from(&mut dzr_z)
                .and(&dz)
                .and(&z)
                .for_each(|g, &dz, &z| *g = dz * z * (1.0 - z));
            Zip::from(&mut dzr_r)
                .and(&dq)
                .and(&h_prev)
                .and(&r)
                .for_each(|g, &dq, &hp, &r| *g = dq * hp * r * (1.0 - r));
        }
        Zip::from(&mut dh_next).and(&dq).and(&r).for_each(|d, &dq, &r| *d += dq * r);

        let dzr = dg.slice(s![.., ..2 * h]);
        grads
            .recurrent_weights
            .slice_mut(s![..2 * h, ..])
            .scaled_add(1.0, &dzr.t().dot(&h_prev));
        dh_next += &dzr.dot(&u_zr);
    }

    let dg_flat = flat(&d_gates);
    grads.input_weights = dg_flat.t().dot(&inputs);
    grads.bias = dg_flat.sum_axis(Axis(0));
    let d_inputs = want_input_grad.then(|| dg_flat.dot(&p.input_weights));
    (grads, d_inputs)
}

/// Exact gradients of the summed squared error with respect to every parameter.
pub fn backward(model: &GruModel, trace: &ForwardTrace, targets: &Array3<f64>) -> Result<GruParams> {
    check_model(model)?;
    check_targets(trace, targets)?;
    let p = &model.params;
    let (h1, h2) = p.hidden_sizes();
    let (steps, batch, _) = trace.outputs.dim();
    assert_eq!(trace.layer1.hidden.dim(), (steps + 1, batch, h1), "trace does not match model");
    assert_eq!(trace.layer2.hidden.dim(), (steps + 1, batch, h2), "trace does not match model");

    let mut d_out = Array2::zeros((steps * batch, OUTPUT_DIM));
    Zip::from(&mut d_out)
        .and(flat(&trace.outputs))
        .and(flat(targets))
        .for_each(|d, &y, &t| *d = 2.0 * (y - t) * y * (1.0 - y));

    let h2_all = trace.layer2.hidden.slice(s![1.., .., ..]).to_owned();
    let h2_flat = flat(&h2_all);
    let readout_weights = d_out.t().dot(&h2_flat);
    let readout_bias = d_out.sum_axis(Axis(0));
    let d_h2 = d_out
        .dot(&p.readout_weights)
        .into_shape_with_order((steps, batch, h2))
        .expect("standard layout");

    let h1_all = trace.layer1.hidden.slice(s![1.., .., ..]).to_owned();
    let (layer2, d_h1) = layer_backward(&p.layer2, flat(&h1_all), &trace.layer2, &d_h2, true);
    let d_h1 = d_h1
        .expect("requested")
        .into_shape_with_order((steps, batch, h1))
        .expect("standard layout");
    let (layer1, _) = layer_backward(&p.layer1, flat(&trace.inputs), &trace.layer1, &d_h1, false);

    Ok(GruParams {
        layer1,
        layer2,
        readout_weights,
        readout_bias,
    })
}

/// Largest relative discrepancy between backpropagated gradients and central
/// differences with step `eps`, over every parameter. The difference quotients
/// are evaluated in extended precision so that rounding in the forward pass
/// does not mask the comparison.
pub fn grad_check(model: &GruModel, frames: &Array3<f64>, targets: &Array3<f64>, eps: f64) -> Result<f64> {
    Ok(grad_check_entries(model, frames, targets, eps)?
        .into_iter()
        .fold(0.0, |worst, (a, n)| worst.max(relative_error(a, n))))
}

/// `|a − n| / max(|a|, |n|)`, with a 1e-12 floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// `(analytic, numeric)` for every parameter, in flat order.
pub fn grad_check_entries(model: &GruModel, frames: &Array3<f64>, targets: &Array3<f64>, eps: f64) -> Result<Vec<(f64, f64)>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let trace = forward_batch(model, frames)?;
    let analytic = backward(model, &trace, targets)?;
    let numeric = crate::precise::central_differences(model, frames, targets, eps);
    Ok(numeric
        .into_iter()
        .enumerate()
        .map(|(i, n)| (analytic.get_flat(i), n))
        .collect())
}

const CHECKPOINT_FORMAT: &str = "cohortsim-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    hidden_sizes: (usize, usize),
    seed: u64,
    epoch: usize,
    tensors: Vec<StoredTensor>,
}

/// A model snapshot together with the epoch it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GruModel,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let p = &self.model.params;
        let tensors = TENSOR_NAMES
            .iter()
            .zip(p.shapes())
            .zip(p.tensors())
            .map(|((name, shape), data)| StoredTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hidden_sizes: p.hidden_sizes(),
            seed: self.model.seed,
            epoch: self.epoch,
            tensors,
        };
        serde_json::to_writer(writer, &stored)?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_reader(reader)?;
        if stored.format != CHECKPOINT_FORMAT || stored.version != CHECKPOINT_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported checkpoint {} v{}",
                stored.format, stored.version
            )));
        }
        let (h1, h2) = stored.hidden_sizes;
        let mut params = GruParams::zeros(h1, h2);
        if stored.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::dim("checkpoint tensors", TENSOR_NAMES.len(), stored.tensors.len()));
        }
        let shapes = params.shapes();
        for (((dst, shape), name), t) in params
            .tensors_mut()
            .into_iter()
            .zip(shapes)
            .zip(TENSOR_NAMES)
            .zip(&stored.tensors)
        {
            if t.name != name || t.shape != shape || t.data.len() != dst.len() {
                return Err(Error::Parameter(format!("checkpoint tensor `{}` does not match `{name}` {shape:?}", t.name)));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(Self {
            model: GruModel {
                params,
                seed: stored.seed,
            },
            epoch: stored.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}
