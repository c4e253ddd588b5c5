//! Convolutional classifier with a GAP + linear head.
//!
//! Architecture per spec entry in `conv_channels`: 3x3 same-pad
//! convolution, ReLU, 2x2 max-pool; then global average pooling and one
//! fully connected layer to logits. The GAP+linear head is what makes
//! class activation maps (M = sum_l W_l * F_l) line up with the logits.
//!
//! Flat parameter order: for each conv block, kernel (C_out, C_in, 3, 3)
//! row-major then bias (C_out); finally FC weight (classes, F_last)
//! row-major then FC bias (classes).

use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{kernels, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub conv_channels: Vec<usize>,
    pub class_count: usize,
}

impl ClassifierSpec {
    pub fn digits_default(channels: usize) -> Self {
        ClassifierSpec {
            input_shape: (channels, 28, 28),
            conv_channels: vec![32, 64, 128],
            class_count: 10,
        }
    }

    /// Spatial extent of the final conv feature map (2x2 pools, floor).
    pub fn feature_spatial(&self) -> (usize, usize) {
        let (_, mut h, mut w) = self.input_shape;
        for _ in &self.conv_channels {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn feature_channels(&self) -> usize {
        *self.conv_channels.last().expect("at least one conv block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidArgument("conv_channels must be non-empty".into()));
        }
        let (h, w) = self.feature_spatial();
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "final feature map {h}x{w} too small for CAM extraction (needs >= 2x2)"
            )));
        }
        if self.class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        Ok(())
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        let mut d = 0;
        let mut cin = self.input_shape.0;
        for &cout in &self.conv_channels {
            d += cout * cin * 9 + cout;
            cin = cout;
        }
        d + self.class_count * cin + self.class_count
    }
}

/// Flat view of all trainable weights; the unit of client/server
/// exchange. Immutable value semantics: cloned, never shared mutably.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub flat: Vec<f64>,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn zeros(d: usize) -> Self {
        ModelParams { flat: vec![0.0; d] }
    }
}

/// He-style fan-in scaled normal initialization, zero biases.
pub fn init_params(spec: &ClassifierSpec, seed: u64) -> ModelParams {
    let mut rng = rng::stream(&[seed]);
    let mut flat = Vec::with_capacity(spec.param_count());
    let mut cin = spec.input_shape.0;
    for &cout in &spec.conv_channels {
        let fan_in = (cin * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
        flat.extend((0..cout * cin * 9).map(|_| normal.sample(&mut rng)));
        flat.extend(std::iter::repeat_n(0.0, cout));
        cin = cout;
    }
    let normal = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("valid normal");
    flat.extend((0..spec.class_count * cin).map(|_| normal.sample(&mut rng)));
    flat.extend(std::iter::repeat_n(0.0, spec.class_count));
    ModelParams { flat }
}

fn check_batch(spec: &ClassifierSpec, batch: &Array4<f64>) -> Result<()> {
    let (_, c, h, w) = batch.dim();
    if (c, h, w) != spec.input_shape {
        return Err(Error::Shape(format!(
            "batch shape ({c},{h},{w}) does not match input shape {:?}",
            spec.input_shape
        )));
    }
    Ok(())
}

/// Builds the classifier forward pass on a tape. Returns
/// (logits, final feature maps); the feature maps are the post-pool
/// activations that global average pooling consumes.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ClassifierSpec,
    params: Var,
    batch: Var,
) -> (Var, Var) {
    let mut offset = 0;
    let mut cin = spec.input_shape.0;
    let mut x = batch;
    for &cout in &spec.conv_channels {
        let kernel = tape.slice_reshape(params, offset, &[cout, cin, 3, 3]);
        offset += cout * cin * 9;
        let bias = tape.slice_reshape(params, offset, &[cout]);
        offset += cout;
        x = tape.conv2d(x, kernel, bias);
        x = tape.relu(x);
        x = tape.max_pool2(x);
        cin = cout;
    }
    let feats = x;
    let fc_w = tape.slice_reshape(params, offset, &[spec.class_count, cin]);
    offset += spec.class_count * cin;
    let fc_b = tape.slice_reshape(params, offset, &[spec.class_count]);
    let pooled = tape.gap(feats);
    let logits = tape.linear(pooled, fc_w, fc_b);
    (logits, feats)
}

/// Offset and shape of the FC weight inside the flat vector.
pub fn fc_weight_slice(spec: &ClassifierSpec) -> (usize, [usize; 2]) {
    let mut offset = 0;
    let mut cin = spec.input_shape.0;
    for &cout in &spec.conv_channels {
        offset += cout * cin * 9 + cout;
        cin = cout;
    }
    (offset, [spec.class_count, cin])
}

/// One deterministic forward pass: logits and final feature maps.
pub fn forward(
    spec: &ClassifierSpec,
    params: &ModelParams,
    batch: &Array4<f64>,
) -> Result<(Array2<f64>, Array4<f64>)> {
    check_batch(spec, batch)?;
    if params.dim() != spec.param_count() {
        return Err(Error::Shape(format!(
            "params length {} != spec parameter count {}",
            params.dim(),
            spec.param_count()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(Array1::from(params.flat.clone()).into_dyn(), false);
    let b = tape.constant(batch.clone().into_dyn());
    let (logits, feats) = forward_on_tape(&mut tape, spec, p, b);
    let logits = tape
        .value(logits)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits rank");
    let feats = tape
        .value(feats)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("feature rank");
    Ok((logits, feats))
}

/// Row-stochastic softmax predictions.
pub fn predict_softmax(
    spec: &ClassifierSpec,
    params: &ModelParams,
    batch: &Array4<f64>,
) -> Result<Array2<f64>> {
    let (logits, _) = forward(spec, params, batch)?;
    Ok(kernels::softmax_rows(&logits))
}

/// How raw CAMs are mapped onto probability matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CamNorm {
    #[default]
    Softmax,
    MinMax,
}

pub const CAM_TEMPERATURE: f64 = 1.0;
pub const CAM_FLOOR: f64 = 1e-3;

/// One class activation map query: raw weighted feature sum and its
/// floored probability normalization.
#[derive(Debug, Clone)]
pub struct CamMap {
    pub values: Array2<f64>,
    pub normalized: Array2<f64>,
}

/// Normalizes a raw CAM to a probability matrix with a uniform floor so
/// KL terms stay finite.
pub fn normalize_cam(raw: &Array2<f64>, method: CamNorm) -> Array2<f64> {
    let cells = raw.len() as f64;
    let base = match method {
        CamNorm::Softmax => {
            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut e = raw.mapv(|v| ((v - m) / CAM_TEMPERATURE).exp());
            let s: f64 = e.iter().sum();
            e.mapv_inplace(|v| v / s);
            e
        }
        CamNorm::MinMax => {
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                Array2::from_elem(raw.dim(), 1.0 / cells)
            } else {
                let shifted = raw.mapv(|v| (v - lo) / (hi - lo));
                let s: f64 = shifted.iter().sum();
                shifted.mapv(|v| v / s)
            }
        }
    };
    base.mapv(|v| (1.0 - CAM_FLOOR) * v + CAM_FLOOR / cells)
}

/// Raw and normalized CAMs for the queried class of each image.
pub fn compute_cam(
    spec: &ClassifierSpec,
    params: &ModelParams,
    batch: &Array4<f64>,
    class_ids: &[usize],
) -> Result<Vec<CamMap>> {
    let (_, feats) = forward(spec, params, batch)?;
    cam_from_feats(spec, params, &feats, class_ids)
}

/// CAMs from already-computed final feature maps; callers that need
/// both predictions and CAMs of one batch reuse a single forward pass.
pub fn cam_from_feats(
    spec: &ClassifierSpec,
    params: &ModelParams,
    feats: &Array4<f64>,
    class_ids: &[usize],
) -> Result<Vec<CamMap>> {
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= spec.class_count) {
        return Err(Error::InvalidArgument(format!(
            "class id {bad} outside [0, {})",
            spec.class_count
        )));
    }
    let (n, l, h, w) = feats.dim();
    if class_ids.len() != n {
        return Err(Error::Shape(format!(
            "{} class ids for {n} images",
            class_ids.len()
        )));
    }
    let (fc_off, [_, fdim]) = fc_weight_slice(spec);
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let wrow = &params.flat[fc_off + class_ids[i] * fdim..fc_off + (class_ids[i] + 1) * fdim];
        let mut raw = Array2::<f64>::zeros((h, w));
        for li in 0..l {
            let wl = wrow[li];
            for y in 0..h {
                for x in 0..w {
                    raw[(y, x)] += wl * feats[(i, li, y, x)];
                }
            }
        }
        let normalized = normalize_cam(&raw, CamNorm::Softmax);
        maps.push(CamMap {
            values: raw,
            normalized,
        });
    }
    Ok(maps)
}

/// Builds the floored normalized CAM of the queried classes on the
/// tape, returning an (images x cells) probability-row node. For the
/// softmax normalization gradients flow through the map; for min-max
/// the per-row offset and normalizer are detached constants taken from
/// the current values.
pub fn normalized_cam_on_tape(
    tape: &mut Tape,
    spec: &ClassifierSpec,
    params: Var,
    feats: Var,
    class_ids: &[usize],
    method: CamNorm,
) -> Var {
    let (fc_off, fc_shape) = fc_weight_slice(spec);
    let w = tape.slice_reshape(params, fc_off, &fc_shape);
    let raw = tape.cam(feats, w, class_ids);
    let dims = tape.value(raw).shape().to_vec();
    let (n, cells) = (dims[0], dims[1] * dims[2]);
    let flat = tape.reshape(raw, &[n, cells]);
    let base = match method {
        CamNorm::Softmax => tape.softmax_rows(flat),
        CamNorm::MinMax => {
            // normalized row = (v - lo) / (sum(v) - cells*lo); rows with a
            // degenerate range become the uniform row.
            let v = tape.value(flat).clone();
            let mut lo = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, cells]));
            let mut inv = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, cells]));
            let mut uniform = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, cells]));
            for i in 0..n {
                let row: Vec<f64> = (0..cells).map(|j| v[[i, j]]).collect();
                let rlo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let rhi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let rsum: f64 = row.iter().sum();
                if rhi - rlo < 1e-12 {
                    for j in 0..cells {
                        uniform[[i, j]] = 1.0 / cells as f64;
                    }
                } else {
                    for j in 0..cells {
                        lo[[i, j]] = rlo;
                        inv[[i, j]] = 1.0 / (rsum - cells as f64 * rlo);
                    }
                }
            }
            let lo_c = tape.constant(lo);
            let inv_c = tape.constant(inv);
            let uni_c = tape.constant(uniform);
            let shifted = tape.sub(flat, lo_c);
            let scaled = tape.mul(shifted, inv_c);
            tape.add(scaled, uni_c)
        }
    };
    tape.scale_shift(base, 1.0 - CAM_FLOOR, CAM_FLOOR / cells as f64)
}

/// Reverse-mode gradient of a scalar tape program with respect to the
/// flat parameter vector.
pub fn gradient<F>(params: &ModelParams, build_loss: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.leaf(Array1::from(params.flat.clone()).into_dyn(), true);
    let loss = build_loss(&mut tape, p)?;
    let grads = tape.backward(loss)?;
    let g = match grads.get(p) {
        Some(g) => g.as_slice().expect("contiguous gradient").to_vec(),
        None => vec![0.0; params.dim()],
    };
    Ok(g)
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    spec: ClassifierSpec,
    flat: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, spec: &ClassifierSpec, params: &ModelParams) -> Result<()> {
    let ck = Checkpoint {
        spec: spec.clone(),
        flat: params.flat.clone(),
    };
    let json = serde_json::to_string(&ck)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ClassifierSpec, ModelParams)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    Ok((ck.spec, ModelParams { flat: ck.flat }))
}

/// Evaluates a tape program on parameters without gradients (shared by
/// tests and the plain loss wrappers).
pub fn eval_scalar<F>(params: &ModelParams, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.leaf(Array1::from(params.flat.clone()).into_dyn(), false);
    let v = build(&mut tape, p)?;
    Ok(tape.scalar(v))
}

pub fn as_flat_array(params: &ModelParams) -> ArrayD<f64> {
    Array1::from(params.flat.clone()).into_dyn()
}
