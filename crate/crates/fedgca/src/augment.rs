//! Style-complement augmentation.
//!
//! Builds the augmented set X+ = {x, x'_1, ..., x'_J} per batch from
//! three label-preserving photometric filter families: random
//! convolution, a mixing variant blending an image with its randomly
//! convolved version, and multi-scale texture corruption. All operators
//! keep pixels in [0,1] and never touch labels.
//!
//! Randomness conventions (the contract oracle tests replay):
//! - `rand_conv(batch, k, seed)` samples one kernel for the whole call
//!   from `rng::stream(&[seed])`, i.i.d. Normal(0, 1/(k*k*c_in)) in
//!   row-major (out, in, ky, kx) order.
//! - `mix_augment` draws from `rng::stream(&[seed])`: kernel-size index,
//!   then a child seed for the inner rand_conv, then one mixing weight
//!   per image.
//! - `texture_corrupt` uses `rng::stream(&[seed, image_index])` per
//!   image: scale index first, then tile factors in row-major tile order.
//! - `style_complement` view j draws from `rng::stream(&[seed, j])`:
//!   operator choice, then the operator's parameters, then a child seed
//!   passed to the operator.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::kernels::conv2d_same;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Number of augmented views J per image (views[0] is the original).
    pub views: usize,
    pub kernel_sizes: Vec<usize>,
    pub mixing_weight_range: (f64, f64),
    pub corruption_scales: Vec<usize>,
    pub corruption_factor_range: (f64, f64),
    /// Selection probabilities for (rand_conv, mix, texture).
    pub op_probabilities: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            views: 2,
            kernel_sizes: vec![1, 3, 5, 7],
            mixing_weight_range: (0.0, 1.0),
            corruption_scales: vec![1, 2, 4],
            corruption_factor_range: (0.7, 1.3),
            op_probabilities: [0.5, 0.3, 0.2],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::InvalidArgument(
                "kernel sizes must be odd and >= 1".into(),
            ));
        }
        if self.corruption_scales.is_empty() || self.corruption_scales.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(
                "corruption scales must be positive".into(),
            ));
        }
        let (lo, hi) = self.mixing_weight_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(
                "mixing weight range must be a sub-interval of [0,1]".into(),
            ));
        }
        let sum: f64 = self.op_probabilities.iter().sum();
        if self.op_probabilities.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "op probabilities must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// The original batch plus J augmented views sharing one label batch.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub views: Vec<Array4<f64>>,
    pub labels: Vec<usize>,
}

/// Samples the random convolution kernel used by [`rand_conv`].
pub fn sample_conv_kernel(channels: usize, kernel_size: usize, rng: &mut impl Rng) -> Array4<f64> {
    let std = (1.0 / (kernel_size * kernel_size * channels) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    Array4::from_shape_fn(
        (channels, channels, kernel_size, kernel_size),
        |_| normal.sample(rng),
    )
}

/// Raw channel-preserving convolution without any rescaling (test hook
/// for the linearity property).
pub fn conv_same_raw(batch: &Array4<f64>, kernel: &Array4<f64>) -> Array4<f64> {
    let bias = Array1::zeros(kernel.dim().0);
    conv2d_same(batch, kernel, Some(&bias))
}

/// Applies a fixed kernel and per-image min-max rescales to [0,1];
/// images with degenerate range collapse to constant 0.5.
pub fn rand_conv_with_kernel(batch: &Array4<f64>, kernel: &Array4<f64>) -> Array4<f64> {
    let mut out = conv_same_raw(batch, kernel);
    let n = out.dim().0;
    for i in 0..n {
        let mut img = out.index_axis_mut(ndarray::Axis(0), i);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in img.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-8 {
            img.fill(0.5);
        } else {
            let inv = 1.0 / (hi - lo);
            img.mapv_inplace(|v| (v - lo) * inv);
        }
    }
    out
}

fn check_kernel_size(batch: &Array4<f64>, kernel_size: usize) -> Result<()> {
    let (_, _, h, w) = batch.dim();
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size {kernel_size} must be odd"
        )));
    }
    if kernel_size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "kernel size {kernel_size} exceeds image extent {}x{h}x{w}",
            batch.dim().1
        )));
    }
    Ok(())
}

/// Random convolution: one freshly sampled kernel per call, applied to
/// the whole batch.
pub fn rand_conv(batch: &Array4<f64>, kernel_size: usize, seed: u64) -> Result<Array4<f64>> {
    check_kernel_size(batch, kernel_size)?;
    let mut rng = rng::stream(&[seed]);
    let kernel = sample_conv_kernel(batch.dim().1, kernel_size, &mut rng);
    Ok(rand_conv_with_kernel(batch, &kernel))
}

/// Mixing variant: per-image convex combination of the input with one
/// rand_conv rendering of the batch.
pub fn mix_augment(batch: &Array4<f64>, seed: u64, config: &AugmentConfig) -> Result<Array4<f64>> {
    let mut rng = rng::stream(&[seed]);
    let k = config.kernel_sizes[rng.random_range(0..config.kernel_sizes.len())];
    let child: u64 = rng.random();
    let conv = rand_conv(batch, k, child)?;
    let (n, c, h, w) = batch.dim();
    let (lo, hi) = config.mixing_weight_range;
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let m = if hi > lo { rng.random_range(lo..hi) } else { lo };
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(i, ci, y, x)] =
                        (1.0 - m) * batch[(i, ci, y, x)] + m * conv[(i, ci, y, x)];
                }
            }
        }
    }
    Ok(out)
}

/// Multi-scale texture corruption: per image, one tile scale is drawn
/// and every tile is multiplied by a random factor, clamped to [0,1].
pub fn texture_corrupt(
    batch: &Array4<f64>,
    seed: u64,
    config: &AugmentConfig,
) -> Result<Array4<f64>> {
    if config.corruption_scales.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(
            "corruption scales must be positive".into(),
        ));
    }
    let (n, c, h, w) = batch.dim();
    let (flo, fhi) = config.corruption_factor_range;
    let mut out = batch.clone();
    for i in 0..n {
        let mut rng = rng::stream(&[seed, i as u64]);
        let s = config.corruption_scales[rng.random_range(0..config.corruption_scales.len())];
        let tiles_y = h.div_ceil(s);
        let tiles_x = w.div_ceil(s);
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let f = if fhi > flo {
                    rng.random_range(flo..fhi)
                } else {
                    flo
                };
                for y in (ty * s)..((ty + 1) * s).min(h) {
                    for x in (tx * s)..((tx + 1) * s).min(w) {
                        for ci in 0..c {
                            out[(i, ci, y, x)] = (batch[(i, ci, y, x)] * f).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds the augmented set: view 0 is the input, views 1..=J are
/// independent draws with operator choice and parameters keyed by
/// (seed, view index).
pub fn style_complement(
    batch: &Array4<f64>,
    labels: &[usize],
    config: &AugmentConfig,
    seed: u64,
) -> Result<AugmentedBatch> {
    config.validate()?;
    if batch.dim().0 != labels.len() {
        return Err(Error::Shape(format!(
            "batch count {} != label count {}",
            batch.dim().0,
            labels.len()
        )));
    }
    let mut views = Vec::with_capacity(config.views + 1);
    views.push(batch.clone());
    for j in 1..=config.views {
        let mut rng = rng::stream(&[seed, j as u64]);
        let u: f64 = rng.random_range(0.0..1.0);
        let [p_rc, p_mix, _] = config.op_probabilities;
        let view = if u < p_rc {
            let k = config.kernel_sizes[rng.random_range(0..config.kernel_sizes.len())];
            let child: u64 = rng.random();
            rand_conv(batch, k, child)?
        } else if u < p_rc + p_mix {
            let child: u64 = rng.random();
            mix_augment(batch, child, config)?
        } else {
            let child: u64 = rng.random();
            texture_corrupt(batch, child, config)?
        };
        views.push(view);
    }
    Ok(AugmentedBatch {
        views,
        labels: labels.to_vec(),
    })
}
