//! Out-of-domain evaluation, ablation sweeps, and CAM export.
//!
//! Evaluation is top-1 accuracy over full target datasets with no
//! augmentation. Ablation rows toggle the four consistency factors
//! (local/global predictions, local/global CAMs) under a paired-seed
//! discipline: every row shares the data partition, initialization and
//! augmentation streams, so differences are attributable to the flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig, Preset};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::federation;
use crate::model::{self, compute_cam, ClassifierSpec, ModelParams};
use crate::objectives::LossBreakdown;

/// Per-round record appended to the run history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Empty on rounds without a scheduled evaluation.
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub mean_loss: LossBreakdown,
}

/// Which consistency factors participate in training: local/global
/// predictions (the prediction-consistency term) and local/global CAMs
/// (the map-consistency term).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub use_local_pred: bool,
    pub use_global_pred: bool,
    pub use_local_cam: bool,
    pub use_global_cam: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self::all_enabled()
    }
}

impl AblationSpec {
    pub fn all_enabled() -> Self {
        AblationSpec {
            use_local_pred: true,
            use_global_pred: true,
            use_local_cam: true,
            use_global_cam: true,
        }
    }

    pub fn none() -> Self {
        AblationSpec {
            use_local_pred: false,
            use_global_pred: false,
            use_local_cam: false,
            use_global_cam: false,
        }
    }

    /// Monotone nesting: a global flag requires its local counterpart,
    /// and the CAM term requires the prediction term.
    pub fn validate(&self) -> Result<()> {
        if self.use_global_pred && !self.use_local_pred {
            return Err(Error::InvalidArgument(
                "ablation: global predictions require local predictions".into(),
            ));
        }
        if self.use_global_cam && !self.use_local_cam {
            return Err(Error::InvalidArgument(
                "ablation: global CAMs require local CAMs".into(),
            ));
        }
        if self.use_local_cam && !self.use_local_pred {
            return Err(Error::InvalidArgument(
                "ablation: the CAM term requires the prediction term".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "P" } else { "-" };
        format!(
            "{}{}{}{}",
            mark(self.use_local_pred),
            if self.use_global_pred { "G" } else { "-" },
            if self.use_local_cam { "M" } else { "-" },
            if self.use_global_cam { "g" } else { "-" }
        )
    }
}

fn predict_chunked<F>(images: &Array4<f64>, chunk: usize, mut predict: F) -> Result<Vec<usize>>
where
    F: FnMut(&Array4<f64>) -> Result<Vec<usize>>,
{
    let n = images.dim().0;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut sub = Array4::zeros((idx.len(), images.dim().1, images.dim().2, images.dim().3));
        for (si, &i) in idx.iter().enumerate() {
            sub.index_axis_mut(ndarray::Axis(0), si)
                .assign(&images.index_axis(ndarray::Axis(0), i));
        }
        out.extend(predict(&sub)?);
        start = end;
    }
    Ok(out)
}

fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy per target domain under an arbitrary predictor;
/// the hook `evaluate` uses and that tests exercise with oracles.
pub fn evaluate_with<F>(targets: &[&LabeledDataset], mut predict: F) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(&Array4<f64>) -> Result<Vec<usize>>,
{
    let mut out = BTreeMap::new();
    for t in targets {
        if t.count() == 0 {
            return Err(Error::Dataset(format!("target domain {} is empty", t.domain_tag)));
        }
        let preds = predict_chunked(&t.images, EVAL_BATCH, &mut predict)?;
        let correct = preds.iter().zip(&t.labels).filter(|(p, l)| p == l).count();
        out.insert(t.domain_tag.clone(), correct as f64 / t.count() as f64);
    }
    Ok(out)
}

/// Top-1 accuracy of the model per target domain, batched, no
/// augmentation.
pub fn evaluate(
    spec: &ClassifierSpec,
    params: &ModelParams,
    targets: &[&LabeledDataset],
) -> Result<BTreeMap<String, f64>> {
    for t in targets {
        if t.class_count != spec.class_count {
            return Err(Error::Dataset(format!(
                "target domain {} has {} classes, classifier expects {}",
                t.domain_tag, t.class_count, spec.class_count
            )));
        }
    }
    evaluate_with(targets, |batch| {
        let (logits, _) = model::forward(spec, params, batch)?;
        Ok(argmax_rows(&logits))
    })
}

/// One ablation row: the flags plus per-domain accuracy for each seed,
/// in the order the seeds were given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationSpec,
    pub per_domain: BTreeMap<String, Vec<f64>>,
}

impl AblationRow {
    pub fn mean(&self, domain: &str) -> Option<f64> {
        self.per_domain
            .get(domain)
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_over_domains(&self) -> f64 {
        let means: Vec<f64> = self
            .per_domain
            .keys()
            .filter_map(|d| self.mean(d))
            .collect();
        means.iter().sum::<f64>() / means.len() as f64
    }
}

/// Applies an ablation row to a config. The all-disabled row is the
/// pure dynamic-regularization baseline, so it additionally drops the
/// consistency weight and the augmented views (and re-labels the preset
/// so validation matches the resulting knobs).
pub fn config_for_ablation(base: &ExperimentConfig, flags: AblationSpec) -> Result<ExperimentConfig> {
    flags.validate()?;
    let mut cfg = base.clone();
    cfg.ablation = flags;
    if !flags.use_local_pred {
        cfg.beta = 0.0;
        cfg.augment.views = 0;
        cfg.preset = if cfg.alpha > 0.0 { Preset::Feddyn } else { Preset::Fedavg };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs every ablation spec for every seed under the paired-seed
/// discipline (identical partitions, initializations, and augmentation
/// streams per seed) and reports final-round target accuracies.
pub fn run_ablation(
    base: &ExperimentConfig,
    grid: &[AblationSpec],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let data_dir = std::env::var_os("FEDGCA_DATA_DIR").map(PathBuf::from);
    let source = config::resolve_dataset(&base.source_domain, data_dir.as_deref())?;
    let targets: Vec<LabeledDataset> = base
        .target_domains
        .iter()
        .map(|r| config::resolve_dataset(r, data_dir.as_deref()))
        .collect::<Result<_>>()?;
    let target_refs: Vec<&LabeledDataset> = targets.iter().collect();

    let mut rows = Vec::with_capacity(grid.len());
    for &flags in grid {
        let mut cfg = config_for_ablation(base, flags)?;
        cfg.eval_every = 0; // final round only
        let mut per_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for &seed in seeds {
            cfg.master_seed = seed;
            let spec = cfg.classifier.clone();
            let refs = &target_refs;
            let mut eval_cb = move |_round: usize, params: &ModelParams| {
                evaluate(&spec, params, refs)
            };
            let (_, history) = federation::run_federation(&cfg, &source, Some(&mut eval_cb))?;
            let last = history
                .iter()
                .rev()
                .find(|m| !m.per_domain_accuracy.is_empty())
                .ok_or_else(|| Error::InvalidArgument("ablation run produced no evaluation".into()))?;
            for (d, &a) in &last.per_domain_accuracy {
                per_domain.entry(d.clone()).or_default().push(a);
            }
        }
        rows.push(AblationRow { flags, per_domain });
    }
    Ok(rows)
}

/// Long-format results CSV: `run_id, round, domain, accuracy` for every
/// evaluated round.
pub fn write_results_csv(path: &Path, run_id: &str, history: &[RoundMetrics]) -> Result<()> {
    let mut out = String::from("run_id,round,domain,accuracy\n");
    for m in history {
        for (d, a) in &m.per_domain_accuracy {
            out.push_str(&format!("{run_id},{},{d},{a}\n", m.round));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Table-shaped summary CSV: one row per labelled method/ablation, one
/// column per domain plus the average.
pub fn write_summary_csv(
    path: &Path,
    rows: &[(String, BTreeMap<String, f64>)],
) -> Result<()> {
    let mut domains: Vec<String> = Vec::new();
    for (_, m) in rows {
        for d in m.keys() {
            if !domains.contains(d) {
                domains.push(d.clone());
            }
        }
    }
    let mut out = String::from("method");
    for d in &domains {
        out.push_str(&format!(",{d}"));
    }
    out.push_str(",avg\n");
    for (label, m) in rows {
        out.push_str(label);
        let mut sum = 0.0;
        for d in &domains {
            let v = m.get(d).copied().unwrap_or(f64::NAN);
            sum += v;
            out.push_str(&format!(",{v:.4}"));
        }
        out.push_str(&format!(",{:.4}\n", sum / domains.len() as f64));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fixed 256-entry RGB colormap (piecewise-linear blue->cyan->yellow->red
/// ramp, computed once from the closed form below) so exported CAM PNGs
/// are byte-reproducible.
pub fn colormap(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0);
    let idx = (t * 255.0).round() as usize;
    let t = idx as f64 / 255.0;
    let ramp = |x: f64| (255.0 * x.clamp(0.0, 1.0)).round() as u8;
    let r = ramp(1.5 - (4.0 * t - 3.0).abs());
    let g = ramp(1.5 - (4.0 * t - 2.0).abs());
    let b = ramp(1.5 - (4.0 * t - 1.0).abs());
    [r, g, b]
}

/// Bilinear upsampling of a feature-resolution map to image resolution.
pub fn upsample_bilinear(m: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (hs, ws) = m.dim();
    let mut out = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let sy = ((y as f64 + 0.5) * hs as f64 / height as f64 - 0.5)
                .clamp(0.0, hs as f64 - 1.0);
            let sx = ((x as f64 + 0.5) * ws as f64 / width as f64 - 0.5)
                .clamp(0.0, ws as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(hs - 1), (x0 + 1).min(ws - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            out[(y, x)] = m[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
                + m[(y0, x1)] * (1.0 - fy) * fx
                + m[(y1, x0)] * fy * (1.0 - fx)
                + m[(y1, x1)] * fy * fx;
        }
    }
    out
}

/// Writes one PNG per sample: the bilinearly upsampled normalized CAM
/// of the predicted class rendered through the fixed colormap. File
/// names are `cam_<index>_<predclass>.png`; output is byte-identical
/// across runs for a fixed model and samples.
pub fn export_cams(
    spec: &ClassifierSpec,
    params: &ModelParams,
    samples: &Array4<f64>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (n, _, h, w) = samples.dim();
    let (logits, _) = model::forward(spec, params, samples)?;
    let classes = argmax_rows(&logits);
    let maps = compute_cam(spec, params, samples, &classes)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let up = upsample_bilinear(&maps[i].normalized, h, w);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(x as u32, y as u32, image::Rgb(colormap(up[(y, x)])));
            }
        }
        let path = out_dir.join(format!("cam_{i}_{}.png", classes[i]));
        buf.save(&path).map_err(|e| Error::Dataset(format!(
            "failed to write {}: {e}",
            path.display()
        )))?;
        paths.push(path);
    }
    Ok(paths)
}
