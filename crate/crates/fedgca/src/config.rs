//! Experiment configuration: presets, flat key=value config files with
//! command-line overrides, and dataset references.
//!
//! Dataset references are strings of the form `scheme:key=value,...`:
//!
//! - `synth:count=N,seed=S[,offset=O][,rgb=true]` — the built-in digit
//!   corpus (grayscale, optionally replicated to RGB).
//! - `colorshift:count=N,seed=S[,offset=O],shift=T` — the digit corpus
//!   passed through the deterministic color-shift domain keyed by T.
//! - `idx:images=PATH,labels=PATH[,tag=NAME]` — IDX image/label pair.
//! - `dir:path=PATH,channels=C,height=H,width=W,classes=K[,tag=NAME]` —
//!   a labels.csv + PNG directory.
//!
//! Relative paths resolve against the `FEDGCA_DATA_DIR` environment
//! variable when set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{self, LabeledDataset};
use crate::digits;
use crate::error::{Error, Result};
use crate::evaluation::AblationSpec;
use crate::model::{CamNorm, ClassifierSpec};
use crate::objectives::CpForm;

/// Named method presets; each is an ablation of the same codebase so
/// comparisons differ only in the intended knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Fedgca,
    Fedavg,
    FedavgRc,
    Feddyn,
    FeddynRc,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedgca" => Ok(Preset::Fedgca),
            "fedavg" => Ok(Preset::Fedavg),
            "fedavg_rc" => Ok(Preset::FedavgRc),
            "feddyn" => Ok(Preset::Feddyn),
            "feddyn_rc" => Ok(Preset::FeddynRc),
            other => Err(Error::Config {
                key: "preset".into(),
                reason: format!(
                    "unknown preset `{other}` (expected fedgca, fedavg, fedavg_rc, feddyn, feddyn_rc)"
                ),
            }),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fedgca => "fedgca",
            Preset::Fedavg => "fedavg",
            Preset::FedavgRc => "fedavg_rc",
            Preset::Feddyn => "feddyn",
            Preset::FeddynRc => "feddyn_rc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub source_domain: String,
    pub target_domains: Vec<String>,
    pub client_count: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub dirichlet_concentration: f64,
    pub master_seed: u64,
    /// Evaluate targets every this many rounds (plus the final round).
    pub eval_every: usize,
    /// Checkpoint cadence in rounds; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub weighted_aggregation: bool,
    pub cp_form: CpForm,
    pub cam_norm: CamNorm,
    pub ablation: AblationSpec,
    pub classifier: ClassifierSpec,
    pub augment: AugmentConfig,
}

impl ExperimentConfig {
    /// Baseline defaults before preset expansion: the digits-scale
    /// training constants.
    pub fn defaults() -> Self {
        ExperimentConfig {
            preset: Preset::Fedgca,
            source_domain: "synth:count=1000,seed=1,rgb=true".into(),
            target_domains: vec!["colorshift:count=500,seed=1,offset=1000,shift=1".into()],
            client_count: 10,
            rounds: 50,
            local_epochs: 2,
            eta: 0.05,
            alpha: 0.1,
            beta: 0.1,
            batch_size: 64,
            dirichlet_concentration: 0.3,
            master_seed: 1,
            eval_every: 5,
            checkpoint_every: 0,
            weighted_aggregation: false,
            cp_form: CpForm::Bce,
            cam_norm: CamNorm::Softmax,
            ablation: AblationSpec::all_enabled(),
            classifier: ClassifierSpec::digits_default(3),
            augment: AugmentConfig::default(),
        }
    }

    /// Defaults after expanding a preset's knob settings.
    pub fn preset_defaults(preset: Preset) -> Self {
        let mut c = Self::defaults();
        c.preset = preset;
        match preset {
            Preset::Fedgca => {}
            Preset::Fedavg => {
                c.alpha = 0.0;
                c.beta = 0.0;
                c.augment.views = 0;
            }
            Preset::FedavgRc => {
                c.alpha = 0.0;
                c.beta = 0.0;
            }
            Preset::Feddyn => {
                c.beta = 0.0;
                c.augment.views = 0;
            }
            Preset::FeddynRc => {
                c.beta = 0.0;
            }
        }
        c
    }

    pub fn views(&self) -> usize {
        self.augment.views
    }

    pub fn validate(&self) -> Result<()> {
        let key_err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if self.client_count == 0 {
            return Err(key_err("client_count", "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(key_err("batch_size", "must be positive".into()));
        }
        if !(self.eta > 0.0) {
            return Err(key_err("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.alpha < 0.0 {
            return Err(key_err("alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(key_err("beta", format!("must be non-negative, got {}", self.beta)));
        }
        if !(self.dirichlet_concentration > 0.0) {
            return Err(key_err(
                "dirichlet_concentration",
                format!("must be positive, got {}", self.dirichlet_concentration),
            ));
        }
        self.classifier.validate()?;
        self.augment.validate()?;
        self.ablation.validate()?;

        let j = self.views();
        let preset_violation = |key: &str, rule: &str| {
            Err(key_err(
                key,
                format!("violates preset {}: {rule}", self.preset.name()),
            ))
        };
        match self.preset {
            Preset::Fedavg => {
                if self.alpha != 0.0 {
                    return preset_violation("alpha", "requires alpha=0");
                }
                if self.beta != 0.0 {
                    return preset_violation("beta", "requires beta=0");
                }
                if j != 0 {
                    return preset_violation("views", "requires views=0");
                }
            }
            Preset::FedavgRc => {
                if self.alpha != 0.0 {
                    return preset_violation("alpha", "requires alpha=0");
                }
                if self.beta != 0.0 {
                    return preset_violation("beta", "requires beta=0");
                }
                if j == 0 {
                    return preset_violation("views", "requires views>0");
                }
            }
            Preset::Feddyn => {
                if self.alpha <= 0.0 {
                    return preset_violation("alpha", "requires alpha>0");
                }
                if self.beta != 0.0 {
                    return preset_violation("beta", "requires beta=0");
                }
                if j != 0 {
                    return preset_violation("views", "requires views=0");
                }
            }
            Preset::FeddynRc => {
                if self.alpha <= 0.0 {
                    return preset_violation("alpha", "requires alpha>0");
                }
                if self.beta != 0.0 {
                    return preset_violation("beta", "requires beta=0");
                }
                if j == 0 {
                    return preset_violation("views", "requires views>0");
                }
            }
            Preset::Fedgca => {
                if self.alpha <= 0.0 {
                    return preset_violation("alpha", "requires alpha>0");
                }
                if self.beta <= 0.0 {
                    return preset_violation("beta", "requires beta>0");
                }
                if j == 0 {
                    return preset_violation("views", "requires views>0");
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = parse_list(key, value)?;
    if parts.len() != 2 {
        return Err(Error::Config {
            key: key.into(),
            reason: format!("expected two comma-separated numbers, got `{value}`"),
        });
    }
    Ok((parts[0], parts[1]))
}

fn apply_key(config: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "preset" => config.preset = value.parse()?,
        "source_domain" => config.source_domain = value.to_string(),
        "target_domains" => {
            config.target_domains = value
                .split_whitespace()
                .map(str::to_string)
                .collect();
        }
        "client_count" => config.client_count = parse_value(key, value)?,
        "rounds" => config.rounds = parse_value(key, value)?,
        "local_epochs" => config.local_epochs = parse_value(key, value)?,
        "eta" => config.eta = parse_value(key, value)?,
        "alpha" => config.alpha = parse_value(key, value)?,
        "beta" => config.beta = parse_value(key, value)?,
        "views" => config.augment.views = parse_value(key, value)?,
        "batch_size" => config.batch_size = parse_value(key, value)?,
        "dirichlet_concentration" => config.dirichlet_concentration = parse_value(key, value)?,
        "master_seed" => config.master_seed = parse_value(key, value)?,
        "eval_every" => config.eval_every = parse_value(key, value)?,
        "checkpoint_every" => config.checkpoint_every = parse_value(key, value)?,
        "weighted_aggregation" => config.weighted_aggregation = parse_value(key, value)?,
        "cp_form" => {
            config.cp_form = match value {
                "bce" => CpForm::Bce,
                "kl" => CpForm::Kl,
                other => {
                    return Err(Error::Config {
                        key: key.into(),
                        reason: format!("expected bce or kl, got `{other}`"),
                    })
                }
            }
        }
        "cam_norm" => {
            config.cam_norm = match value {
                "softmax" => CamNorm::Softmax,
                "min_max" => CamNorm::MinMax,
                other => {
                    return Err(Error::Config {
                        key: key.into(),
                        reason: format!("expected softmax or min_max, got `{other}`"),
                    })
                }
            }
        }
        "use_local_pred" => config.ablation.use_local_pred = parse_value(key, value)?,
        "use_global_pred" => config.ablation.use_global_pred = parse_value(key, value)?,
        "use_local_cam" => config.ablation.use_local_cam = parse_value(key, value)?,
        "use_global_cam" => config.ablation.use_global_cam = parse_value(key, value)?,
        "conv_channels" => config.classifier.conv_channels = parse_list(key, value)?,
        "class_count" => config.classifier.class_count = parse_value(key, value)?,
        "input_shape" => {
            let parts: Vec<usize> = value
                .split('x')
                .map(|s| parse_value(key, s))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("expected CxHxW, got `{value}`"),
                });
            }
            config.classifier.input_shape = (parts[0], parts[1], parts[2]);
        }
        "kernel_sizes" => config.augment.kernel_sizes = parse_list(key, value)?,
        "corruption_scales" => config.augment.corruption_scales = parse_list(key, value)?,
        "mixing_weight_range" => config.augment.mixing_weight_range = parse_pair(key, value)?,
        "corruption_factor_range" => config.augment.corruption_factor_range = parse_pair(key, value)?,
        "op_probabilities" => {
            let p: Vec<f64> = parse_list(key, value)?;
            if p.len() != 3 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("expected three probabilities, got `{value}`"),
                });
            }
            config.augment.op_probabilities = [p[0], p[1], p[2]];
        }
        other => {
            return Err(Error::Config {
                key: other.into(),
                reason: "unknown configuration key".into(),
            })
        }
    }
    Ok(())
}

fn split_pairs(source: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: format!("{origin}:{}", lineno + 1),
                reason: format!("expected key=value, got `{line}`"),
            });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a flat key=value config file (optional) and applies overrides
/// last. The preset, wherever it appears, is expanded first so later
/// keys refine it; preset invariants are checked at the end.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        pairs.extend(split_pairs(&text, &p.display().to_string())?);
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config {
                key: o.clone(),
                reason: "override must be key=value".into(),
            });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let preset = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.parse())
        .transpose()?
        .unwrap_or_default();
    let mut config = ExperimentConfig::preset_defaults(preset);
    for (k, v) in &pairs {
        if k == "preset" {
            continue;
        }
        apply_key(&mut config, k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn ref_params(body: &str, reference: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for part in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((k, v)) = part.split_once('=') else {
            return Err(Error::Dataset(format!(
                "dataset reference `{reference}`: expected key=value, got `{part}`"
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn ref_get<T: FromStr>(
    params: &BTreeMap<String, String>,
    key: &str,
    reference: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = params.get(key).ok_or_else(|| {
        Error::Dataset(format!("dataset reference `{reference}` is missing `{key}`"))
    })?;
    v.parse().map_err(|e| {
        Error::Dataset(format!(
            "dataset reference `{reference}`: cannot parse {key}=`{v}`: {e}"
        ))
    })
}

fn ref_get_or<T: FromStr>(
    params: &BTreeMap<String, String>,
    key: &str,
    default: T,
    reference: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if params.contains_key(key) {
        ref_get(params, key, reference)
    } else {
        Ok(default)
    }
}

fn data_path(raw: &str, data_dir: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(raw);
    match data_dir {
        Some(root) if p.is_relative() => root.join(p),
        _ => p,
    }
}

/// Loads a dataset from a `scheme:key=value,...` reference; relative
/// file paths resolve against `data_dir`.
pub fn resolve_dataset(reference: &str, data_dir: Option<&Path>) -> Result<LabeledDataset> {
    let Some((scheme, body)) = reference.split_once(':') else {
        return Err(Error::Dataset(format!(
            "dataset reference `{reference}` has no scheme (expected synth:, colorshift:, idx:, dir:)"
        )));
    };
    let params = ref_params(body, reference)?;
    match scheme {
        "synth" => {
            let count = ref_get(&params, "count", reference)?;
            let seed = ref_get(&params, "seed", reference)?;
            let offset = ref_get_or(&params, "offset", 0, reference)?;
            let rgb = ref_get_or(&params, "rgb", false, reference)?;
            let ds = digits::generate_range(offset, count, seed, "synth-digits")?;
            if rgb {
                dataset::grayscale_to_rgb(&ds)
            } else {
                Ok(ds)
            }
        }
        "colorshift" => {
            let count = ref_get(&params, "count", reference)?;
            let seed = ref_get(&params, "seed", reference)?;
            let offset = ref_get_or(&params, "offset", 0, reference)?;
            let shift = ref_get(&params, "shift", reference)?;
            let base = digits::generate_range(offset, count, seed, "synth-digits")?;
            dataset::synth_colorshift_domain(&base, shift)
        }
        "idx" => {
            let images: String = ref_get(&params, "images", reference)?;
            let labels: String = ref_get(&params, "labels", reference)?;
            let tag = ref_get_or(&params, "tag", "idx".to_string(), reference)?;
            dataset::load_idx_dataset(
                &data_path(&images, data_dir),
                &data_path(&labels, data_dir),
                &tag,
            )
        }
        "dir" => {
            let path: String = ref_get(&params, "path", reference)?;
            let channels = ref_get(&params, "channels", reference)?;
            let height = ref_get(&params, "height", reference)?;
            let width = ref_get(&params, "width", reference)?;
            let classes = ref_get(&params, "classes", reference)?;
            let tag = ref_get_or(&params, "tag", "dir".to_string(), reference)?;
            dataset::load_directory_dataset(
                &data_path(&path, data_dir),
                &tag,
                channels,
                height,
                width,
                classes,
            )
        }
        other => Err(Error::Dataset(format!(
            "dataset reference `{reference}`: unknown scheme `{other}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn preset_defaults_respect_invariants() {
        for p in [
            Preset::Fedgca,
            Preset::Fedavg,
            Preset::FedavgRc,
            Preset::Feddyn,
            Preset::FeddynRc,
        ] {
            let c = ExperimentConfig::preset_defaults(p);
            c.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name()));
        }
    }

    #[test]
    fn empty_file_with_fedgca_gives_documented_defaults() {
        let c = parse_config(None, &["preset=fedgca".into()]).unwrap();
        assert_eq!(c.client_count, 10);
        assert_eq!(c.dirichlet_concentration, 0.3);
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.local_epochs, 2);
        assert_eq!(c.rounds, 50);
        assert_eq!(c.eta, 0.05);
        assert_eq!(c.views(), 2);
    }

    #[test]
    fn preset_violation_names_the_key() {
        let err = parse_config(None, &["preset=fedavg".into(), "alpha=0.5".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha"), "{msg}");
        assert!(msg.contains("fedavg"), "{msg}");
    }

    #[test]
    fn override_beats_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# experiment").unwrap();
        writeln!(f, "preset = fedgca").unwrap();
        writeln!(f, "beta = 0.2").unwrap();
        let c = parse_config(Some(f.path()), &["beta=8".into()]).unwrap();
        assert_eq!(c.beta, 8.0);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = parse_config(None, &["learning_rate=3".into()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn json_round_trip_is_identical() {
        let mut c = ExperimentConfig::preset_defaults(Preset::FeddynRc);
        c.master_seed = 99;
        c.augment.kernel_sizes = vec![1, 3];
        let json = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn structured_keys_parse() {
        let c = parse_config(
            None,
            &[
                "input_shape=1x8x8".into(),
                "conv_channels=4,8".into(),
                "class_count=2".into(),
                "op_probabilities=1,0,0".into(),
                "mixing_weight_range=0.2,0.8".into(),
                "cam_norm=min_max".into(),
                "cp_form=kl".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.classifier.input_shape, (1, 8, 8));
        assert_eq!(c.classifier.conv_channels, vec![4, 8]);
        assert_eq!(c.augment.op_probabilities, [1.0, 0.0, 0.0]);
        assert_eq!(c.augment.mixing_weight_range, (0.2, 0.8));
        assert_eq!(c.cam_norm, CamNorm::MinMax);
        assert_eq!(c.cp_form, CpForm::Kl);
    }

    #[test]
    fn synth_and_colorshift_refs_resolve() {
        let ds = resolve_dataset("synth:count=20,seed=3,rgb=true", None).unwrap();
        assert_eq!(ds.count(), 20);
        assert_eq!(ds.channels(), 3);
        let t = resolve_dataset("colorshift:count=10,seed=3,offset=20,shift=4", None).unwrap();
        assert_eq!(t.count(), 10);
        assert_eq!(t.channels(), 3);
    }

    #[test]
    fn idx_ref_resolves_relative_to_data_dir() {
        let dir = tempfile::tempdir().unwrap();
        let ds = digits::generate(10, 6, "digits").unwrap();
        dataset::write_idx_dataset(
            &ds,
            &dir.path().join("img.idx"),
            &dir.path().join("lab.idx"),
        )
        .unwrap();
        let back = resolve_dataset("idx:images=img.idx,labels=lab.idx", Some(dir.path())).unwrap();
        assert_eq!(back.count(), 10);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn bad_reference_is_descriptive() {
        let err = resolve_dataset("synth:count=5", None).unwrap_err();
        assert!(err.to_string().contains("seed"));
        let err = resolve_dataset("nope:count=5", None).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
