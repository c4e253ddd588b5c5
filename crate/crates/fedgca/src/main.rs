//! Experiment orchestrator: run federated training, ablation sweeps,
//! standalone evaluation, CAM export, and dataset utilities.
//!
//! Every training run writes a self-describing directory
//! `runs/<run_id>/` containing `config.json`, `partition.json`,
//! `manifest.json` (content hashes of all input datasets),
//! `history.ndjson`, `results.csv`, `summary.csv`, and
//! `checkpoints/`. The run id defaults to a hash of the config and
//! inputs, so identical setups map to identical ids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fedgca::config::{parse_config, resolve_dataset, ExperimentConfig};
use fedgca::dataset::{partition_dirichlet, write_idx_dataset, LabeledDataset};
use fedgca::evaluation::{
    self, evaluate, run_ablation, write_results_csv, write_summary_csv, AblationSpec,
};
use fedgca::federation::{due, run_federation, write_history_ndjson};
use fedgca::model::{self, ModelParams};
use fedgca::{digits, Error, Result};

#[derive(Parser)]
#[command(
    name = "fedgca",
    about = "Single-source federated domain generalization simulator"
)]
struct Cli {
    /// Root for relative dataset paths (falls back to FEDGCA_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with a preset or config file and evaluate on the targets.
    Run(RunArgs),
    /// Run an ablation grid over the consistency factors.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on target datasets.
    Eval(EvalArgs),
    /// Export CAM heatmap PNGs for a checkpoint.
    ExportCams(ExportArgs),
    /// Write the synthetic digit corpus as an IDX image/label pair.
    GenDigits(GenDigitsArgs),
    /// Debug: tile augmented views of a few samples into one PNG.
    ContactSheet(ContactSheetArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset shorthand for `--set preset=<name>`.
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key, e.g. `--set rounds=10`; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn parse(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p}"));
        }
        overrides.extend(self.sets.iter().cloned());
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output root; the run writes to <out>/<run_id>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; defaults to a hash of config and inputs.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated master seeds shared by every grid row.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint written by `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset references.
    #[arg(long = "target", required = true)]
    targets: Vec<String>,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset reference supplying the samples.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value = "cams")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDigitsArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving images.idx and labels.idx.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContactSheetArgs {
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 6)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

fn data_dir(cli_flag: &Option<PathBuf>) -> Option<PathBuf> {
    cli_flag
        .clone()
        .or_else(|| std::env::var_os("FEDGCA_DATA_DIR").map(PathBuf::from))
}

fn dataset_hash(ds: &LabeledDataset) -> String {
    let mut h = Sha256::new();
    for v in ds.images.iter() {
        h.update(v.to_le_bytes());
    }
    for &l in &ds.labels {
        h.update((l as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn cmd_run(args: &RunArgs, data_root: Option<&Path>) -> Result<()> {
    let config = args.config.parse()?;
    let source = resolve_dataset(&config.source_domain, data_root)?;
    let targets: Vec<LabeledDataset> = config
        .target_domains
        .iter()
        .map(|r| resolve_dataset(r, data_root))
        .collect::<Result<_>>()?;

    let config_json = config.to_json()?;
    let source_hash = dataset_hash(&source);
    let target_hashes: BTreeMap<String, String> = config
        .target_domains
        .iter()
        .zip(&targets)
        .map(|(r, t)| (r.clone(), dataset_hash(t)))
        .collect();
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        let mut h = Sha256::new();
        h.update(config_json.as_bytes());
        h.update(source_hash.as_bytes());
        for v in target_hashes.values() {
            h.update(v.as_bytes());
        }
        format!("{:x}", h.finalize())[..12].to_string()
    });
    let run_dir = args.out.join(&run_id);
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    std::fs::write(run_dir.join("config.json"), &config_json)
        .map_err(|e| Error::io(&run_dir, e))?;
    let manifest = serde_json::json!({
        "run_id": run_id,
        "source": { "reference": config.source_domain, "sha256": source_hash },
        "targets": target_hashes,
    });
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )
    .map_err(|e| Error::io(&run_dir, e))?;
    let plan = partition_dirichlet(
        &source,
        config.client_count,
        config.dirichlet_concentration,
        config.master_seed,
    )?;
    std::fs::write(run_dir.join("partition.json"), plan.to_json()?)
        .map_err(|e| Error::io(&run_dir, e))?;

    let target_refs: Vec<&LabeledDataset> = targets.iter().collect();
    let spec = config.classifier.clone();
    let ck = ckpt_dir.clone();
    let (checkpoint_every, rounds) = (config.checkpoint_every, config.rounds);
    let mut eval_cb = |round: usize, params: &ModelParams| {
        if checkpoint_every > 0 && due(checkpoint_every, round, rounds) {
            model::save_checkpoint(&ck.join(format!("round_{round}.json")), &spec, params)?;
        }
        evaluate(&spec, params, &target_refs)
    };
    let (final_params, history) = run_federation(&config, &source, Some(&mut eval_cb))?;

    write_history_ndjson(&run_dir.join("history.ndjson"), &history)?;
    write_results_csv(&run_dir.join("results.csv"), &run_id, &history)?;
    model::save_checkpoint(&ckpt_dir.join("final.json"), &config.classifier, &final_params)?;

    let final_acc = history
        .iter()
        .rev()
        .find(|m| !m.per_domain_accuracy.is_empty())
        .map(|m| m.per_domain_accuracy.clone())
        .unwrap_or_default();
    write_summary_csv(
        &run_dir.join("summary.csv"),
        &[(config.preset.name().to_string(), final_acc.clone())],
    )?;

    println!("run {run_id}: {} rounds", history.len());
    for (d, a) in &final_acc {
        println!("  {d}: {:.4}", a);
    }
    Ok(())
}

/// The default 5-row grid mirroring the factor table: none, P, P+PG,
/// P+PG+M, and all four.
fn default_grid() -> Vec<AblationSpec> {
    let row = |lp, gp, lc, gc| AblationSpec {
        use_local_pred: lp,
        use_global_pred: gp,
        use_local_cam: lc,
        use_global_cam: gc,
    };
    vec![
        row(false, false, false, false),
        row(true, false, false, false),
        row(true, true, false, false),
        row(true, true, true, false),
        row(true, true, true, true),
    ]
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let config = args.config.parse()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|e| Error::Config {
                key: "seeds".into(),
                reason: format!("cannot parse `{s}`: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let rows = run_ablation(&config, &default_grid(), &seeds)?;

    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("ablate-{}", seeds.first().copied().unwrap_or(0)));
    let run_dir = args.out.join(&run_id);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    std::fs::write(run_dir.join("config.json"), config.to_json()?)
        .map_err(|e| Error::io(&run_dir, e))?;

    let summary: Vec<(String, BTreeMap<String, f64>)> = rows
        .iter()
        .map(|r| {
            let means = r
                .per_domain
                .keys()
                .map(|d| (d.clone(), r.mean(d).unwrap()))
                .collect();
            (r.flags.label(), means)
        })
        .collect();
    write_summary_csv(&run_dir.join("summary.csv"), &summary)?;
    for (label, means) in &summary {
        let avg: f64 = means.values().sum::<f64>() / means.len() as f64;
        println!("{label}: avg {:.4}", avg);
    }
    println!("summary written to {}", run_dir.join("summary.csv").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, data_root: Option<&Path>) -> Result<()> {
    let (spec, params) = model::load_checkpoint(&args.checkpoint)?;
    let targets: Vec<LabeledDataset> = args
        .targets
        .iter()
        .map(|r| resolve_dataset(r, data_root))
        .collect::<Result<_>>()?;
    let refs: Vec<&LabeledDataset> = targets.iter().collect();
    let acc = evaluate(&spec, &params, &refs)?;
    for (d, a) in &acc {
        println!("{d}: {:.4}", a);
    }
    if let Some(out) = &args.out {
        write_summary_csv(out, &[("checkpoint".to_string(), acc)])?;
    }
    Ok(())
}

fn cmd_export_cams(args: &ExportArgs, data_root: Option<&Path>) -> Result<()> {
    let (spec, params) = model::load_checkpoint(&args.checkpoint)?;
    let ds = resolve_dataset(&args.data, data_root)?;
    let n = args.count.min(ds.count());
    let idx: Vec<usize> = (0..n).collect();
    let sub = ds.subset(&idx, ds.domain_tag.clone());
    let paths = evaluation::export_cams(&spec, &params, &sub.images, &args.out)?;
    println!("wrote {} CAM images to {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_gen_digits(args: &GenDigitsArgs) -> Result<()> {
    let ds = digits::generate(args.count, args.seed, "synth-digits")?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let images = args.out.join("images.idx");
    let labels = args.out.join("labels.idx");
    write_idx_dataset(&ds, &images, &labels)?;
    println!("wrote {} samples to {}", ds.count(), args.out.display());
    Ok(())
}

fn cmd_contact_sheet(args: &ContactSheetArgs, data_root: Option<&Path>) -> Result<()> {
    let ds = resolve_dataset(&args.data, data_root)?;
    let n = args.count.min(ds.count());
    let idx: Vec<usize> = (0..n).collect();
    let sub = ds.subset(&idx, ds.domain_tag.clone());
    let mut aug_config = fedgca::augment::AugmentConfig::default();
    aug_config.views = args.views;
    let aug = fedgca::augment::style_complement(&sub.images, &sub.labels, &aug_config, args.seed)?;

    let (_, c, h, w) = sub.images.dim();
    let cols = aug.views.len();
    let pad = 2usize;
    let sheet_w = cols * (w + pad) + pad;
    let sheet_h = n * (h + pad) + pad;
    let mut buf = image::RgbImage::from_pixel(sheet_w as u32, sheet_h as u32, image::Rgb([32, 32, 32]));
    for (vi, view) in aug.views.iter().enumerate() {
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| (view[(i, ch, y, x)].clamp(0.0, 1.0) * 255.0) as u8;
                    let rgb = if c >= 3 {
                        [px(0), px(1), px(2)]
                    } else {
                        [px(0), px(0), px(0)]
                    };
                    buf.put_pixel(
                        (pad + vi * (w + pad) + x) as u32,
                        (pad + i * (h + pad) + y) as u32,
                        image::Rgb(rgb),
                    );
                }
            }
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    buf.save(&args.out)
        .map_err(|e| Error::Dataset(format!("failed to write {}: {e}", args.out.display())))?;
    println!("wrote contact sheet to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = data_dir(&cli.data_dir);
    let result = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a, root.as_deref()),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Eval(a) => cmd_eval(a, root.as_deref()),
        Cmd::ExportCams(a) => cmd_export_cams(a, root.as_deref()),
        Cmd::GenDigits(a) => cmd_gen_digits(a),
        Cmd::ContactSheet(a) => cmd_contact_sheet(a, root.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
