//! The federated training loop: per-round client local training on the
//! combined objective, client dual-variable updates, and the server's
//! dual-corrected aggregation.
//!
//! One round: every client downloads the server snapshot w^t, runs I
//! epochs of minibatch gradient descent on
//! L = L_CE + alpha * L_OC + beta * (L_CP + L_CAM), updates its dual
//! variable lambda_i <- lambda_i - alpha * (w_i - w^t), and uploads its
//! final weights. The server then sets
//!   lambda^{t+1} = lambda^t - (alpha/K) * sum_i (w_i - w^t)
//!   w^{t+1}      = (1/K) * sum_i w_i - (1/alpha) * lambda^{t+1}
//! With alpha = 0 the dual correction is undefined, so that case takes
//! the plain-averaging path (FedAvg semantics) with lambda pinned at 0.
//!
//! All randomness is drawn from counter-keyed streams over
//! (master_seed, purpose, round, client, epoch, batch), so runs are
//! deterministic and independent of client execution order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{partition_dirichlet, LabeledDataset};
use crate::error::{Error, Result};
use crate::evaluation::RoundMetrics;
use crate::model::{
    self, forward_on_tape, normalized_cam_on_tape, ModelParams,
};
use crate::objectives::{
    cam_on_tape, ce_on_tape, cp_on_tape, loss_total, oc_on_tape, LossBreakdown,
};
use crate::rng;
use crate::tape::{Tape, Var};

/// Stream purpose tags; combined with (round, client, epoch, batch)
/// counters they key every random draw in a run.
const KEY_SHUFFLE: u64 = 0x5846_0001;
const KEY_AUGMENT: u64 = 0x5846_0002;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: LabeledDataset,
    pub lambda_i: Vec<f64>,
    pub current_params: ModelParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub global_params: ModelParams,
    pub lambda: Vec<f64>,
    pub eta: f64,
    pub alpha: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub client_count: usize,
}

impl ServerState {
    pub fn new(initial: ModelParams, config: &ExperimentConfig) -> Self {
        let d = initial.dim();
        ServerState {
            round: 0,
            global_params: initial,
            lambda: vec![0.0; d],
            eta: config.eta,
            alpha: config.alpha,
            local_epochs: config.local_epochs,
            rounds: config.rounds,
            client_count: config.client_count,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What one client returns from a round.
#[derive(Debug, Clone)]
pub struct ClientRoundOutcome {
    pub params: ModelParams,
    pub lambda: Vec<f64>,
    pub mean_loss: LossBreakdown,
}

/// Constant-step gradient descent over a fixed epoch/batch schedule;
/// the closure returns the gradient for (epoch, batch) at the current
/// weights.
pub fn descend<F>(
    params: &mut ModelParams,
    eta: f64,
    epochs: usize,
    batches_per_epoch: &[usize],
    mut grad: F,
) -> Result<()>
where
    F: FnMut(usize, usize, &ModelParams) -> Result<Vec<f64>>,
{
    for epoch in 0..epochs {
        for batch in 0..batches_per_epoch[epoch] {
            let g = grad(epoch, batch, params)?;
            if g.len() != params.dim() {
                return Err(Error::Shape(format!(
                    "gradient length {} != parameter count {}",
                    g.len(),
                    params.dim()
                )));
            }
            for (w, gi) in params.flat.iter_mut().zip(&g) {
                *w -= eta * gi;
            }
        }
    }
    Ok(())
}

/// The post-training dual update lambda_i <- lambda_i - alpha*(w - w^t);
/// with alpha = 0 the dual stays untouched.
pub fn updated_lambda(
    lambda: &[f64],
    w_final: &ModelParams,
    snapshot: &ModelParams,
    alpha: f64,
) -> Vec<f64> {
    if alpha == 0.0 {
        return lambda.to_vec();
    }
    lambda
        .iter()
        .zip(&w_final.flat)
        .zip(&snapshot.flat)
        .map(|((l, w), s)| l - alpha * (w - s))
        .collect()
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

fn flatten_cams(maps: &[model::CamMap]) -> Array2<f64> {
    let (h, w) = maps[0].normalized.dim();
    let mut out = Array2::zeros((maps.len(), h * w));
    for (i, m) in maps.iter().enumerate() {
        for (j, &v) in m.normalized.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// One batch's loss graph; returns the scalar total plus the values of
/// the individual parts for logging. Public so gradient-checking
/// harnesses can differentiate exactly the loss the clients train on.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    params_var: Var,
    config: &ExperimentConfig,
    snapshot: &ModelParams,
    lambda: &[f64],
    views: &[ndarray::Array4<f64>],
    labels: &[usize],
) -> Result<(Var, LossBreakdown)> {
    let spec = &config.classifier;
    let alpha = config.alpha;
    let beta = config.beta;
    let ab = &config.ablation;
    let use_cp = beta > 0.0 && ab.use_local_pred;
    let use_cam = beta > 0.0 && ab.use_local_cam;

    let mut logits_views = Vec::with_capacity(views.len());
    let mut feats_views = Vec::with_capacity(views.len());
    for v in views {
        let b = tape.constant(v.clone().into_dyn());
        let (logits, feats) = forward_on_tape(tape, spec, params_var, b);
        logits_views.push(logits);
        feats_views.push(feats);
    }
    let ce = ce_on_tape(tape, &logits_views, labels);
    let mut total = ce;

    // query class per image for CAMs: argmax of the original view under
    // the current local weights, read off the already-built tape
    let class_ids = if use_cam {
        let logits0 = tape
            .value(logits_views[0])
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logits rank");
        argmax_rows(&logits0)
    } else {
        Vec::new()
    };

    // one frozen-snapshot forward per view serves both the global
    // predictions and the global CAMs
    let mut global_probs: Option<Vec<Array2<f64>>> = None;
    let mut global_cams: Option<Vec<Array2<f64>>> = None;
    let need_gp = use_cp && ab.use_global_pred;
    let need_gc = use_cam && ab.use_global_cam;
    if need_gp || need_gc {
        let mut probs = Vec::with_capacity(views.len());
        let mut cams = Vec::with_capacity(views.len());
        for v in views {
            let (logits, feats) = model::forward(spec, snapshot, v)?;
            if need_gp {
                probs.push(crate::tape::kernels::softmax_rows(&logits));
            }
            if need_gc {
                cams.push(flatten_cams(&model::cam_from_feats(
                    spec, snapshot, &feats, &class_ids,
                )?));
            }
        }
        if need_gp {
            global_probs = Some(probs);
        }
        if need_gc {
            global_cams = Some(cams);
        }
    }

    let mut cp = None;
    let mut cam = None;
    if use_cp {
        let local_probs: Vec<Var> = logits_views
            .iter()
            .map(|&l| tape.softmax_rows(l))
            .collect();
        let v = cp_on_tape(tape, &local_probs, global_probs.as_deref(), config.cp_form);
        cp = Some(v);
    }
    if use_cam {
        let local_cams: Vec<Var> = feats_views
            .iter()
            .map(|&f| normalized_cam_on_tape(tape, spec, params_var, f, &class_ids, config.cam_norm))
            .collect();
        let v = cam_on_tape(tape, &local_cams, global_cams.as_deref());
        cam = Some(v);
    }
    if let (Some(cpv), Some(camv)) = (cp, cam) {
        let gc = tape.add(cpv, camv);
        let scaled = tape.scale(gc, beta);
        total = tape.add(total, scaled);
    } else if let Some(v) = cp.or(cam) {
        let scaled = tape.scale(v, beta);
        total = tape.add(total, scaled);
    }

    let mut oc = None;
    if alpha > 0.0 {
        let v = oc_on_tape(tape, params_var, &snapshot.flat, lambda, alpha);
        oc = Some(v);
        let scaled = tape.scale(v, alpha);
        total = tape.add(total, scaled);
    }

    let breakdown = loss_total(
        tape.scalar(ce),
        cp.map_or(0.0, |v| tape.scalar(v)),
        cam.map_or(0.0, |v| tape.scalar(v)),
        oc.map_or(0.0, |v| tape.scalar(v)),
        alpha,
        beta,
    )?;
    Ok((total, breakdown))
}

/// Algorithm lines 4-11 for one client: I local epochs of minibatch
/// gradient descent from the snapshot, then the dual update. The
/// snapshot is never mutated; global predictions and CAMs are computed
/// under the frozen snapshot.
pub fn client_update(
    client: &ClientState,
    snapshot: &ModelParams,
    config: &ExperimentConfig,
    round: usize,
) -> Result<ClientRoundOutcome> {
    if client.shard.count() == 0 {
        return Err(Error::Dataset(format!("client {} has an empty shard", client.id)));
    }
    let n = client.shard.count();
    let batch_size = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);

    let mut w = snapshot.clone();
    let mut losses: Vec<LossBreakdown> = Vec::new();

    for epoch in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(&[
            config.master_seed,
            KEY_SHUFFLE,
            round as u64,
            client.id as u64,
            epoch as u64,
        ]);
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch = client.shard.subset(chunk, client.shard.domain_tag.clone());
            let aug_seed: u64 = rng::stream(&[
                config.master_seed,
                KEY_AUGMENT,
                round as u64,
                client.id as u64,
                epoch as u64,
                bi as u64,
            ])
            .random();
            let aug =
                crate::augment::style_complement(&batch.images, &batch.labels, &config.augment, aug_seed)?;

            let mut tape = Tape::new();
            let p = tape.leaf(model::as_flat_array(&w), true);
            let (total, breakdown) = batch_loss_on_tape(
                &mut tape,
                p,
                config,
                snapshot,
                &client.lambda_i,
                &aug.views,
                &aug.labels,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    round,
                    client: client.id,
                    batch: epoch * batches_per_epoch + bi,
                });
            }
            losses.push(breakdown);
            let grads = tape.backward(total)?;
            let g = grads
                .get(p)
                .map(|g| g.as_slice().expect("contiguous gradient").to_vec())
                .unwrap_or_else(|| vec![0.0; w.dim()]);
            for (wi, gi) in w.flat.iter_mut().zip(&g) {
                *wi -= config.eta * gi;
            }
        }
    }

    let lambda = updated_lambda(&client.lambda_i, &w, snapshot, config.alpha);
    let mean_loss = mean_breakdown(&losses);
    Ok(ClientRoundOutcome {
        params: w,
        lambda,
        mean_loss,
    })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    if parts.is_empty() {
        return LossBreakdown::default();
    }
    let k = parts.len() as f64;
    LossBreakdown {
        ce: parts.iter().map(|p| p.ce).sum::<f64>() / k,
        cp: parts.iter().map(|p| p.cp).sum::<f64>() / k,
        cam: parts.iter().map(|p| p.cam).sum::<f64>() / k,
        gc: parts.iter().map(|p| p.gc).sum::<f64>() / k,
        oc: parts.iter().map(|p| p.oc).sum::<f64>() / k,
        total: parts.iter().map(|p| p.total).sum::<f64>() / k,
    }
}

/// Server lines 13-14. `weights`, when given, replaces the two
/// (1/K)-means with a weighted mean (the shard-proportional form);
/// weights must sum to 1. With alpha = 0 the aggregation is the plain
/// (weighted) average and lambda stays zero.
pub fn server_aggregate(
    server: &mut ServerState,
    client_params: &[ModelParams],
    weights: Option<&[f64]>,
) -> Result<()> {
    let k = server.client_count;
    if client_params.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} client parameter vectors, got {}",
            client_params.len()
        )));
    }
    let d = server.global_params.dim();
    if let Some(bad) = client_params.iter().find(|p| p.dim() != d) {
        return Err(Error::Shape(format!(
            "client parameter length {} != server dimension {d}",
            bad.dim()
        )));
    }
    let uniform = vec![1.0 / k as f64; k];
    let weights = match weights {
        Some(ws) => {
            if ws.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "expected {k} aggregation weights, got {}",
                    ws.len()
                )));
            }
            ws
        }
        None => &uniform,
    };

    let mut mean = vec![0.0; d];
    for (p, &wt) in client_params.iter().zip(weights) {
        for (m, &v) in mean.iter_mut().zip(&p.flat) {
            *m += wt * v;
        }
    }

    if server.alpha == 0.0 {
        server.global_params = ModelParams { flat: mean };
    } else {
        for i in 0..d {
            server.lambda[i] -= server.alpha * (mean[i] - server.global_params.flat[i]);
        }
        let mut next = vec![0.0; d];
        for i in 0..d {
            next[i] = mean[i] - server.lambda[i] / server.alpha;
        }
        server.global_params = ModelParams { flat: next };
    }
    server.round += 1;
    Ok(())
}

/// Per-round evaluation callback: given (round, params) returns the
/// per-domain accuracy map. The federation loop itself never sees
/// target datasets.
pub type EvalFn<'a> = dyn FnMut(usize, &ModelParams) -> Result<BTreeMap<String, f64>> + 'a;

/// The outer loop: partition the source, then T rounds of
/// broadcast -> K client updates -> aggregate, recording per-round
/// metrics. Deterministic given the config and master seed.
pub fn run_federation(
    config: &ExperimentConfig,
    source: &LabeledDataset,
    mut eval: Option<&mut EvalFn>,
) -> Result<(ModelParams, Vec<RoundMetrics>)> {
    config.validate()?;
    let spec = &config.classifier;
    let (c, h, w) = spec.input_shape;
    let dims = source.images.dim();
    if (dims.1, dims.2, dims.3) != (c, h, w) || source.class_count != spec.class_count {
        return Err(Error::Shape(format!(
            "source domain {:?}/{} classes does not match classifier input {:?}/{} classes",
            (dims.1, dims.2, dims.3),
            source.class_count,
            (c, h, w),
            spec.class_count
        )));
    }

    let plan = partition_dirichlet(
        source,
        config.client_count,
        config.dirichlet_concentration,
        config.master_seed,
    )?;
    let initial = model::init_params(spec, config.master_seed);
    let d = initial.dim();
    let mut clients: Vec<ClientState> = plan
        .assignments
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientState {
            id,
            shard: source.subset(idx, format!("{}-client{id}", source.domain_tag)),
            lambda_i: vec![0.0; d],
            current_params: initial.clone(),
        })
        .collect();
    let total_samples: usize = clients.iter().map(|c| c.shard.count()).sum();
    let shard_weights: Vec<f64> = clients
        .iter()
        .map(|c| c.shard.count() as f64 / total_samples as f64)
        .collect();

    let mut server = ServerState::new(initial, config);
    let mut history = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let snapshot = server.global_params.clone();
        let mut uploads = Vec::with_capacity(clients.len());
        let mut losses = Vec::with_capacity(clients.len());
        for client in &mut clients {
            let outcome = client_update(client, &snapshot, config, t)?;
            client.lambda_i = outcome.lambda;
            client.current_params = outcome.params.clone();
            losses.push(outcome.mean_loss);
            uploads.push(outcome.params);
        }
        let weights = config.weighted_aggregation.then_some(shard_weights.as_slice());
        server_aggregate(&mut server, &uploads, weights)?;

        let per_domain_accuracy = match (&mut eval, due(config.eval_every, t, config.rounds)) {
            (Some(cb), true) => cb(t, &server.global_params)?,
            _ => BTreeMap::new(),
        };
        history.push(RoundMetrics {
            round: t,
            per_domain_accuracy,
            mean_loss: mean_breakdown(&losses),
        });
    }
    Ok((server.global_params, history))
}

/// Eval cadence: every `every` rounds (counting from 1) plus the final
/// round; `every` = 0 means final round only.
pub fn due(every: usize, round: usize, rounds: usize) -> bool {
    let last = round + 1 == rounds;
    last || (every > 0 && (round + 1) % every == 0)
}

/// Appends one JSON object per round to a newline-delimited log.
pub fn write_history_ndjson(path: &Path, history: &[RoundMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in history {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_history_ndjson(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

// Re-exported for replay-style tests that need the exact stream keys.
#[doc(hidden)]
pub fn shuffle_stream(master_seed: u64, round: usize, client: usize, epoch: usize) -> impl rand::Rng {
    rng::stream(&[
        master_seed,
        KEY_SHUFFLE,
        round as u64,
        client as u64,
        epoch as u64,
    ])
}

#[doc(hidden)]
pub fn augment_seed(master_seed: u64, round: usize, client: usize, epoch: usize, batch: usize) -> u64 {
    rng::stream(&[
        master_seed,
        KEY_AUGMENT,
        round as u64,
        client as u64,
        epoch as u64,
        batch as u64,
    ])
    .random()
}
