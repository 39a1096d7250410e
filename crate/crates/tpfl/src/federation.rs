//! The federated protocol: participant sampling, client-side prompt
//! training, sample-weighted aggregation, evaluation, and the server's
//! round loop.
//!
//! Only prompts ever move between clients and server. The frozen encoders
//! are built once per run from the master seed and hashed before and after
//! so a run can prove the backbones never changed.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, partition_label_skew, Dataset, Split};
use crate::diffgraph::Tensor;
use crate::encoders::{
    make_class_embeddings, tensor_hash, EncoderKind, FrozenEncoder, PromptPair, TextPrompt,
    VisualPrompt,
};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, BatchContext, LossBreakdown};
use crate::optim::Optimizer;
use crate::rng;

/// Which training protocol a run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolVariant {
    /// Each client trains alone; nothing is shared.
    LocalOnly,
    /// Federated text prompt only; the visual prompt stays off.
    PromptflTextOnly,
    /// Federated twin prompts, no contrastive term.
    Tpfl,
    /// Federated twin prompts with the contrastive augmentation.
    Atpfl,
}

impl ProtocolVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "local_only" => Ok(ProtocolVariant::LocalOnly),
            "promptfl_text_only" => Ok(ProtocolVariant::PromptflTextOnly),
            "tpfl" => Ok(ProtocolVariant::Tpfl),
            "atpfl" => Ok(ProtocolVariant::Atpfl),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected local_only, promptfl_text_only, tpfl, or atpfl)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolVariant::LocalOnly => "local_only",
            ProtocolVariant::PromptflTextOnly => "promptfl_text_only",
            ProtocolVariant::Tpfl => "tpfl",
            ProtocolVariant::Atpfl => "atpfl",
        }
    }

    /// Whether clients send prompts to the server and receive the aggregate
    /// back.
    pub fn aggregates(&self) -> bool {
        !matches!(self, ProtocolVariant::LocalOnly)
    }
}

/// One client's data shard and prompt state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Local training rows `[n, H·W·Ch]`, gathered once at setup.
    images: Tensor,
    labels: Vec<u32>,
    /// Prompts after this client's latest local training.
    pub current: PromptPair,
    /// Snapshot of `current` taken when the latest update began; the
    /// contrastive negative.
    pub previous: PromptPair,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Choose the round's participants: `k` distinct ids out of `total`,
/// returned ascending. The draw depends only on (seed, round).
pub fn sample_clients(total: usize, k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} of {total} clients"
        )));
    }
    if k == total {
        return Ok((0..total).collect());
    }
    let mut r = rng::stream(seed, "sampling", &[round as u64]);
    let mut ids = rand::seq::index::sample(&mut r, total, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-weighted average of the contributed prompts: each client weighs
/// `n_i / Σn`. Contributions are combined in ascending client-id order so
/// the floating-point reduction is reproducible, and a single contributor
/// passes through as an exact clone.
pub fn aggregate_prompts(contributions: &[(usize, usize, &PromptPair)]) -> Result<PromptPair> {
    if contributions.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to aggregate: no contributions".into(),
        ));
    }
    let mut sorted: Vec<&(usize, usize, &PromptPair)> = contributions.iter().collect();
    sorted.sort_by_key(|(id, _, _)| *id);
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::InvalidArgument(format!(
                "client {} contributed twice",
                pair[0].0
            )));
        }
    }
    let first = sorted[0].2;
    for &&(id, _, p) in &sorted[1..] {
        if p.text.context.shape() != first.text.context.shape()
            || p.visual.delta.shape() != first.visual.delta.shape()
        {
            return Err(Error::ShapeMismatch {
                op: "aggregate_prompts",
                lhs: first.text.context.shape().to_vec(),
                rhs: p.text.context.shape().to_vec(),
            });
        }
        if p.text.class_position != first.text.class_position {
            return Err(Error::InvalidArgument(format!(
                "client {id} aggregates a different class_position"
            )));
        }
    }
    let total: usize = sorted.iter().map(|(_, n, _)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "aggregation weights sum to zero samples".into(),
        ));
    }
    if sorted.len() == 1 {
        return Ok(first.clone());
    }

    let mut context = Tensor::zeros(first.text.context.shape());
    let mut delta = Tensor::zeros(first.visual.delta.shape());
    for &&(_, n, p) in &sorted {
        let w = n as f64 / total as f64;
        context = context.add(&p.text.context.scale(w))?;
        delta = delta.add(&p.visual.delta.scale(w))?;
    }
    Ok(PromptPair {
        text: TextPrompt::new(
            context,
            first.text.class_position,
            first.text.class_embeddings.clone(),
        )?,
        visual: VisualPrompt {
            delta,
            template: first.visual.template,
        },
    })
}

// ── evaluation ───────────────────────────────────────────────────────

/// Nearest-class prediction: argmax over ⟨z_vis_i, z_text_j⟩, ties to the
/// lowest class id.
pub fn predict(z_vis: &Tensor, z_text: &Tensor) -> Vec<u32> {
    let c = z_text.shape()[0];
    let d = z_text.shape()[1];
    let n = z_vis.shape()[0];
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = &z_vis.data()[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..c {
            let t = &z_text.data()[j * d..(j + 1) * d];
            let score: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        preds.push(best as u32);
    }
    preds
}

pub fn accuracy(preds: &[u32], labels: &[u32]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1. A class with neither true nor predicted
/// samples scores `empty_class_f1` (conventionally 1; 0 is the stricter
/// choice).
pub fn macro_f1(preds: &[u32], labels: &[u32], class_count: usize, empty_class_f1: f64) -> f64 {
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[y as usize] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..class_count {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        sum += if denom == 0 {
            empty_class_f1
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
    }
    sum / class_count as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Score one prompt pair on a test set. With the visual prompt enabled the
/// images are prompted at the deterministic evaluation offset before
/// encoding.
pub fn evaluate(
    pair: &PromptPair,
    text_enc: &FrozenEncoder,
    vis_enc: &FrozenEncoder,
    test: &Dataset,
    visual_enabled: bool,
    empty_class_f1: f64,
) -> Result<EvalMetrics> {
    let z_text = pair.text.features(text_enc)?;
    let mut x = test.all_rows()?;
    if visual_enabled {
        let offset = pair.visual.eval_offset();
        let mask = pair.visual.mask_flat(offset);
        let flat = pair.visual.delta.reshape(&[test.pixels()])?;
        x = x.add(&flat.mul_elem(&mask)?)?;
    }
    let z_vis = vis_enc.forward(&x)?;
    let preds = predict(&z_vis, &z_text);
    Ok(EvalMetrics {
        accuracy: accuracy(&preds, test.labels()),
        macro_f1: macro_f1(&preds, test.labels(), test.class_count(), empty_class_f1),
    })
}

// ── client update ────────────────────────────────────────────────────

/// Shared, read-only inputs to a client update.
pub struct UpdateEnv<'a> {
    pub text_enc: &'a FrozenEncoder,
    pub vis_enc: &'a FrozenEncoder,
    pub cfg: &'a ExperimentConfig,
    /// Master seed of the run (not the round).
    pub seed: u64,
    /// Learning rate already scheduled for this round.
    pub lr: f64,
}

/// Batch-mean loss components across one client update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossMeans {
    pub l_con: f64,
    pub l_aug_text: f64,
    pub l_aug_visual: f64,
    pub total: f64,
}

impl LossMeans {
    fn accumulate(&mut self, b: &LossBreakdown) {
        self.l_con += b.l_con;
        self.l_aug_text += b.l_aug_text;
        self.l_aug_visual += b.l_aug_visual;
        self.total += b.total;
    }

    fn add(&mut self, other: &LossMeans) {
        self.l_con += other.l_con;
        self.l_aug_text += other.l_aug_text;
        self.l_aug_visual += other.l_aug_visual;
        self.total += other.total;
    }

    fn scaled(&self, f: f64) -> LossMeans {
        LossMeans {
            l_con: self.l_con * f,
            l_aug_text: self.l_aug_text * f,
            l_aug_visual: self.l_aug_visual * f,
            total: self.total * f,
        }
    }
}

pub struct UpdateOutcome {
    /// The trained prompts this client sends up.
    pub prompts: PromptPair,
    pub losses: LossMeans,
    pub batches: usize,
}

/// Run one client's local training for the round.
///
/// The contrastive negative is frozen first: `previous` becomes whatever the
/// client's prompts were when this update began. Aggregating variants then
/// adopt the incoming global prompts as the starting point; the local-only
/// baseline keeps training its own. Optimizer state is fresh each update —
/// moments never survive a round trip through the server.
pub fn client_update(
    client: &mut ClientState,
    global: &PromptPair,
    env: &UpdateEnv,
    round: usize,
) -> Result<UpdateOutcome> {
    let cfg = env.cfg;
    client.previous = client.current.clone();
    if cfg.variant.aggregates() {
        client.current = global.clone();
    }

    let visual_enabled = cfg.effective_visual();
    let mu = cfg.effective_mu();
    let mut pair = client.current.clone();
    let mut opt_ctx = Optimizer::new(cfg.optimizer, pair.text.context.shape());
    let mut opt_delta = Optimizer::new(cfg.optimizer, pair.visual.delta.shape());

    let n = client.sample_count();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "client {} has no training samples",
            client.id
        )));
    }
    let bs = if cfg.batch_size == 0 || cfg.batch_size > n {
        n
    } else {
        cfg.batch_size
    };

    let mut sums = LossMeans::default();
    let mut batches = 0usize;
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if bs < n {
            order.shuffle(&mut rng::stream(
                env.seed,
                "sampling",
                &[round as u64, client.id as u64, epoch as u64],
            ));
        }
        for (b, chunk) in order.chunks(bs).enumerate() {
            let offset = pair.visual.draw_offset(&mut rng::stream(
                env.seed,
                "patch",
                &[round as u64, client.id as u64, epoch as u64, b as u64],
            ));
            let mask = pair.visual.mask_flat(offset);
            let images = gather_tensor_rows(&client.images, chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| client.labels[i]).collect();
            let bc = BatchContext {
                text_enc: env.text_enc,
                vis_enc: env.vis_enc,
                images: &images,
                labels: &labels,
                mask_flat: &mask,
                mu,
                gamma: cfg.gamma,
                visual_enabled,
                text_aug_mode: cfg.text_aug_mode,
            };
            let out = batch_loss(&pair, global, &client.previous, &bc)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    client: client.id,
                    round,
                    batch: b,
                });
            }
            sums.accumulate(&out.breakdown);
            batches += 1;

            opt_ctx.step(&mut pair.text.context, &out.grad_context, env.lr)?;
            if let Some(gd) = &out.grad_delta {
                opt_delta.step(&mut pair.visual.delta, gd, env.lr)?;
                pair.visual.project(offset);
            }
        }
    }

    client.current = pair.clone();
    Ok(UpdateOutcome {
        prompts: pair,
        losses: sums.scaled(1.0 / batches as f64),
        batches,
    })
}

fn gather_tensor_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    Tensor::from_fn(&[indices.len(), cols], |ix| {
        t.data()[indices[ix / cols] * cols + ix % cols]
    })
}

// ── server round loop ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub l_con: f64,
    pub l_aug_text: f64,
    pub l_aug_visual: f64,
    /// Wall-clock time of the round; never part of deterministic output.
    pub wall_ms: f64,
}

/// Backbone hashes taken before the first round and after the last; a run
/// is only valid if they match.
#[derive(Clone, Debug)]
pub struct FreezeAudit {
    pub text_before: String,
    pub text_after: String,
    pub visual_before: String,
    pub visual_after: String,
    pub class_emb_before: String,
    pub class_emb_after: String,
}

impl FreezeAudit {
    pub fn intact(&self) -> bool {
        self.text_before == self.text_after
            && self.visual_before == self.visual_after
            && self.class_emb_before == self.class_emb_after
    }
}

pub struct RunResult {
    pub rounds: Vec<RoundMetrics>,
    pub final_global: PromptPair,
    pub clients: Vec<ClientState>,
    pub audit: FreezeAudit,
}

impl RunResult {
    /// Metrics of the last completed round, if any round ran.
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }
}

/// Execute a full run for one master seed: generate the data, build the
/// frozen backbones, and iterate rounds of sample → local update →
/// aggregate → evaluate.
pub fn server_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let train = generate_synthetic(
        seed,
        cfg.class_count,
        cfg.train_per_class_resolved(),
        h,
        w,
        ch,
        cfg.noise_sigma,
        Split::Train,
    )?;
    let test = generate_synthetic(
        seed,
        cfg.class_count,
        cfg.test_per_class,
        h,
        w,
        ch,
        cfg.noise_sigma,
        Split::Test,
    )?;
    let plan = partition_label_skew(&train, cfg.clients, cfg.classes_per_client, cfg.shots, seed)?;

    let text_enc = FrozenEncoder::new(
        EncoderKind::Text,
        rng::derive_seed(seed, "init", &[0]),
        cfg.text_in_dim(),
        cfg.hidden_dim,
        cfg.embed_dim,
    );
    let vis_enc = FrozenEncoder::new(
        EncoderKind::Visual,
        rng::derive_seed(seed, "init", &[1]),
        cfg.pixels(),
        cfg.hidden_dim,
        cfg.embed_dim,
    );
    let emb = make_class_embeddings(
        rng::derive_seed(seed, "init", &[2]),
        cfg.class_count,
        cfg.token_dim,
    )?;
    let text0 = TextPrompt::init(
        rng::derive_seed(seed, "init", &[3]),
        cfg.context_len,
        cfg.resolved_class_position(),
        emb.clone(),
    )?;
    let visual0 = VisualPrompt::zeros(h, w, ch, cfg.template())?;
    let global0 = PromptPair {
        text: text0,
        visual: visual0,
    };

    let mut clients = Vec::with_capacity(cfg.clients);
    for (k, indices) in plan.assignments.iter().enumerate() {
        clients.push(ClientState {
            id: k,
            images: train.gather_rows(indices)?,
            labels: train.gather_labels(indices),
            current: global0.clone(),
            previous: global0.clone(),
        });
    }

    let text_before = text_enc.weight_hash();
    let visual_before = vis_enc.weight_hash();
    let emb_before = tensor_hash(&emb);

    let mut global = global0;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let lr = cfg.scheduler.lr(cfg.alpha, t, cfg.rounds);
        let picked = sample_clients(cfg.clients, cfg.participants, t, seed)?;
        let env = UpdateEnv {
            text_enc: &text_enc,
            vis_enc: &vis_enc,
            cfg,
            seed,
            lr,
        };

        let mut contribs: Vec<(usize, usize, PromptPair)> = Vec::with_capacity(picked.len());
        let mut loss_sum = LossMeans::default();
        for &k in &picked {
            let out = client_update(&mut clients[k], &global, &env, t)?;
            loss_sum.add(&out.losses);
            contribs.push((k, clients[k].sample_count(), out.prompts));
        }
        let losses = loss_sum.scaled(1.0 / picked.len() as f64);

        if cfg.variant.aggregates() {
            let refs: Vec<(usize, usize, &PromptPair)> =
                contribs.iter().map(|(id, n, p)| (*id, *n, p)).collect();
            global = aggregate_prompts(&refs)?;
        }

        let metrics = if cfg.variant.aggregates() {
            evaluate(
                &global,
                &text_enc,
                &vis_enc,
                &test,
                cfg.effective_visual(),
                cfg.empty_class_f1,
            )?
        } else {
            // No shared model exists; report the mean over every client's
            // own prompts.
            let mut acc = 0.0;
            let mut f1 = 0.0;
            for cl in &clients {
                let m = evaluate(
                    &cl.current,
                    &text_enc,
                    &vis_enc,
                    &test,
                    cfg.effective_visual(),
                    cfg.empty_class_f1,
                )?;
                acc += m.accuracy;
                f1 += m.macro_f1;
            }
            EvalMetrics {
                accuracy: acc / clients.len() as f64,
                macro_f1: f1 / clients.len() as f64,
            }
        };

        rounds.push(RoundMetrics {
            round: t,
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            l_con: losses.l_con,
            l_aug_text: losses.l_aug_text,
            l_aug_visual: losses.l_aug_visual,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(RunResult {
        rounds,
        final_global: global,
        clients,
        audit: FreezeAudit {
            text_before,
            text_after: text_enc.weight_hash(),
            visual_before,
            visual_after: vis_enc.weight_hash(),
            class_emb_before: emb_before,
            class_emb_after: tensor_hash(&emb),
        },
    })
}
