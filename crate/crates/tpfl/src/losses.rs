//! The three scalar training objectives.
//!
//! `clip_matching_loss` is the supervised term: softmax over class
//! similarities at temperature Γ, negative log-likelihood at the true label,
//! averaged over the batch. `infonce_augmented_loss` is the contrastive
//! regularizer used when federating: it pulls the current prompt's embedding
//! toward the global prompt's embedding (positive) and away from the
//! client's previous prompt's embedding (negative), with both contrast
//! targets held out of the gradient. `batch_loss` combines them as
//! `total = l_con + mu · (l_aug_text + l_aug_visual)` and can return the
//! gradients with respect to the trainable prompt parameters.

use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::encoders::{FrozenEncoder, PromptPair};
use crate::error::{Error, Result};

/// How the text-side contrastive term treats the per-class embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextAugMode {
    /// One InfoNCE term per class, averaged (the default).
    PerClass,
    /// Classes mean-pooled to a single embedding, one InfoNCE term.
    Pooled,
}

impl TextAugMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "per_class" => Ok(TextAugMode::PerClass),
            "pooled" => Ok(TextAugMode::Pooled),
            other => Err(Error::InvalidArgument(format!(
                "unknown text_aug_mode '{other}' (expected per_class or pooled)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TextAugMode::PerClass => "per_class",
            TextAugMode::Pooled => "pooled",
        }
    }
}

/// Scalar components of one batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_aug_text: f64,
    pub l_aug_visual: f64,
    pub total: f64,
    pub mu: f64,
    pub gamma: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {gamma}"
        )));
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Domain {
            op,
            msg: "non-finite input embedding".into(),
        });
    }
    Ok(())
}

// ── matching loss ────────────────────────────────────────────────────

/// Plain evaluation of the matching loss: mean over the batch of
/// −log softmax_j(⟨z_vis_i, z_text_j⟩/Γ) at j = labels[i].
pub fn clip_matching_loss(
    z_text: &Tensor,
    z_vis: &Tensor,
    labels: &[u32],
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_finite("clip_matching_loss", z_text)?;
    check_finite("clip_matching_loss", z_vis)?;
    let c = z_text.shape()[0];
    let b = z_vis.shape()[0];
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    for &y in labels {
        if y as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
    }
    let logits = z_vis.matmul(&z_text.transpose()?)?.scale(1.0 / gamma);
    let probs = logits.softmax(1)?;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        acc += probs.data()[i * c + y as usize].ln();
    }
    Ok(-acc / b as f64)
}

/// Graph version of the matching loss; differentiable w.r.t. both embedding
/// sets.
pub fn clip_matching_loss_graph(
    g: &mut Graph,
    z_text: NodeId,
    z_vis: NodeId,
    labels: &[u32],
    gamma: f64,
) -> Result<NodeId> {
    check_gamma(gamma)?;
    check_finite("clip_matching_loss", g.value(z_text))?;
    check_finite("clip_matching_loss", g.value(z_vis))?;
    let c = g.value(z_text).shape()[0];
    let b = g.value(z_vis).shape()[0];
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    for &y in labels {
        if y as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
    }
    let zt = g.transpose(z_text)?;
    let logits = g.matmul(z_vis, zt)?;
    let scaled = g.scale(logits, 1.0 / gamma);
    let probs = g.softmax(scaled, 1)?;
    let logp = g.log(probs)?;
    // One-hot row selection keeps the label pick inside the graph.
    let one_hot = Tensor::from_fn(&[b, c], |ix| {
        if ix % c == labels[ix / c] as usize {
            1.0
        } else {
            0.0
        }
    });
    let sel = g.constant(one_hot);
    let picked = g.mul_elem(logp, sel)?;
    let sum = g.sum_all(picked);
    Ok(g.scale(sum, -1.0 / b as f64))
}

// ── contrastive augmentation ─────────────────────────────────────────

/// Plain evaluation of the two-term InfoNCE:
/// −log[e^{s_g/Γ} / (e^{s_g/Γ} + e^{s_p/Γ})] with s_g = ⟨z_new, z_global⟩
/// and s_p = ⟨z_new, z_prev⟩.
pub fn infonce_augmented_loss(
    z_new: &Tensor,
    z_global: &Tensor,
    z_prev: &Tensor,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    for z in [z_new, z_global, z_prev] {
        check_finite("infonce_augmented_loss", z)?;
        if z.shape() != z_new.shape() {
            return Err(Error::ShapeMismatch {
                op: "infonce_augmented_loss",
                lhs: z_new.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
    }
    let dot = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    };
    let s_g = dot(z_new, z_global) / gamma;
    let s_p = dot(z_new, z_prev) / gamma;
    // log-sum-exp with max subtraction.
    let m = s_g.max(s_p);
    Ok(-(s_g - m) + ((s_g - m).exp() + (s_p - m).exp()).ln())
}

/// Row-wise InfoNCE over matched rows of three `[R, D]` embedding matrices,
/// averaged over rows. The positive and negative inputs pass through a
/// stop-gradient, so only `z_new` receives gradient.
pub fn infonce_rows_graph(
    g: &mut Graph,
    z_new: NodeId,
    z_global: NodeId,
    z_prev: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    check_gamma(gamma)?;
    let rows = g.value(z_new).shape()[0];
    let pos = g.stop_gradient(z_global);
    let neg = g.stop_gradient(z_prev);
    let s_g = g.dot_rows(z_new, pos)?;
    let s_p = g.dot_rows(z_new, neg)?;
    let sg_col = g.reshape(s_g, &[rows, 1])?;
    let sp_col = g.reshape(s_p, &[rows, 1])?;
    let pair = g.concat(&[sg_col, sp_col], 1)?;
    let scaled = g.scale(pair, 1.0 / gamma);
    let probs = g.softmax(scaled, 1)?;
    let p_pos = g.slice(probs, 0, 1, 1)?;
    let logp = g.log(p_pos)?;
    let sum = g.sum_all(logp);
    Ok(g.scale(sum, -1.0 / rows as f64))
}

// ── combined objective ───────────────────────────────────────────────

/// Everything `batch_loss` needs beyond the prompts themselves.
pub struct BatchContext<'a> {
    pub text_enc: &'a FrozenEncoder,
    pub vis_enc: &'a FrozenEncoder,
    /// Raw (unprompted) images, flattened to `[B, H·W·Ch]` rows.
    pub images: &'a Tensor,
    pub labels: &'a [u32],
    /// Active visual-prompt mask for this batch, flattened to `[H·W·Ch]`.
    pub mask_flat: &'a Tensor,
    pub mu: f64,
    pub gamma: f64,
    /// When false the visual prompt is frozen at zero and images pass
    /// through untouched (the text-only protocol).
    pub visual_enabled: bool,
    pub text_aug_mode: TextAugMode,
}

/// Breakdown plus gradients for the trainable parameters.
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grad_context: Tensor,
    pub grad_delta: Option<Tensor>,
}

struct BuiltLoss {
    graph: Graph,
    root: NodeId,
    ctx: NodeId,
    delta: Option<NodeId>,
    breakdown: LossBreakdown,
}

fn pooled_row(g: &mut Graph, feats: NodeId) -> Result<NodeId> {
    let c = g.value(feats).shape()[0];
    let sum = g.sum_axis(feats, 0)?;
    let mean = g.scale(sum, 1.0 / c as f64);
    let unit = g.l2_normalize(mean, 0)?;
    let d = g.value(unit).shape()[0];
    g.reshape(unit, &[1, d])
}

/// Build the full batch objective as one graph.
///
/// When `mu == 0` the augmentation terms are not part of the objective; they
/// are neither built nor reported (both report as 0), and the loss root is
/// the matching loss itself. This keeps the μ=0 run of the augmented
/// protocol bit-identical to the plain protocol.
fn build_batch_loss(
    current: &PromptPair,
    global: &PromptPair,
    previous: &PromptPair,
    bc: &BatchContext,
) -> Result<BuiltLoss> {
    if bc.mu < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "aug weight must be nonnegative, got {}",
            bc.mu
        )));
    }
    let mut g = Graph::new();

    // Supervised matching term.
    let ctx = g.input(current.text.context.clone());
    let text_feats = current.text.features_graph(&mut g, bc.text_enc, ctx)?;
    let images = g.constant(bc.images.clone());
    let (prompted, delta, masked) = if bc.visual_enabled {
        let delta = g.input(current.visual.delta.clone());
        let p_len = g.value(delta).len();
        let flat = g.reshape(delta, &[p_len])?;
        let mask = g.constant(bc.mask_flat.clone());
        let masked = g.mul_elem(flat, mask)?;
        let prompted = g.add(images, masked)?;
        (prompted, Some(delta), Some((masked, mask)))
    } else {
        (images, None, None)
    };
    let z_vis = bc.vis_enc.forward_graph(&mut g, prompted)?;
    let l_con = clip_matching_loss_graph(&mut g, text_feats, z_vis, bc.labels, bc.gamma)?;

    if bc.mu == 0.0 {
        let l_con_val = g.value(l_con).item();
        return Ok(BuiltLoss {
            graph: g,
            root: l_con,
            ctx,
            delta,
            breakdown: LossBreakdown {
                l_con: l_con_val,
                l_aug_text: 0.0,
                l_aug_visual: 0.0,
                total: l_con_val,
                mu: bc.mu,
                gamma: bc.gamma,
            },
        });
    }

    // Text augmentation: contrast the current class features against the
    // global (positive) and previous (negative) prompts' features.
    let ctx_g = g.constant(global.text.context.clone());
    let feats_g = global.text.features_graph(&mut g, bc.text_enc, ctx_g)?;
    let ctx_p = g.constant(previous.text.context.clone());
    let feats_p = previous.text.features_graph(&mut g, bc.text_enc, ctx_p)?;
    let l_aug_text = match bc.text_aug_mode {
        TextAugMode::PerClass => {
            infonce_rows_graph(&mut g, text_feats, feats_g, feats_p, bc.gamma)?
        }
        TextAugMode::Pooled => {
            let new_pool = pooled_row(&mut g, text_feats)?;
            let g_pool = pooled_row(&mut g, feats_g)?;
            let p_pool = pooled_row(&mut g, feats_p)?;
            infonce_rows_graph(&mut g, new_pool, g_pool, p_pool, bc.gamma)?
        }
    };

    // Visual augmentation on the batch-mean image: one embedding per prompt
    // set, all three under this batch's mask.
    let l_aug_visual = if let Some((masked, mask)) = masked {
        let b = bc.images.shape()[0];
        let col_sums = g.sum_axis(images, 0)?;
        let xbar = g.scale(col_sums, 1.0 / b as f64);
        let p_len = g.value(xbar).len();
        let xbar_row = g.reshape(xbar, &[1, p_len])?;

        let new_bar = g.add(xbar_row, masked)?;
        let z_new = bc.vis_enc.forward_graph(&mut g, new_bar)?;

        let frozen_bar = |g: &mut Graph, vp: &Tensor| -> Result<NodeId> {
            let d = g.constant(vp.clone());
            let flat = g.reshape(d, &[p_len])?;
            let m = g.mul_elem(flat, mask)?;
            let row = g.add(xbar_row, m)?;
            bc.vis_enc.forward_graph(g, row)
        };
        let z_g = frozen_bar(&mut g, &global.visual.delta)?;
        let z_p = frozen_bar(&mut g, &previous.visual.delta)?;
        Some(infonce_rows_graph(&mut g, z_new, z_g, z_p, bc.gamma)?)
    } else {
        None
    };

    let aug_sum = match l_aug_visual {
        Some(v) => g.add(l_aug_text, v)?,
        None => l_aug_text,
    };
    let weighted = g.scale(aug_sum, bc.mu);
    let root = g.add(l_con, weighted)?;

    let breakdown = LossBreakdown {
        l_con: g.value(l_con).item(),
        l_aug_text: g.value(l_aug_text).item(),
        l_aug_visual: l_aug_visual.map_or(0.0, |v| g.value(v).item()),
        total: g.value(root).item(),
        mu: bc.mu,
        gamma: bc.gamma,
    };
    Ok(BuiltLoss {
        graph: g,
        root,
        ctx,
        delta,
        breakdown,
    })
}

/// Evaluate the combined objective without gradients.
pub fn total_loss(
    current: &PromptPair,
    global: &PromptPair,
    previous: &PromptPair,
    bc: &BatchContext,
) -> Result<LossBreakdown> {
    Ok(build_batch_loss(current, global, previous, bc)?.breakdown)
}

/// Evaluate the combined objective and differentiate it with respect to the
/// current prompt's context and (when the visual prompt is enabled) delta.
pub fn batch_loss(
    current: &PromptPair,
    global: &PromptPair,
    previous: &PromptPair,
    bc: &BatchContext,
) -> Result<BatchLoss> {
    let built = build_batch_loss(current, global, previous, bc)?;
    let mut grads = built.graph.backward(built.root)?;
    let grad_context = grads
        .take(built.ctx)
        .unwrap_or_else(|| Tensor::zeros(current.text.context.shape()));
    let grad_delta = built.delta.map(|id| {
        grads
            .take(id)
            .unwrap_or_else(|| Tensor::zeros(current.visual.delta.shape()))
    });
    Ok(BatchLoss {
        breakdown: built.breakdown,
        grad_context,
        grad_delta,
    })
}
