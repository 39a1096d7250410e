//! Frozen feature encoders and the two trainable prompt types.
//!
//! The encoders stand in for pretrained dual towers: small 2-layer tanh MLPs
//! with seed-derived weights, frozen for the life of a run, emitting
//! L2-normalized embeddings so dot products are cosine similarities. All
//! trainable capacity lives in the prompts: a textual context matrix fed
//! through the text encoder together with a frozen per-class token, and a
//! pixel-space visual perturbation restricted to a template mask.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Standard deviation for fresh context vectors; small enough that an
/// untrained prompt is dominated by the class token.
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Text,
    Visual,
}

/// Two-layer tanh MLP with weights drawn once from a seed and never updated.
/// Output rows are L2-normalized onto the unit sphere.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    kind: EncoderKind,
    w1: Tensor, // [in, hidden]
    b1: Tensor, // [hidden]
    w2: Tensor, // [hidden, out]
    b2: Tensor, // [out]
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = StandardNormal;
    Tensor::from_fn(shape, |_| {
        let z: f64 = normal.sample(rng);
        z * std
    })
}

impl FrozenEncoder {
    pub fn new(kind: EncoderKind, seed: u64, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // 1/sqrt(fan_in) keeps tanh pre-activations near unit scale, so the
        // random features stay informative instead of saturating.
        let w1 = gaussian(&mut rng, &[in_dim, hidden], 1.0 / (in_dim as f64).sqrt());
        let b1 = gaussian(&mut rng, &[hidden], 0.1);
        let w2 = gaussian(&mut rng, &[hidden, out_dim], 1.0 / (hidden as f64).sqrt());
        let b2 = gaussian(&mut rng, &[out_dim], 0.1);
        FrozenEncoder { kind, w1, b1, w2, b2 }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Plain forward pass: `[B, in]` → `[B, out]`, unit-norm rows. Uses the
    /// same kernels as the graph path, so both produce identical bits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add(&self.b1)?.tanh();
        let out = h.matmul(&self.w2)?.add(&self.b2)?;
        out.l2_normalize(1)
    }

    /// Differentiable forward pass. Weights enter the graph as constants, so
    /// no gradient ever reaches them.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let a1 = g.matmul(x, w1)?;
        let a1b = g.add(a1, b1)?;
        let h = g.tanh(a1b);
        let a2 = g.matmul(h, w2)?;
        let a2b = g.add(a2, b2)?;
        g.l2_normalize(a2b, 1)
    }

    /// SHA-256 over the little-endian weight bytes; the freeze audit compares
    /// this before and after a run.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            hasher.update(t.le_bytes());
        }
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 of one tensor's payload, used to audit the frozen class embeddings.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut hasher = Sha256::new();
    hasher.update(t.le_bytes());
    hex_digest(hasher)
}

/// Frozen stand-ins for class-name word embeddings: one standard-normal row
/// per class, fixed by the seed.
pub fn make_class_embeddings(seed: u64, class_count: usize, token_dim: usize) -> Result<Tensor> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    if token_dim == 0 {
        return Err(Error::InvalidArgument("token_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian(&mut rng, &[class_count, token_dim], 1.0))
}

/// Learnable context vectors around a frozen class token.
///
/// For class `c` the token sequence is the `context` rows with row `c` of
/// `class_embeddings` inserted at `class_position`, flattened to one vector
/// of length `(L+1)·token_dim` before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrompt {
    pub context: Tensor, // [L, token_dim]; the only trainable part
    pub class_position: usize,
    pub class_embeddings: Tensor, // [C, token_dim], frozen
}

impl TextPrompt {
    pub fn new(context: Tensor, class_position: usize, class_embeddings: Tensor) -> Result<Self> {
        let [l, d] = context.shape() else {
            return Err(Error::InvalidArgument(format!(
                "context must be rank 2, got shape {:?}",
                context.shape()
            )));
        };
        let (l, d) = (*l, *d);
        if !(1..=64).contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "context length must be in 1..=64, got {l}"
            )));
        }
        if class_position > l {
            return Err(Error::InvalidArgument(format!(
                "class_position {class_position} exceeds context length {l}"
            )));
        }
        match class_embeddings.shape() {
            [_, ed] if *ed == d => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "class embeddings shape {other:?} incompatible with token_dim {d}"
                )))
            }
        }
        Ok(TextPrompt {
            context,
            class_position,
            class_embeddings,
        })
    }

    /// Fresh prompt with small Gaussian context.
    pub fn init(
        seed: u64,
        context_len: usize,
        class_position: usize,
        class_embeddings: Tensor,
    ) -> Result<Self> {
        let token_dim = class_embeddings.shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = gaussian(&mut rng, &[context_len, token_dim], CONTEXT_INIT_STD);
        TextPrompt::new(context, class_position, class_embeddings)
    }

    pub fn context_len(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.class_embeddings.shape()[0]
    }

    /// Sequence matrix for all classes: `[C, (L+1)·token_dim]`, one flattened
    /// token sequence per row, built from the given context node so gradients
    /// reach the context.
    pub fn sequences_graph(&self, g: &mut Graph, ctx: NodeId) -> Result<NodeId> {
        let l = self.context_len();
        let d = self.token_dim();
        let c_count = self.class_count();
        let p = self.class_position;
        let class_emb = g.constant(self.class_embeddings.clone());

        let mut rows = Vec::with_capacity(c_count);
        for c in 0..c_count {
            let token = g.slice(class_emb, c, c + 1, 0)?;
            // Insertion splits on the position to avoid zero-extent slices.
            let seq = if p == 0 {
                g.concat(&[token, ctx], 0)?
            } else if p == l {
                g.concat(&[ctx, token], 0)?
            } else {
                let head = g.slice(ctx, 0, p, 0)?;
                let tail = g.slice(ctx, p, l, 0)?;
                g.concat(&[head, token, tail], 0)?
            };
            rows.push(g.reshape(seq, &[1, (l + 1) * d])?);
        }
        g.concat(&rows, 0)
    }

    /// Unit-norm class features `[C, D]` for this prompt, differentiable
    /// w.r.t. the supplied context node.
    pub fn features_graph(&self, g: &mut Graph, enc: &FrozenEncoder, ctx: NodeId) -> Result<NodeId> {
        let seq = self.sequences_graph(g, ctx)?;
        enc.forward_graph(g, seq)
    }

    /// Non-differentiable class features, for evaluation.
    pub fn features(&self, enc: &FrozenEncoder) -> Result<Tensor> {
        let mut g = Graph::new();
        let ctx = g.constant(self.context.clone());
        let feats = self.features_graph(&mut g, enc, ctx)?;
        Ok(g.value(feats).clone())
    }

    /// Embedding of one class, shape `[D]`.
    pub fn encode_class(&self, enc: &FrozenEncoder, class_id: usize) -> Result<Tensor> {
        if class_id >= self.class_count() {
            return Err(Error::InvalidArgument(format!(
                "class id {class_id} out of range for {} classes",
                self.class_count()
            )));
        }
        let feats = self.features(enc)?;
        let d = feats.shape()[1];
        feats.slice(class_id, class_id + 1, 0)?.reshape(&[d])
    }
}

/// Where the visual prompt is allowed to write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// A border of the given width around the image.
    Padding { pad_width: usize },
    /// A square patch anchored at the origin.
    FixedPatch { patch_size: usize },
    /// A square patch whose offset is redrawn per batch.
    RandomPatch { patch_size: usize },
}

impl Template {
    pub fn parse(name: &str, pad_width: usize, patch_size: usize) -> Result<Self> {
        match name {
            "padding" => Ok(Template::Padding { pad_width }),
            "fixed_patch" => Ok(Template::FixedPatch { patch_size }),
            "random_patch" => Ok(Template::RandomPatch { patch_size }),
            other => Err(Error::InvalidArgument(format!(
                "unknown template '{other}' (expected padding, fixed_patch, or random_patch)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Template::Padding { .. } => "padding",
            Template::FixedPatch { .. } => "fixed_patch",
            Template::RandomPatch { .. } => "random_patch",
        }
    }
}

/// Pixel-space trainable perturbation `delta`, active only inside the
/// template mask; entries outside are projected back to zero after updates.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompt {
    pub delta: Tensor, // [H, W, Ch]
    pub template: Template,
}

impl VisualPrompt {
    pub fn zeros(h: usize, w: usize, ch: usize, template: Template) -> Result<Self> {
        if h == 0 || w == 0 || ch == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims must be positive, got {h}x{w}x{ch}"
            )));
        }
        match template {
            Template::Padding { pad_width } => {
                if pad_width == 0 {
                    return Err(Error::InvalidArgument("pad_width must be positive".into()));
                }
            }
            Template::FixedPatch { patch_size } | Template::RandomPatch { patch_size } => {
                if patch_size == 0 || patch_size > h.min(w) {
                    return Err(Error::InvalidArgument(format!(
                        "patch_size {patch_size} invalid for {h}x{w} image"
                    )));
                }
            }
        }
        Ok(VisualPrompt {
            delta: Tensor::zeros(&[h, w, ch]),
            template,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.delta.shape();
        (s[0], s[1], s[2])
    }

    /// Patch offset for one batch. Only random_patch consumes the rng.
    pub fn draw_offset(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let (h, w, _) = self.dims();
        match self.template {
            Template::RandomPatch { patch_size } => (
                rng.random_range(0..=h - patch_size),
                rng.random_range(0..=w - patch_size),
            ),
            _ => (0, 0),
        }
    }

    /// Deterministic offset used at evaluation time: random_patch evaluates
    /// with the patch centered, the other templates ignore the offset.
    pub fn eval_offset(&self) -> (usize, usize) {
        let (h, w, _) = self.dims();
        match self.template {
            Template::RandomPatch { patch_size } => ((h - patch_size) / 2, (w - patch_size) / 2),
            _ => (0, 0),
        }
    }

    /// Binary pixel mask `[H, W]` for the given patch offset.
    pub fn mask_hw(&self, offset: (usize, usize)) -> Tensor {
        let (h, w, _) = self.dims();
        let inside = |i: usize, j: usize| -> bool {
            match self.template {
                Template::Padding { pad_width } => {
                    i < pad_width || i >= h - pad_width.min(h) || j < pad_width || j >= w - pad_width.min(w)
                }
                Template::FixedPatch { patch_size } => i < patch_size && j < patch_size,
                Template::RandomPatch { patch_size } => {
                    let (r0, c0) = offset;
                    i >= r0 && i < r0 + patch_size && j >= c0 && j < c0 + patch_size
                }
            }
        };
        Tensor::from_fn(&[h, w], |ix| {
            if inside(ix / w, ix % w) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Mask expanded across channels and flattened to `[H·W·Ch]`, matching a
    /// flattened image row.
    pub fn mask_flat(&self, offset: (usize, usize)) -> Tensor {
        let (h, w, ch) = self.dims();
        let hw = self.mask_hw(offset);
        Tensor::from_fn(&[h * w * ch], |ix| hw.data()[ix / ch])
    }

    /// One prompted image: `x + delta ⊙ mask`. The rng is consumed only for
    /// random_patch offsets.
    pub fn apply(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if x.shape() != self.delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "apply_visual_prompt",
                lhs: x.shape().to_vec(),
                rhs: self.delta.shape().to_vec(),
            });
        }
        let offset = self.draw_offset(rng);
        let mask = self.mask_flat(offset).reshape(self.delta.shape())?;
        x.masked_add(&self.delta, &mask)
    }

    /// Zero out delta entries outside the mask used for the latest update.
    pub fn project(&mut self, offset: (usize, usize)) {
        let mask = self
            .mask_flat(offset)
            .reshape(self.delta.shape())
            .expect("mask matches delta shape");
        self.delta = self.delta.mul_elem(&mask).expect("shapes match");
    }
}

/// One client's trainable state: both prompt modalities together.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub text: TextPrompt,
    pub visual: VisualPrompt,
}
