//! Acceptance gate: ten end-to-end checks, one per release criterion.
//!
//! Every test prints a single `[PASS]`/`[FAIL]` line and then asserts on the
//! same condition, so `cargo test --test acceptance -- --nocapture` reads as
//! a checklist while a plain `cargo test` still fails loudly. The training
//! checks (criteria 4–9) run real federations at the crate defaults; the
//! whole target finishes in a few minutes on one core.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tpfl::config::ExperimentConfig;
use tpfl::data::{generate_synthetic, load_dataset, save_dataset, Split};
use tpfl::diffgraph::fd::{fd_gradient, max_rel_err, FD_STEP};
use tpfl::diffgraph::{Graph, Tensor};
use tpfl::encoders::{
    make_class_embeddings, EncoderKind, FrozenEncoder, PromptPair, Template, TextPrompt,
    VisualPrompt,
};
use tpfl::error::Error;
use tpfl::federation::{aggregate_prompts, server_run, ProtocolVariant, RoundMetrics};
use tpfl::harness::run_experiment;
use tpfl::losses::{
    batch_loss, clip_matching_loss, infonce_augmented_loss, infonce_rows_graph, total_loss,
    BatchContext, TextAugMode,
};

/// Print the checklist line, then assert on it so failures carry the same
/// message.
fn report(criterion: usize, what: &str, pass: bool, details: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] criterion {criterion}: {what} — {details}");
    println!("{line}");
    assert!(pass, "{line}");
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Final-round accuracy and macro-F1 for every seed in the config.
fn final_metrics_per_seed(cfg: &ExperimentConfig) -> (Vec<f64>, Vec<f64>) {
    let mut accs = Vec::new();
    let mut f1s = Vec::new();
    for &seed in &cfg.seeds {
        let run = server_run(cfg, seed).unwrap();
        let last = run.final_metrics().expect("at least one round");
        accs.push(last.accuracy);
        f1s.push(last.macro_f1);
    }
    (accs, f1s)
}

// ── criterion 1: gradients ───────────────────────────────────────────

/// One randomly shaped training scenario for the gradient check.
struct GradCase {
    text_enc: FrozenEncoder,
    vis_enc: FrozenEncoder,
    class_emb: Tensor,
    class_position: usize,
    template: Template,
    context: Tensor,
    delta: Tensor,
    global: PromptPair,
    previous: PromptPair,
    images: Tensor,
    labels: Vec<u32>,
    mask: Tensor,
    mu: f64,
    gamma: f64,
    visual_enabled: bool,
    text_aug_mode: TextAugMode,
}

impl GradCase {
    fn random(case: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1000 + case);
        let l = rng.random_range(1..=3);
        let token_dim = rng.random_range(3..=6);
        let d = rng.random_range(4..=8);
        let hidden = rng.random_range(5..=10);
        let c = rng.random_range(2..=4);
        let b = rng.random_range(2..=5);
        let h = rng.random_range(4..=6);
        let w = rng.random_range(4..=6);
        let ch = rng.random_range(1..=2);
        let class_position = rng.random_range(0..=l);
        let template = match case % 3 {
            0 => Template::Padding { pad_width: 1 },
            1 => Template::FixedPatch { patch_size: 2 },
            _ => Template::RandomPatch { patch_size: 2 },
        };
        let class_emb = make_class_embeddings(rng.random(), c, token_dim).unwrap();
        let prompt = |rng: &mut ChaCha8Rng| PromptPair {
            text: TextPrompt::new(
                gaussian(rng, &[l, token_dim], 0.1),
                class_position,
                class_emb.clone(),
            )
            .unwrap(),
            visual: VisualPrompt {
                delta: gaussian(rng, &[h, w, ch], 0.2),
                template,
            },
        };
        let current = prompt(&mut rng);
        let global = prompt(&mut rng);
        let previous = prompt(&mut rng);
        // The offset is the caller's choice; fix one so the analytic and
        // numeric sides differentiate the same function.
        let mask = current.visual.mask_flat(current.visual.eval_offset());
        GradCase {
            text_enc: FrozenEncoder::new(
                EncoderKind::Text,
                rng.random(),
                (l + 1) * token_dim,
                hidden,
                d,
            ),
            vis_enc: FrozenEncoder::new(EncoderKind::Visual, rng.random(), h * w * ch, hidden, d),
            class_emb,
            class_position,
            template,
            context: current.text.context.clone(),
            delta: current.visual.delta.clone(),
            global,
            previous,
            images: Tensor::from_fn(&[b, h * w * ch], |_| rng.random::<f64>()),
            labels: (0..b).map(|_| rng.random_range(0..c as u32)).collect(),
            mask,
            mu: if case % 3 == 0 {
                0.0
            } else {
                0.3 + rng.random::<f64>()
            },
            // Keep the softmax temperature in the range where a step of
            // h = 1e-4 on unit-norm embeddings stays inside the oracle's
            // truncation budget; colder temperatures saturate the softmax
            // and finite differences stop being a meaningful referee.
            gamma: 0.2 + 0.4 * rng.random::<f64>(),
            visual_enabled: case % 4 != 1,
            text_aug_mode: if case % 2 == 0 {
                TextAugMode::PerClass
            } else {
                TextAugMode::Pooled
            },
        }
    }

    fn batch_context(&self) -> BatchContext<'_> {
        BatchContext {
            text_enc: &self.text_enc,
            vis_enc: &self.vis_enc,
            images: &self.images,
            labels: &self.labels,
            mask_flat: &self.mask,
            mu: self.mu,
            gamma: self.gamma,
            visual_enabled: self.visual_enabled,
            text_aug_mode: self.text_aug_mode,
        }
    }

    fn pair_from(&self, context: &Tensor, delta: &Tensor) -> PromptPair {
        PromptPair {
            text: TextPrompt::new(context.clone(), self.class_position, self.class_emb.clone())
                .unwrap(),
            visual: VisualPrompt {
                delta: delta.clone(),
                template: self.template,
            },
        }
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..20 {
        let gc = GradCase::random(case);
        let bc = gc.batch_context();

        // Analytic gradients of the combined objective (matching-only when
        // μ = 0, the full total otherwise).
        let current = gc.pair_from(&gc.context, &gc.delta);
        let analytic = batch_loss(&current, &gc.global, &gc.previous, &bc).unwrap();

        let mut f = |inputs: &[Tensor]| {
            let cand = gc.pair_from(&inputs[0], &inputs[1]);
            Ok(total_loss(&cand, &gc.global, &gc.previous, &bc)?.total)
        };
        let numeric =
            fd_gradient(&mut f, &[gc.context.clone(), gc.delta.clone()], FD_STEP).unwrap();
        worst = worst.max(max_rel_err(&analytic.grad_context, &numeric[0]));
        if gc.visual_enabled {
            worst = worst.max(max_rel_err(
                analytic.grad_delta.as_ref().unwrap(),
                &numeric[1],
            ));
        }

        // The contrastive term in isolation, on a standalone graph.
        let mut rng = ChaCha8Rng::seed_from_u64(0x2000 + case);
        let rows = rng.random_range(1..=4);
        let d = gc.text_enc.out_dim();
        // Unit rows, exactly what the encoders hand this loss in training.
        let unit = |rng: &mut ChaCha8Rng| {
            gaussian(rng, &[rows, d], 1.0).l2_normalize(1).unwrap()
        };
        let z_new = unit(&mut rng);
        let z_pos = unit(&mut rng);
        let z_neg = unit(&mut rng);
        let infonce = |z: &Tensor| -> tpfl::Result<(f64, Option<Tensor>)> {
            let mut g = Graph::new();
            let zn = g.input(z.clone());
            let zp = g.constant(z_pos.clone());
            let zq = g.constant(z_neg.clone());
            let root = infonce_rows_graph(&mut g, zn, zp, zq, gc.gamma)?;
            let value = g.value(root).item();
            let grad = g.backward(root)?.take(zn);
            Ok((value, grad))
        };
        let (_, grad) = infonce(&z_new).unwrap();
        let mut f2 = |inputs: &[Tensor]| infonce(&inputs[0]).map(|(v, _)| v);
        let numeric2 = fd_gradient(&mut f2, &[z_new.clone()], FD_STEP).unwrap();
        worst = worst.max(max_rel_err(&grad.unwrap(), &numeric2[0]));
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-5 && elapsed < Duration::from_secs(30);
    report(
        1,
        "reverse-mode gradients match central finite differences",
        pass,
        &format!("worst relative error {worst:.2e} over 20 random scenarios in {elapsed:.2?}"),
    );
}

// ── criterion 2: aggregation ─────────────────────────────────────────

#[test]
fn criterion_02_aggregation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    let mut worst = 0.0f64;
    let mut order_free = true;
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let l = rng.random_range(1..=3);
        let token_dim = rng.random_range(2..=5);
        let (h, w, ch) = (4, 5, rng.random_range(1..=2));
        let c = rng.random_range(2..=4);
        let class_position = rng.random_range(0..=l);
        let class_emb = make_class_embeddings(rng.random(), c, token_dim).unwrap();
        let template = Template::Padding { pad_width: 1 };

        let clients: Vec<(usize, PromptPair)> = (0..k)
            .map(|_| {
                let pair = PromptPair {
                    text: TextPrompt::new(
                        gaussian(&mut rng, &[l, token_dim], 0.5),
                        class_position,
                        class_emb.clone(),
                    )
                    .unwrap(),
                    visual: VisualPrompt {
                        delta: gaussian(&mut rng, &[h, w, ch], 0.5),
                        template,
                    },
                };
                (rng.random_range(1..=40), pair)
            })
            .collect();
        let contributions: Vec<(usize, usize, &PromptPair)> = clients
            .iter()
            .enumerate()
            .map(|(id, (n, pair))| (id, *n, pair))
            .collect();
        let agg = aggregate_prompts(&contributions).unwrap();

        // Independent brute force: Σ nᵢ·τᵢ / Σ nⱼ, entry by entry.
        let total: usize = clients.iter().map(|(n, _)| n).sum();
        let brute = |pick: &dyn Fn(&PromptPair) -> &Tensor, got: &Tensor| -> f64 {
            let mut worst_here = 0.0f64;
            for j in 0..got.len() {
                let expected: f64 = clients
                    .iter()
                    .map(|(n, pair)| *n as f64 * pick(pair).data()[j])
                    .sum::<f64>()
                    / total as f64;
                worst_here = worst_here.max((got.data()[j] - expected).abs());
            }
            worst_here
        };
        worst = worst.max(brute(&|p| &p.text.context, &agg.text.context));
        worst = worst.max(brute(&|p| &p.visual.delta, &agg.visual.delta));

        // Contributor order must not change a single bit.
        let mut shuffled = contributions.clone();
        shuffled.shuffle(&mut rng);
        let again = aggregate_prompts(&shuffled).unwrap();
        order_free &= again.text.context.bit_eq(&agg.text.context)
            && again.visual.delta.bit_eq(&agg.visual.delta)
            && again.text.class_embeddings.bit_eq(&agg.text.class_embeddings);
    }
    let pass = worst <= 1e-12 && order_free;
    report(
        2,
        "sample-weighted aggregation matches brute force and ignores order",
        pass,
        &format!("max deviation {worst:.2e} over 100 random cases, permutations bitwise identical"),
    );
}

// ── criterion 3: closed forms ────────────────────────────────────────

#[test]
fn criterion_03_closed_form_losses_at_degenerate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3333);
    let (c, d, b) = (7, 9, 5);

    // Identical class embeddings make every class equally similar, so the
    // matching loss must sit exactly at ln C.
    let row = gaussian(&mut rng, &[1, d], 1.0);
    let z_text = Tensor::from_fn(&[c, d], |i| row.data()[i % d]);
    let z_vis = gaussian(&mut rng, &[b, d], 1.0);
    let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..c as u32)).collect();
    let lnc_err = (clip_matching_loss(&z_text, &z_vis, &labels, 0.2).unwrap()
        - (c as f64).ln())
    .abs();

    // Identical positive and negative collapse the two-way softmax to ½, so
    // the contrastive loss is ln 2 and the pull and push cancel exactly.
    let z_new = gaussian(&mut rng, &[4, d], 1.0);
    let anchor = gaussian(&mut rng, &[4, d], 1.0);
    let mut g = Graph::new();
    let zn = g.input(z_new.clone());
    let zp = g.constant(anchor.clone());
    let zq = g.constant(anchor.clone());
    let root = infonce_rows_graph(&mut g, zn, zp, zq, 0.13).unwrap();
    let ln2_graph_err = (g.value(root).item() - 2f64.ln()).abs();
    let grad_max = g
        .backward(root)
        .unwrap()
        .take(zn)
        .unwrap()
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let ln2_scalar_err = (infonce_augmented_loss(&z_new, &anchor, &anchor, 0.13).unwrap()
        - 2f64.ln())
    .abs();

    let pass = lnc_err <= 1e-9 && ln2_graph_err <= 1e-9 && ln2_scalar_err <= 1e-9
        && grad_max <= 1e-12;
    report(
        3,
        "degenerate inputs hit the closed-form loss values",
        pass,
        &format!(
            "|l_con − ln C| = {lnc_err:.1e}, |l_aug − ln 2| = {:.1e}, max |∇| = {grad_max:.1e}",
            ln2_graph_err.max(ln2_scalar_err)
        ),
    );
}

// ── criterion 4: reductions ──────────────────────────────────────────

fn reduced(variant: ProtocolVariant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.variant = variant;
    cfg.rounds = 5;
    cfg.seeds = vec![0];
    cfg
}

/// Everything deterministic in a round record (wall time excluded).
fn metric_bits(rounds: &[RoundMetrics]) -> Vec<[u64; 5]> {
    rounds
        .iter()
        .map(|m| {
            [
                m.accuracy.to_bits(),
                m.macro_f1.to_bits(),
                m.l_con.to_bits(),
                m.l_aug_text.to_bits(),
                m.l_aug_visual.to_bits(),
            ]
        })
        .collect()
}

fn pair_bit_eq(a: &PromptPair, b: &PromptPair) -> bool {
    a.text.context.bit_eq(&b.text.context)
        && a.text.class_embeddings.bit_eq(&b.text.class_embeddings)
        && a.visual.delta.bit_eq(&b.visual.delta)
}

#[test]
fn criterion_04_variant_reductions_are_bitwise() {
    // Zero contrastive weight turns the augmented protocol into the plain
    // twin-prompt one.
    let mut zero_mu = reduced(ProtocolVariant::Atpfl);
    zero_mu.mu = 0.0;
    let a = server_run(&zero_mu, 0).unwrap();
    let t = server_run(&reduced(ProtocolVariant::Tpfl), 0).unwrap();
    let mu_reduction =
        metric_bits(&a.rounds) == metric_bits(&t.rounds) && pair_bit_eq(&a.final_global, &t.final_global);

    // Disabling the visual prompt leaves exactly the text-only protocol.
    let mut no_visual = reduced(ProtocolVariant::Tpfl);
    no_visual.visual_prompt = false;
    let tv = server_run(&no_visual, 0).unwrap();
    let p = server_run(&reduced(ProtocolVariant::PromptflTextOnly), 0).unwrap();
    let visual_reduction = metric_bits(&tv.rounds) == metric_bits(&p.rounds)
        && pair_bit_eq(&tv.final_global, &p.final_global);

    // A single-client federation is local training with extra bookkeeping.
    let mut solo_fed = reduced(ProtocolVariant::Tpfl);
    solo_fed.clients = 1;
    solo_fed.participants = 1;
    let mut solo_local = reduced(ProtocolVariant::LocalOnly);
    solo_local.clients = 1;
    solo_local.participants = 1;
    let f = server_run(&solo_fed, 0).unwrap();
    let lo = server_run(&solo_local, 0).unwrap();
    let solo_reduction = metric_bits(&f.rounds) == metric_bits(&lo.rounds)
        && pair_bit_eq(&f.final_global, &lo.clients[0].current);

    let pass = mu_reduction && visual_reduction && solo_reduction;
    report(
        4,
        "protocol reductions are bitwise identities",
        pass,
        &format!(
            "μ=0 {}, text-only {}, single-client {}",
            mu_reduction, visual_reduction, solo_reduction
        ),
    );
}

// ── criterion 5: frozen backbones ────────────────────────────────────

#[test]
fn criterion_05_frozen_weights_survive_a_full_run() {
    let cfg = ExperimentConfig::default();
    let run = server_run(&cfg, 0).unwrap();
    report(
        5,
        "encoder and class-embedding hashes unchanged by a full run",
        run.audit.intact(),
        &format!("{} rounds at the default configuration", cfg.rounds),
    );
}

// ── criteria 6–8: learning behaviour at the defaults ─────────────────

#[test]
fn criterion_06_variant_ordering_on_the_default_task() {
    let started = Instant::now();
    let mut means = Vec::new();
    for variant in [
        ProtocolVariant::Atpfl,
        ProtocolVariant::Tpfl,
        ProtocolVariant::PromptflTextOnly,
        ProtocolVariant::LocalOnly,
    ] {
        let mut cfg = ExperimentConfig::default();
        cfg.variant = variant;
        let (accs, _) = final_metrics_per_seed(&cfg);
        means.push(mean(&accs));
    }
    let elapsed = started.elapsed();
    let (a, t, p, l) = (means[0], means[1], means[2], means[3]);
    let ordered = a >= t && t >= p && p >= l;
    let gap = a - l;
    let pass = ordered && gap >= 0.05 && elapsed < Duration::from_secs(600);
    report(
        6,
        "mean final accuracy orders the protocols",
        pass,
        &format!(
            "augmented {a:.3} ≥ twin {t:.3} ≥ text-only {p:.3} ≥ local {l:.3}, \
             gap {gap:.3} ≥ 0.05, suite {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_07_macro_f1_grows_with_shots() {
    let f1_at = |shots: usize| {
        let mut cfg = ExperimentConfig::default();
        cfg.shots = shots;
        let (_, f1s) = final_metrics_per_seed(&cfg);
        mean(&f1s)
    };
    let one = f1_at(1);
    let sixteen = f1_at(16);
    report(
        7,
        "mean macro-F1 rises from one shot to sixteen",
        sixteen > one,
        &format!("16-shot {sixteen:.3} vs 1-shot {one:.3}"),
    );
}

#[test]
fn criterion_08_tenfold_clients_do_not_raise_accuracy() {
    let acc_at = |clients: usize| {
        let mut cfg = ExperimentConfig::default();
        cfg.clients = clients;
        cfg.participants = clients;
        let (accs, _) = final_metrics_per_seed(&cfg);
        mean(&accs)
    };
    let m10 = acc_at(10);
    let m100 = acc_at(100);
    report(
        8,
        "mean accuracy at 100 clients stays at or below 10 clients",
        m100 <= m10,
        &format!("100 clients {m100:.3} vs 10 clients {m10:.3}"),
    );
}

// ── criterion 9: reproducibility ─────────────────────────────────────

#[test]
fn criterion_09_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = 4;
    cfg.seeds = vec![0, 1];

    let run_into = |dir: &Path| {
        let mut c = cfg.clone();
        c.out_dir = dir.to_str().unwrap().to_string();
        run_experiment(&c).unwrap();
        (
            fs::read(dir.join("rounds.csv")).unwrap(),
            fs::read(dir.join("summary.csv")).unwrap(),
        )
    };
    let (rounds_a, summary_a) = run_into(&tmp.path().join("a"));
    let (rounds_b, summary_b) = run_into(&tmp.path().join("b"));

    let pass = rounds_a == rounds_b && summary_a == summary_b;
    report(
        9,
        "identical config and seeds reproduce byte-identical metrics files",
        pass,
        &format!(
            "rounds.csv {} bytes, summary.csv {} bytes",
            rounds_a.len(),
            summary_a.len()
        ),
    );
}

// ── criterion 10: persistence ────────────────────────────────────────

fn copy_dataset_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for name in ["manifest.json", "images.f64", "labels.u32"] {
        fs::copy(from.join(name), to.join(name)).unwrap();
    }
}

#[test]
fn criterion_10_dataset_persistence_is_lossless_and_fails_structurally() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    let ds = generate_synthetic(11, 8, 12, 16, 16, 1, 0.5, Split::Train).unwrap();
    save_dataset(&ds, &clean).unwrap();
    let back = load_dataset(&clean).unwrap();
    let lossless = back.all_rows().unwrap().bit_eq(&ds.all_rows().unwrap())
        && back.labels() == ds.labels()
        && back.dims() == ds.dims()
        && back.class_count() == ds.class_count()
        && back.split() == ds.split()
        && back.seed() == ds.seed();

    // Every corruption must surface as a structured data error, never a
    // panic or a silently wrong dataset.
    let corruptions: Vec<(&str, Box<dyn Fn(&Path)>)> = vec![
        (
            "truncated manifest",
            Box::new(|dir| {
                let path = dir.join("manifest.json");
                let bytes = fs::read(&path).unwrap();
                fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
            }),
        ),
        (
            "unsupported manifest version",
            Box::new(|dir| {
                let path = dir.join("manifest.json");
                let mut doc: serde_json::Value =
                    serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
                doc["version"] = serde_json::json!(999);
                fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
            }),
        ),
        (
            "truncated image blob",
            Box::new(|dir| {
                let path = dir.join("images.f64");
                let bytes = fs::read(&path).unwrap();
                fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
            }),
        ),
        (
            "label out of range",
            Box::new(|dir| {
                let path = dir.join("labels.u32");
                let mut bytes = fs::read(&path).unwrap();
                bytes[..4].copy_from_slice(&4242u32.to_le_bytes());
                fs::write(&path, bytes).unwrap();
            }),
        ),
        (
            "missing label file",
            Box::new(|dir| fs::remove_file(dir.join("labels.u32")).unwrap()),
        ),
    ];
    let mut structured = true;
    for (i, (name, corrupt)) in corruptions.iter().enumerate() {
        let dir = tmp.path().join(format!("case_{i}"));
        copy_dataset_dir(&clean, &dir);
        corrupt(&dir);
        match load_dataset(&dir) {
            Err(Error::DataFormat(_)) => {}
            other => {
                structured = false;
                println!("  corruption '{name}' produced {other:?} instead of a data error");
            }
        }
    }

    report(
        10,
        "dataset round-trip is bitwise lossless and corruption is structured",
        lossless && structured,
        &format!(
            "{} samples round-tripped, {} corruption cases rejected cleanly",
            ds.len(),
            corruptions.len()
        ),
    );
}
