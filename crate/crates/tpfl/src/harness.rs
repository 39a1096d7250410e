//! Experiment orchestration: multi-seed runs, CSV artifacts, ablation
//! sweeps, and plot-ready aggregates.
//!
//! Every artifact except `timing.csv` is a pure function of the config, so
//! rerunning an experiment reproduces those files byte for byte. Wall-clock
//! times live in their own file to keep that guarantee simple.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{server_run, RoundMetrics};

/// One round of one seed's run, as recorded in `rounds.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    pub seed: u64,
    pub metrics: RoundMetrics,
}

/// Everything `run_experiment` produced, after the artifacts are on disk.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    /// Seeds whose runs diverged to a non-finite loss and were dropped.
    pub failed_seeds: Vec<u64>,
    /// (seed, value) of the last round, per surviving seed.
    pub final_accuracy: Vec<(u64, f64)>,
    pub final_macro_f1: Vec<(u64, f64)>,
    pub out_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn final_accuracy_values(&self) -> Vec<f64> {
        self.final_accuracy.iter().map(|&(_, v)| v).collect()
    }

    pub fn final_macro_f1_values(&self) -> Vec<f64> {
        self.final_macro_f1.iter().map(|&(_, v)| v).collect()
    }
}

/// Mean and population standard deviation. Empty input gives NaNs, which is
/// what the plot files should show for a point with no surviving seeds.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the config across all its seeds and write `config.txt`,
/// `rounds.csv`, `timing.csv`, and `summary.csv` into its output directory.
///
/// A seed whose run hits a non-finite loss is recorded as failed and
/// excluded from the summary statistics; any other error aborts the whole
/// experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;

    let mut records = Vec::new();
    let mut failed_seeds = Vec::new();
    let mut final_accuracy = Vec::new();
    let mut final_macro_f1 = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("running variant {} seed {seed}", cfg.variant.name());
        match server_run(cfg, seed) {
            Ok(result) => {
                if !result.audit.intact() {
                    return Err(Error::Domain {
                        op: "freeze_audit",
                        msg: format!("backbone weights changed during seed {seed}"),
                    });
                }
                if let Some(last) = result.final_metrics() {
                    final_accuracy.push((seed, last.accuracy));
                    final_macro_f1.push((seed, last.macro_f1));
                }
                records.extend(
                    result
                        .rounds
                        .iter()
                        .map(|&metrics| RoundRecord { seed, metrics }),
                );
            }
            Err(Error::NonFiniteLoss {
                client,
                round,
                batch,
            }) => {
                log::warn!(
                    "seed {seed} diverged (client {client}, round {round}, batch {batch}); dropping it"
                );
                failed_seeds.push(seed);
            }
            Err(e) => return Err(e),
        }
    }

    fs::write(out_dir.join("config.txt"), cfg.serialize())?;
    fs::write(out_dir.join("rounds.csv"), rounds_csv(&records))?;
    fs::write(out_dir.join("timing.csv"), timing_csv(&records))?;
    fs::write(
        out_dir.join("summary.csv"),
        summary_csv(cfg, &failed_seeds, &final_accuracy, &final_macro_f1),
    )?;

    Ok(ExperimentOutcome {
        records,
        failed_seeds,
        final_accuracy,
        final_macro_f1,
        out_dir,
    })
}

fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from("# schema: rounds-v1\n");
    s.push_str("seed,round,accuracy,macro_f1,l_con,l_aug_text,l_aug_visual\n");
    for r in records {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.seed, m.round, m.accuracy, m.macro_f1, m.l_con, m.l_aug_text, m.l_aug_visual
        );
    }
    s
}

fn timing_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from("# schema: timing-v1\n");
    s.push_str("seed,round,wall_ms\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.seed, r.metrics.round, r.metrics.wall_ms);
    }
    s
}

fn summary_csv(
    cfg: &ExperimentConfig,
    failed: &[u64],
    final_accuracy: &[(u64, f64)],
    final_macro_f1: &[(u64, f64)],
) -> String {
    let acc: Vec<f64> = final_accuracy.iter().map(|&(_, v)| v).collect();
    let f1: Vec<f64> = final_macro_f1.iter().map(|&(_, v)| v).collect();
    let (am, asd) = mean_std(&acc);
    let (fm, fsd) = mean_std(&f1);
    let failed_str = if failed.is_empty() {
        "-".to_string()
    } else {
        failed
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";")
    };
    let mut s = String::from("# schema: summary-v1\n");
    s.push_str(
        "variant,seeds,failed_seeds,final_accuracy_mean,final_accuracy_std,final_macro_f1_mean,final_macro_f1_std\n",
    );
    let _ = writeln!(
        s,
        "{},{},{failed_str},{am},{asd},{fm},{fsd}",
        cfg.variant.name(),
        cfg.seeds.len(),
    );
    s
}

// ── ablations ────────────────────────────────────────────────────────

/// One swept setting's results: the x position on the axis plus the final
/// per-seed metric values.
#[derive(Clone, Debug)]
pub struct AblationPoint {
    pub axis: String,
    pub label: String,
    pub x: f64,
    pub final_accuracy: Vec<f64>,
    pub final_macro_f1: Vec<f64>,
}

/// The preset sweeps. Each returned config runs in
/// `<base out_dir>/<axis>/<label>`.
///
/// - `infonce`: the contrastive weight off (μ=0) vs. at the configured μ.
/// - `shots`: n_k ∈ {1, 2, 4, 8, 16}.
/// - `clients`: M ∈ {10, 25, 50, 100} with full participation (K = M).
pub fn preset_ablation(
    axis: &str,
    base: &ExperimentConfig,
) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut presets = Vec::new();
    match axis {
        "infonce" => {
            for mu in [0.0, base.mu] {
                let mut cfg = base.clone();
                cfg.mu = mu;
                presets.push((format!("mu_{mu}"), cfg));
            }
        }
        "shots" => {
            for shots in [1usize, 2, 4, 8, 16] {
                let mut cfg = base.clone();
                cfg.shots = shots;
                // The auto sizing keeps the generated data matched to the
                // partition as n_k grows.
                cfg.train_per_class = 0;
                presets.push((format!("shots_{shots}"), cfg));
            }
        }
        "clients" => {
            for m in [10usize, 25, 50, 100] {
                let mut cfg = base.clone();
                cfg.clients = m;
                cfg.participants = m;
                cfg.train_per_class = 0;
                presets.push((format!("clients_{m}"), cfg));
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation axis '{other}' (expected infonce, shots, or clients)"
            )))
        }
    }
    for (label, cfg) in &mut presets {
        cfg.out_dir = Path::new(&base.out_dir)
            .join(axis)
            .join(label.as_str())
            .to_string_lossy()
            .into_owned();
        cfg.validate()?;
    }
    Ok(presets)
}

fn axis_x(axis: &str, cfg: &ExperimentConfig) -> f64 {
    match axis {
        "infonce" => cfg.mu,
        "shots" => cfg.shots as f64,
        "clients" => cfg.clients as f64,
        _ => unreachable!("axis validated by preset_ablation"),
    }
}

/// Run every preset of one axis and drop the plot files next to the per-run
/// directories.
pub fn run_ablation(axis: &str, base: &ExperimentConfig) -> Result<Vec<AblationPoint>> {
    let presets = preset_ablation(axis, base)?;
    let mut points = Vec::with_capacity(presets.len());
    for (label, cfg) in &presets {
        let outcome = run_experiment(cfg)?;
        points.push(AblationPoint {
            axis: axis.to_string(),
            label: label.clone(),
            x: axis_x(axis, cfg),
            final_accuracy: outcome.final_accuracy_values(),
            final_macro_f1: outcome.final_macro_f1_values(),
        });
    }
    emit_plotdata(&points, &Path::new(&base.out_dir).join(axis))?;
    Ok(points)
}

/// Write `<axis>_accuracy.dat` and `<axis>_macro_f1.dat`: one `x mean std`
/// line per swept point, sorted by x. All points must belong to one axis.
pub fn emit_plotdata(points: &[AblationPoint], dir: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no ablation points to plot".into()));
    }
    let axis = &points[0].axis;
    if let Some(p) = points.iter().find(|p| &p.axis != axis) {
        return Err(Error::InvalidArgument(format!(
            "cannot mix axes '{axis}' and '{}' in one plot",
            p.axis
        )));
    }
    let mut order: Vec<&AblationPoint> = points.iter().collect();
    order.sort_by(|a, b| a.x.total_cmp(&b.x));

    fs::create_dir_all(dir)?;
    for (file, pick) in [
        ("accuracy", true),
        ("macro_f1", false),
    ] {
        let mut s = String::from("# x mean std\n");
        for p in &order {
            let values = if pick {
                &p.final_accuracy
            } else {
                &p.final_macro_f1
            };
            let (m, sd) = mean_std(values);
            let _ = writeln!(s, "{} {m} {sd}", p.x);
        }
        fs::write(dir.join(format!("{axis}_{file}.dat")), s)?;
    }
    Ok(())
}
