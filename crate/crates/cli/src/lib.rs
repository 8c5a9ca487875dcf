//! Command implementations behind the `moeits` binary.

pub mod args;
pub mod report;
pub mod verify;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use moeits_core::builder::ensure_fresh_dir;
use moeits_core::pruner::{compute_nmi_matrices, default_min_keep, plan_from_matrices, NmiMatrix};
use moeits_core::sim::expert_reduction_pct;
use moeits_core::{
    build_simplified, count_params, flops_per_token, gen_toy, open_checkpoint_as, resolve_expert_blocks,
    ExpertBlock, ModelManifest, ParamCounts, PruningPlan, ToySpec,
};
use serde::{Deserialize, Serialize};

pub use args::{Cli, Command, DEFAULT_TAU};
use args::{AnalyzeArgs, GenToyArgs, ModelArgs, PruneArgs, SweepArgs, VerifyArgs};
use report::{layer_summaries, predicted_counts, predicted_flops, pretty, Flops, Report, Stopwatch};

pub const REPORT_FILE_NAME: &str = "report.json";
pub const MATRICES_FILE_NAME: &str = "nmi_matrices.json";
pub const SWEEP_JSON_NAME: &str = "sweep.json";
pub const SWEEP_CSV_NAME: &str = "sweep.csv";

/// Run a parsed command line on a pool of `cli.threads` workers.
/// `Ok(false)` means the command ran but a check failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::Analyze(a) => analyze(&a).map(|_| true),
        Command::Prune(a) => prune(&a).map(|_| true),
        Command::Sweep(a) => sweep(&a).map(|_| true),
        Command::Verify(a) => verify_cmd(&a),
        Command::GenToy(a) => gen_toy_cmd(&a).map(|_| true),
    })
}

fn resolve_tau(tau: Option<f64>) -> f64 {
    tau.unwrap_or_else(|| {
        eprintln!(
            "note: --tau not given, using {DEFAULT_TAU}; Mixtral-scale checkpoints are usually pruned with --tau 0.5"
        );
        DEFAULT_TAU
    })
}

/// Everything derived from the source checkpoint before any τ is applied.
struct Analysis {
    manifest: ModelManifest,
    blocks: Vec<ExpertBlock>,
    counts: ParamCounts,
    matrices: Vec<NmiMatrix<f64>>,
    source_hash: String,
    min_keep: usize,
}

fn analyze_source(m: &ModelArgs, watch: &mut Stopwatch) -> anyhow::Result<Analysis> {
    let manifest = open_checkpoint_as(&m.model, m.arch_override)
        .with_context(|| format!("opening {}", m.model.display()))?;
    let blocks = resolve_expert_blocks(&manifest)?;
    if blocks.is_empty() {
        bail!("{} has no MoE blocks", m.model.display());
    }
    let counts = count_params(&manifest)?;
    watch.lap("open");
    let source_hash = manifest.source_hash()?;
    watch.lap("hash");
    let matrices = compute_nmi_matrices(&manifest, &blocks, m.bins)?;
    watch.lap("nmi");
    let min_keep = m.min_keep.unwrap_or_else(|| default_min_keep(&manifest));
    log::info!(
        "{}: {} MoE layers, {} tensors, min_keep {min_keep}",
        manifest.architecture,
        blocks.len(),
        manifest.len()
    );
    Ok(Analysis {
        manifest,
        blocks,
        counts,
        matrices,
        source_hash,
        min_keep,
    })
}

impl Analysis {
    fn plan(&self, tau: f64, bins: usize) -> anyhow::Result<PruningPlan> {
        Ok(plan_from_matrices(
            &self.matrices,
            tau,
            bins,
            self.min_keep,
            self.source_hash.clone(),
        )?)
    }

    fn report(&self, command: &str, plan: PruningPlan, simplified: ParamCounts, flops_after: u64) -> anyhow::Result<Report> {
        let k = self.manifest.config.num_experts_per_tok;
        Ok(Report {
            command: command.into(),
            architecture: self.manifest.architecture.to_string(),
            source: self.counts,
            reduction_pct: expert_reduction_pct(&self.counts, &simplified),
            simplified,
            flops_per_token: Flops::new(k, flops_per_token(&self.manifest, k)?, flops_after),
            per_layer: layer_summaries(&self.matrices, &plan),
            plan_hash: plan.hash(),
            plan,
            timing: None,
        })
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct MatricesFile<'a> {
    bins: usize,
    layers: &'a [NmiMatrix<f64>],
}

pub fn analyze(a: &AnalyzeArgs) -> anyhow::Result<Report> {
    let tau = resolve_tau(a.tau);
    let mut watch = Stopwatch::new(a.model.timing);
    let an = analyze_source(&a.model, &mut watch)?;
    let plan = an.plan(tau, a.model.bins)?;
    let simplified = predicted_counts(&an.counts, &an.blocks, &plan);
    // top-k after pruning is clamped to the smallest surviving layer
    let k = plan
        .layers
        .iter()
        .map(|l| l.kept.len())
        .fold(an.manifest.config.num_experts_per_tok, usize::min);
    let flops = predicted_flops(&an.blocks, &plan, k);
    watch.lap("plan");

    create_dir(&a.out)?;
    write(
        &a.out.join(MATRICES_FILE_NAME),
        &pretty(&MatricesFile {
            bins: a.model.bins,
            layers: &an.matrices,
        }),
    )?;
    if a.csv {
        for m in &an.matrices {
            write(
                &a.out.join(format!("nmi_layer_{}.csv", m.layer_index)),
                report::matrix_csv(m).as_bytes(),
            )?;
        }
    }
    let mut report = an.report("analyze", plan, simplified, flops)?;
    watch.lap("write");
    report.timing = watch.finish();
    write(&a.out.join(REPORT_FILE_NAME), &report.to_json_bytes())?;
    eprintln!(
        "analyzed {} layers: {} of {} experts would be removed ({:.2}% of expert parameters)",
        report.plan.layers.len(),
        report.plan.total_removed(),
        report.plan.total_removed() + report.plan.total_kept(),
        report.reduction_pct
    );
    Ok(report)
}

/// Remove whatever a failed run left in `out`; `existed` says whether the
/// directory itself predates the run.
fn clean_partial(out: &Path, existed: bool) {
    let result = if existed {
        std::fs::read_dir(out).and_then(|entries| {
            for e in entries {
                let p = e?.path();
                if p.is_dir() {
                    std::fs::remove_dir_all(&p)?;
                } else {
                    std::fs::remove_file(&p)?;
                }
            }
            Ok(())
        })
    } else {
        std::fs::remove_dir_all(out)
    };
    if let Err(e) = result {
        log::warn!("could not clean up {}: {e}", out.display());
    }
}

fn build_into(an: &Analysis, plan: PruningPlan, out: &Path, mut watch: Stopwatch) -> anyhow::Result<Report> {
    let (built, _) = build_simplified(&an.manifest, &plan, out)?;
    watch.lap("build");
    let simplified = count_params(&built)?;
    let predicted = predicted_counts(&an.counts, &an.blocks, &plan);
    if simplified != predicted {
        bail!("written checkpoint has {simplified:?} parameters, plan predicts {predicted:?}");
    }
    let flops = flops_per_token(&built, built.config.num_experts_per_tok)?;
    let mut report = an.report("prune", plan, simplified, flops)?;
    report.timing = watch.finish();
    write(&out.join(REPORT_FILE_NAME), &report.to_json_bytes())?;
    Ok(report)
}

/// Build into a fresh `out`, removing partial outputs if any stage fails.
fn build_fresh(an: &Analysis, plan: PruningPlan, out: &Path, watch: Stopwatch) -> anyhow::Result<Report> {
    let existed = out.exists();
    let result = build_into(an, plan, out, watch);
    if result.is_err() && out.exists() {
        clean_partial(out, existed);
    }
    result
}

pub fn prune(a: &PruneArgs) -> anyhow::Result<Report> {
    ensure_fresh_dir(&a.out)?;
    let tau = resolve_tau(a.tau);
    let mut watch = Stopwatch::new(a.model.timing);
    let an = analyze_source(&a.model, &mut watch)?;
    let plan = an.plan(tau, a.model.bins)?;
    watch.lap("plan");
    let report = build_fresh(&an, plan, &a.out, watch)?;
    eprintln!(
        "wrote {}: kept {} experts, removed {} ({:.2}% of expert parameters)",
        a.out.display(),
        report.plan.total_kept(),
        report.plan.total_removed(),
        report.reduction_pct
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub plan_hash: String,
    pub experts_kept: usize,
    pub experts_total: usize,
    pub reduction_pct: f64,
    pub expert_params_remaining_pct: f64,
    pub total_params_remaining_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub materialized: Option<PathBuf>,
    pub plan: PruningPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub source_hash: String,
    pub bins: usize,
    pub min_keep: usize,
    pub source: ParamCounts,
    pub points: Vec<SweepPoint>,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        100.0
    } else {
        part as f64 / whole as f64 * 100.0
    }
}

pub fn sweep(a: &SweepArgs) -> anyhow::Result<Sweep> {
    let mut watch = Stopwatch::new(false);
    let an = analyze_source(&a.model, &mut watch)?;
    create_dir(&a.out)?;
    let mut points = Vec::with_capacity(a.tau_grid.0.len());
    for &tau in &a.tau_grid.0 {
        let plan = an.plan(tau, a.model.bins)?;
        let after = predicted_counts(&an.counts, &an.blocks, &plan);
        let materialized = if a.materialize {
            let dir = a.out.join(format!("tau_{tau}"));
            ensure_fresh_dir(&dir)?;
            build_fresh(&an, plan.clone(), &dir, Stopwatch::new(false))?;
            Some(PathBuf::from(format!("tau_{tau}")))
        } else {
            None
        };
        points.push(SweepPoint {
            tau,
            plan_hash: plan.hash(),
            experts_kept: plan.total_kept(),
            experts_total: plan.total_kept() + plan.total_removed(),
            reduction_pct: expert_reduction_pct(&an.counts, &after),
            expert_params_remaining_pct: pct(after.expert_params, an.counts.expert_params),
            total_params_remaining_pct: pct(after.total(), an.counts.total()),
            materialized,
            plan,
        });
    }
    let sweep = Sweep {
        source_hash: an.source_hash.clone(),
        bins: a.model.bins,
        min_keep: an.min_keep,
        source: an.counts,
        points,
    };
    write(&a.out.join(SWEEP_JSON_NAME), &pretty(&sweep))?;
    let mut csv = String::from(
        "tau,experts_kept,experts_total,expert_params_remaining_pct,total_params_remaining_pct\n",
    );
    for p in &sweep.points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.tau, p.experts_kept, p.experts_total, p.expert_params_remaining_pct, p.total_params_remaining_pct
        ));
    }
    write(&a.out.join(SWEEP_CSV_NAME), csv.as_bytes())?;
    eprintln!("swept {} thresholds into {}", sweep.points.len(), a.out.display());
    Ok(sweep)
}

fn verify_cmd(a: &VerifyArgs) -> anyhow::Result<bool> {
    let report = verify::verify(&a.model, &a.out, a.arch_override, a.seed, a.probes)?;
    write(&a.out.join(verify::VERIFY_FILE_NAME), &pretty(&report))?;
    for c in &report.checks {
        eprintln!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.passed)
}

fn gen_toy_cmd(a: &GenToyArgs) -> anyhow::Result<ModelManifest> {
    let bytes = std::fs::read(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec: ToySpec =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", a.spec.display()))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    ensure_fresh_dir(&a.out)?;
    let m = gen_toy(&spec, &a.out)?;
    eprintln!(
        "generated {} tensors ({} layers x {} experts) in {}",
        m.len(),
        spec.layers,
        spec.experts,
        a.out.display()
    );
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_outputs_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let made = tmp.path().join("made");
        std::fs::create_dir_all(made.join("sub")).unwrap();
        std::fs::write(made.join("model.safetensors"), b"x").unwrap();
        clean_partial(&made, false);
        assert!(!made.exists());

        let kept = tmp.path().join("kept");
        std::fs::create_dir_all(kept.join("sub")).unwrap();
        std::fs::write(kept.join("config.json"), b"{}").unwrap();
        clean_partial(&kept, true);
        assert!(kept.is_dir());
        assert_eq!(std::fs::read_dir(&kept).unwrap().count(), 0);
    }

    #[test]
    fn percentages() {
        assert_eq!(pct(1, 4), 25.0);
        assert_eq!(pct(0, 0), 100.0);
    }
}
