use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use moeits_core::Architecture;

/// Default threshold when `--tau` is omitted.
pub const DEFAULT_TAU: f64 = 1.25;

#[derive(Debug, Parser)]
#[command(name = "moeits", version, about = "Expert redundancy analysis and pruning for MoE checkpoints")]
pub struct Cli {
    /// Worker threads; 0 uses all available cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute per-layer NMI matrices and the would-be plan without writing a model.
    Analyze(AnalyzeArgs),
    /// Plan, build the simplified checkpoint and emit the healing manifest.
    Prune(PruneArgs),
    /// Evaluate a grid of thresholds against one set of NMI matrices.
    Sweep(SweepArgs),
    /// Re-check a pruned checkpoint against its source.
    Verify(VerifyArgs),
    /// Generate a synthetic MoE checkpoint from a JSON spec.
    GenToy(GenToyArgs),
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint directory, single safetensors file, or shard index.
    #[arg(long)]
    pub model: PathBuf,

    /// Treat the checkpoint as this architecture instead of reading model_type.
    #[arg(long, value_parser = parse_arch)]
    pub arch_override: Option<Architecture>,

    /// Histogram bins per weight vector.
    #[arg(long, default_value_t = moeits_core::DEFAULT_BINS, value_parser = parse_bins)]
    pub bins: usize,

    /// Minimum experts kept per layer (defaults to the config's top-k).
    #[arg(long, value_parser = parse_min_keep)]
    pub min_keep: Option<usize>,

    /// Record per-stage wall time in the report (makes it non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Clone, Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Output directory for report.json and nmi_matrices.json.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_parser = parse_tau)]
    pub tau: Option<f64>,

    /// Also write one CSV per layer matrix.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Clone, Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Fresh (absent or empty) directory for the simplified checkpoint.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_parser = parse_tau)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long)]
    pub out: PathBuf,

    /// Comma-separated, strictly increasing thresholds.
    #[arg(long, value_parser = parse_tau_grid)]
    pub tau_grid: TauGrid,

    /// Build a checkpoint for every grid point under `<out>/tau_<τ>`.
    #[arg(long)]
    pub materialize: bool,
}

#[derive(Clone, Debug, Args)]
pub struct VerifyArgs {
    /// The source checkpoint the plan was computed from.
    #[arg(long)]
    pub model: PathBuf,

    /// The pruned output directory.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_parser = parse_arch)]
    pub arch_override: Option<Architecture>,

    /// Seed for the forward-pass probe inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of probe inputs.
    #[arg(long, default_value_t = 32)]
    pub probes: usize,
}

#[derive(Clone, Debug, Args)]
pub struct GenToyArgs {
    /// ToySpec JSON file.
    #[arg(long)]
    pub spec: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A non-empty, strictly increasing list of thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct TauGrid(pub Vec<f64>);

pub fn parse_tau(s: &str) -> Result<f64, String> {
    let t: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if !t.is_finite() || t < 0.0 {
        return Err(format!("tau must be finite and >= 0, got {s}"));
    }
    Ok(t)
}

pub fn parse_tau_grid(s: &str) -> Result<TauGrid, String> {
    let taus = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(parse_tau)
        .collect::<Result<Vec<_>, _>>()?;
    if taus.is_empty() {
        return Err("tau grid is empty".into());
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err("tau grid must be strictly increasing".into());
    }
    Ok(TauGrid(taus))
}

fn parse_bins(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(b) if b >= 2 => Ok(b),
        _ => Err(format!("bins must be an integer >= 2, got {s}")),
    }
}

fn parse_min_keep(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k),
        _ => Err(format!("min-keep must be an integer >= 1, got {s}")),
    }
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_tau_grid("0.5,1,2,4").unwrap().0, vec![0.5, 1.0, 2.0, 4.0]);
        assert!(parse_tau_grid("1,1").is_err());
        assert!(parse_tau_grid("2,1").is_err());
        assert!(parse_tau_grid("").is_err());
        assert!(parse_tau_grid("-1,2").is_err());
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "moeits", "--threads", "2", "prune", "--model", "m", "--out", "o", "--tau", "0.5",
        ])
        .unwrap();
        assert_eq!(cli.threads, 2);
        assert!(matches!(cli.command, Command::Prune(PruneArgs { tau: Some(t), .. }) if t == 0.5));
        assert!(Cli::try_parse_from(["moeits", "analyze", "--model", "m", "--out", "o", "--bins", "1"]).is_err());
    }
}
