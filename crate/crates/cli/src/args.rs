use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cednet-lab", version, about = "Analyze, verify, train and export cascade encoder-decoder networks")]
pub struct Cli {
    /// Directory receiving every output of the run, including manifest.json.
    #[arg(long, global = true, default_value = "cednet-lab-out")]
    pub out: PathBuf,
    /// Overrides the seed of the gradient check, training run or sweep.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter, MAC, fusion-time and receptive-field report.
    Analyze {
        config: PathBuf,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        input_size: (usize, usize),
        /// What to print on stdout; report.json and report.csv are always written.
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Square input side.
        #[arg(long)]
        input_size: Option<usize>,
        /// Use the two-point central difference.
        #[arg(long)]
        two_point: bool,
    },
    /// Trains a segmentation head on synthetic scenes and writes a checkpoint.
    Train {
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "train")]
        train_config: Option<PathBuf>,
    },
    /// Validation metrics of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Input-gradient map of one scene and its important-area curve.
    Saliency {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Explicit comma-separated thresholds, ascending.
        #[arg(long, value_delimiter = ',', conflicts_with = "num_thresholds")]
        thresholds: Option<Vec<f64>>,
        /// Evenly spaced thresholds from 0 to the map maximum.
        #[arg(long, default_value_t = 20)]
        num_thresholds: usize,
        /// Data spec providing scene size and shape settings.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Runs an ablation family and writes one summary row per configuration.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Toy training steps per configuration; 0 skips training.
        #[arg(long, default_value_t = 0)]
        train_steps: usize,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        input_size: (usize, usize),
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "train")]
        train_config: Option<PathBuf>,
    },
    /// Writes the layer graph and canonical config, and optionally every
    /// checkpoint tensor as a standalone dump.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "checkpoint"])))]
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeats the run recorded in a manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Stages,
    Allocation,
    LrBlock,
}

/// Accepts `HxW` or a single side length.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}, expected HxW"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if h == 0 || w == 0 {
        return Err("input size must be positive".into());
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("224x160"), Ok((224, 160)));
        assert_eq!(parse_size("64"), Ok((64, 64)));
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("ax4").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
