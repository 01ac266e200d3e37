//! Command-line interface: cluster scEPGs by contributor, simulate
//! admixture batches, calibrate the peak model, and generate synthetic
//! frequency tables.

use clap::{Args, Parser, Subcommand};
use scepg::cli::{
    cmd_calibrate, cmd_cluster, cmd_gen_freq, cmd_simulate, load_params_json,
    top_partition_summary, CalibrateConfig, ClusterConfig, GenFreqConfig, SimulateConfig,
};
use scepg::inference::LrMode;
use scepg::peakmodel::PeakModelParams;
use scepg::search::{CellOrder, Engine, TrimPolicy};
use scepg::simulator::QualityFilter;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "scepg",
    version,
    about = "Cluster single-cell electropherograms from DNA mixtures by contributor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster scEPGs; emit ranked partitions, a NoC posterior, and POI LRs
    Cluster(ClusterArgs),
    /// Simulate admixture batches and score the clustering quality
    Simulate(SimulateArgs),
    /// Fit peak-model parameters from labelled single-source scEPGs
    Calibrate(CalibrateArgs),
    /// Write a synthetic allele-frequency table
    GenFreq(GenFreqArgs),
}

#[derive(Args)]
struct CommonEngineArgs {
    /// Population substructure parameter, in [0, 1)
    #[arg(long, default_value_t = 0.0, value_parser = parse_theta)]
    theta: f64,

    /// Analytic threshold in RFU, >= 0
    #[arg(long = "at", default_value_t = 5.0, value_parser = parse_nonneg)]
    analytic_threshold: f64,

    /// Natural-log trimming window below the best partition, > 0
    #[arg(long = "trim-delta", default_value_t = 25.0, value_parser = parse_pos)]
    trim_delta: f64,

    /// Beam cap after the window, >= 1
    #[arg(long = "max-partitions", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    max_partitions: u64,

    /// Search engine: ipa, fac1 or fac2
    #[arg(long, default_value = "ipa")]
    engine: Engine,

    /// Likelihood-ratio aggregation: marginal or maximum
    #[arg(long = "lr-mode", default_value = "marginal")]
    lr_mode: LrMode,

    /// Cell processing order: input or peaks-desc
    #[arg(long, default_value = "input")]
    order: CellOrder,

    /// Master seed for anything stochastic
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 uses all cores, 1 forces serial evaluation
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Peak-model parameters JSON (bare object or calibrate output)
    #[arg(long)]
    params: Option<PathBuf>,

    /// Mean single-copy peak height in RFU, > 0 (overrides --params)
    #[arg(long, value_parser = parse_pos)]
    mu: Option<f64>,

    /// Strip timestamps for golden-file comparisons
    #[arg(long, default_value_t = false)]
    canonical: bool,
}

impl CommonEngineArgs {
    fn params(&self) -> Result<PeakModelParams, scepg::Error> {
        let mut params = match &self.params {
            Some(path) => load_params_json(path)?,
            None => PeakModelParams::default(),
        };
        if let Some(mu) = self.mu {
            params.mean_cell_height = mu;
        }
        params.analytic_threshold = self.analytic_threshold;
        Ok(params)
    }

    fn trim(&self) -> TrimPolicy {
        TrimPolicy {
            delta_ln: self.trim_delta,
            max_partitions: self.max_partitions as usize,
        }
    }
}

#[derive(Args)]
struct ClusterArgs {
    /// Allele-frequency table CSV (locus,allele,frequency)
    #[arg(long)]
    freq: PathBuf,

    /// scEPG peaks CSV (cell_id,kit,locus,allele,height[,donor])
    #[arg(long)]
    cells: PathBuf,

    /// POI reference genotypes CSV (poi_id,locus,allele1,allele2)
    #[arg(long)]
    pois: Option<PathBuf>,

    /// Partitions included in the report, >= 1
    #[arg(long = "top-k", default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,

    /// Report path (JSON)
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    common: CommonEngineArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Allele-frequency table CSV used to draw donor genotypes
    #[arg(long)]
    freq: PathBuf,

    /// Designs JSON ([{label, cell_counts}]); the built-in eleven-design
    /// battery when omitted
    #[arg(long)]
    designs: Option<PathBuf>,

    /// Replicates per design, >= 1
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    replicates: u64,

    /// Force one donor into every admixture as the POI and report its LR
    #[arg(long = "force-poi", default_value_t = false)]
    force_poi: bool,

    /// Pool quality regime: good (>= 9 large peaks) or low (2..=30)
    #[arg(long, default_value = "good", value_parser = ["good", "low"])]
    quality: String,

    /// Override: minimum large allelic peaks for pool admission
    #[arg(long = "filter-min")]
    filter_min: Option<usize>,

    /// Override: maximum large allelic peaks for pool admission
    #[arg(long = "filter-max")]
    filter_max: Option<usize>,

    /// Override: size fraction of the expected height, in (0, 1]
    #[arg(long = "filter-frac", value_parser = parse_fraction)]
    filter_frac: Option<f64>,

    /// Output directory for the batch summary and tables
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    common: CommonEngineArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labelled single-source scEPG CSV (donor column required)
    #[arg(long)]
    cells: PathBuf,

    /// Donor reference genotypes CSV (poi_id,locus,allele1,allele2)
    #[arg(long)]
    genotypes: PathBuf,

    /// Analytic threshold in RFU, >= 0
    #[arg(long = "at", default_value_t = 5.0, value_parser = parse_nonneg)]
    analytic_threshold: f64,

    /// Worker threads; 0 uses all cores
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Fitted parameters path (JSON)
    #[arg(long)]
    out: PathBuf,

    /// Strip timestamps for golden-file comparisons
    #[arg(long, default_value_t = false)]
    canonical: bool,
}

#[derive(Args)]
struct GenFreqArgs {
    /// Number of loci, >= 1
    #[arg(long, default_value_t = 21, value_parser = clap::value_parser!(u64).range(1..))]
    loci: u64,

    /// Alleles per locus, >= 2
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    alleles: u64,

    /// Seed for the synthetic frequencies
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

fn parse_theta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("theta must be in [0, 1), got {v}"))
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("value must be >= 0, got {v}"))
    }
}

fn parse_pos(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("value must be > 0, got {v}"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("fraction must be in (0, 1], got {v}"))
    }
}

fn run() -> Result<(), scepg::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Cluster(args) => {
            let mut config = ClusterConfig::new(args.freq, args.cells, args.out);
            config.pois_path = args.pois;
            config.theta = args.common.theta;
            config.analytic_threshold = args.common.analytic_threshold;
            config.trim = args.common.trim();
            config.engine = args.common.engine;
            config.lr_mode = args.common.lr_mode;
            config.order = args.common.order;
            config.params = args.common.params()?;
            config.seed = args.common.seed;
            config.top_k = args.top_k as usize;
            config.threads = args.common.threads;
            config.canonical = args.common.canonical;
            let doc = cmd_cluster(&config)?;
            println!("{}", top_partition_summary(&doc));
            println!("report written to {}", config.out_path.display());
        }
        Command::Simulate(args) => {
            let mut filter = match args.quality.as_str() {
                "low" => QualityFilter::low_quality(),
                _ => QualityFilter::good_quality(),
            };
            if let Some(min) = args.filter_min {
                filter.min_large_peaks = min;
            }
            if let Some(max) = args.filter_max {
                filter.max_large_peaks = Some(max);
            }
            if let Some(frac) = args.filter_frac {
                filter.frac_of_expected = frac;
            }
            let mut config = SimulateConfig::new(args.freq, args.out);
            config.designs_path = args.designs;
            config.replicates = args.replicates as usize;
            config.engine = args.common.engine;
            config.trim = args.common.trim();
            config.order = args.common.order;
            config.lr_mode = args.common.lr_mode;
            config.filter = filter;
            config.params = args.common.params()?;
            config.theta = args.common.theta;
            config.force_poi = args.force_poi;
            config.seed = args.common.seed;
            config.threads = args.common.threads;
            config.canonical = args.common.canonical;
            let summary = cmd_simulate(&config)?;
            let scored = summary.runs.len() - summary.failed_runs;
            let perfect: usize = summary.per_design.values().map(|a| a.perfect).sum();
            println!(
                "{} runs ({} failed); correct clustering in {perfect}/{scored}",
                summary.runs.len(),
                summary.failed_runs
            );
            println!("outputs written to {}", config.out_dir.display());
        }
        Command::Calibrate(args) => {
            let config = CalibrateConfig {
                cells_path: args.cells,
                genotypes_path: args.genotypes,
                analytic_threshold: args.analytic_threshold,
                threads: args.threads,
                out_path: args.out,
                canonical: args.canonical,
            };
            let doc = cmd_calibrate(&config)?;
            println!(
                "fitted over {} cells in {} sweeps: mu = {:.2}, shape = {:.3}, \
                 back1 = {:.4}, back2 = {:.4}, fwd1 = {:.4}, dropin = {:.4}",
                doc.fit.cells,
                doc.fit.sweeps,
                doc.params.mean_cell_height,
                doc.params.gamma_shape,
                doc.params.back1_rate,
                doc.params.back2_rate,
                doc.params.fwd1_rate,
                doc.params.dropin_rate
            );
            println!("parameters written to {}", config.out_path.display());
        }
        Command::GenFreq(args) => {
            let config = GenFreqConfig {
                loci: args.loci as usize,
                alleles: args.alleles as usize,
                seed: args.seed,
                out_path: args.out,
            };
            cmd_gen_freq(&config)?;
            println!("frequency table written to {}", config.out_path.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
