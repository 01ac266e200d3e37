//! Command drivers behind the `scepg` binary: input loading, engine
//! orchestration, report assembly, manifests, and the calibration fitter.
//!
//! Log-base discipline: everything inside the engine is natural log; every
//! reported field is log10 and named with the base suffix.

use crate::error::{Error, Result};
use crate::genetics::{
    load_poi_genotypes, match_probability, FrequencyDb, Genotype,
    DEFAULT_FREQUENCY_SUM_TOLERANCE, DEFAULT_RARE_ALLELE_FLOOR,
};
use crate::inference::{
    hypothesis_marginals, likelihood_ratio, poi_in_out_expressions, score_metrics, ClusterEntry,
    ClusterMetrics, HypothesisEntry, LrEntry, LrMode, LrValue, PartitionEntry,
};
use crate::partition::{ClusterScorer, Plp};
use crate::peakmodel::{
    cell_likelihood, load_scepgs_csv, PeakModelParams, ScEpg, ScEpgLoadReport,
};
use crate::search::{hac_run, ipa_run, order_cells, CellOrder, Engine, HacVariant, TrimPolicy};
use crate::simulator::{
    load_designs, run_batch, table1_designs, BatchConfig, QualityFilter,
};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::LN_10;
use std::path::{Path, PathBuf};

/// Configuration of a `cluster` run.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterConfig {
    pub freq_path: PathBuf,
    pub cells_path: PathBuf,
    pub pois_path: Option<PathBuf>,
    pub theta: f64,
    pub analytic_threshold: f64,
    pub trim: TrimPolicy,
    pub engine: Engine,
    pub lr_mode: LrMode,
    pub order: CellOrder,
    pub rare_allele_floor: f64,
    pub params: PeakModelParams,
    pub seed: u64,
    pub top_k: usize,
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub out_path: PathBuf,
    #[serde(skip)]
    pub canonical: bool,
}

impl ClusterConfig {
    pub fn new(freq: PathBuf, cells: PathBuf, out: PathBuf) -> Self {
        ClusterConfig {
            freq_path: freq,
            cells_path: cells,
            pois_path: None,
            theta: 0.0,
            analytic_threshold: 5.0,
            trim: TrimPolicy::default(),
            engine: Engine::Ipa,
            lr_mode: LrMode::Marginal,
            order: CellOrder::Input,
            rare_allele_floor: DEFAULT_RARE_ALLELE_FLOOR,
            params: PeakModelParams::default(),
            seed: 0,
            top_k: 10,
            threads: 1,
            out_path: out,
            canonical: false,
        }
    }
}

/// Run provenance: enough to reproduce the outputs byte for byte.
/// Thread count is excluded: results are independent of it by contract.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn build_manifest(
    subcommand: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[&Path],
    canonical: bool,
) -> Result<Manifest> {
    let mut digests = BTreeMap::new();
    for path in inputs {
        digests.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(Manifest {
        tool: "scepg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: subcommand.into(),
        seed,
        config,
        input_digests: digests,
        timestamp_unix: if canonical {
            None
        } else {
            Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            )
        },
    })
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// The `cluster` report document.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterDocument {
    pub manifest: Manifest,
    pub load: LoadSection,
    pub engine: Engine,
    /// Cell ids in processing order; partition members refer to these.
    pub cells: Vec<String>,
    pub partitions: Vec<PartitionEntry>,
    /// Posterior over the number of contributors; approximate whenever the
    /// beam was thinned.
    pub noc_posterior_approximate: BTreeMap<usize, f64>,
    pub hypotheses: Vec<HypothesisEntry>,
    pub lr_table: Vec<LrEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ClusterMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LoadSection {
    #[serde(flatten)]
    pub cells: ScEpgLoadReport,
    pub rare_alleles_added: usize,
}

/// Load inputs, run the configured engine, and write the JSON report.
/// Returns the document for in-process callers.
pub fn cmd_cluster(config: &ClusterConfig) -> Result<ClusterDocument> {
    config.params.validate()?;
    config.trim.validate()?;
    let mut params = config.params.clone();
    params.analytic_threshold = config.analytic_threshold;

    let mut db = FrequencyDb::from_csv_path(
        &config.freq_path,
        config.theta,
        DEFAULT_FREQUENCY_SUM_TOLERANCE,
    )?;
    let (cells, load_report) = load_scepgs_csv(&config.cells_path, config.analytic_threshold)?;
    let pois: Vec<(String, Genotype)> = match &config.pois_path {
        Some(path) => load_poi_genotypes(path)?.into_iter().collect(),
        None => Vec::new(),
    };
    if !pois.is_empty() && config.engine != Engine::Ipa {
        return Err(Error::InvalidInput(
            "POI hypotheses require the incremental engine (ipa)".into(),
        ));
    }

    let observed: Vec<(String, crate::genetics::Designation)> = cells
        .iter()
        .flat_map(|c| {
            c.loci().flat_map(|(locus, peaks)| {
                peaks
                    .iter()
                    .map(move |p| (locus.to_string(), p.allele.clone()))
            })
        })
        .collect();
    let rare_added = db.augment_with_observed(
        observed.iter().map(|(l, d)| (l.as_str(), d)),
        config.rare_allele_floor,
    )?;

    let cells = order_cells(cells, config.order);
    let mut inputs: Vec<&Path> = vec![&config.freq_path, &config.cells_path];
    if let Some(p) = &config.pois_path {
        inputs.push(p);
    }
    let manifest = build_manifest(
        "cluster",
        config.seed,
        serde_json::to_value(config).map_err(|e| Error::Numerical(e.to_string()))?,
        &inputs,
        config.canonical,
    )?;

    let document = with_pool(config.threads, || -> Result<ClusterDocument> {
        let scorer = ClusterScorer::new(&cells, &db, &pois, &params)?;
        let trimmed_search = config.engine != Engine::Ipa
            || config.trim.max_partitions != usize::MAX
            || config.trim.delta_ln.is_finite();
        let beam = match config.engine {
            Engine::Ipa => ipa_run(&scorer, &config.trim)?,
            Engine::Fac1 => vec![hac_run(&scorer, HacVariant::Fac1)?.partition],
            Engine::Fac2 => vec![hac_run(&scorer, HacVariant::Fac2)?.partition],
        };

        let poi_names: Vec<String> = pois.iter().map(|(n, _)| n.clone()).collect();
        let report = hypothesis_marginals(&beam, &poi_names, trimmed_search);

        let mut lr_table = Vec::new();
        for (idx, (name, genotype)) in pois.iter().enumerate() {
            let (num, den) = poi_in_out_expressions(pois.len(), idx as u8);
            let value = likelihood_ratio(&report, &num, &den, config.lr_mode);
            let mp = match_probability(genotype, &db)?;
            let normalized = match &value {
                LrValue::Defined { log10, .. } => Some(log10 / -mp),
                LrValue::Undefined { .. } => None,
            };
            lr_table.push(LrEntry {
                poi: name.clone(),
                mode: config.lr_mode,
                value,
                match_probability_log10: mp,
                normalized_llr: normalized,
            });
        }

        let hypotheses: Vec<HypothesisEntry> = report
            .groups
            .iter()
            .map(|(subset, stats)| HypothesisEntry {
                pois: subset
                    .iter()
                    .map(|p| poi_names[*p as usize].clone())
                    .collect(),
                marginal_log10: stats.marginal_ln / LN_10,
                maximum_log10: stats.maximum_ln / LN_10,
                count: stats.count,
                argmax_rank: stats.argmax_index,
            })
            .collect();

        let metrics = cells
            .iter()
            .map(|c| c.truth_donor.as_deref())
            .collect::<Option<Vec<&str>>>()
            .map(|truth| score_metrics(&beam[0], &truth));

        let partitions = render_partitions(&beam, &scorer, &cells, &pois, config.top_k);

        Ok(ClusterDocument {
            manifest,
            load: LoadSection {
                cells: load_report,
                rare_alleles_added: rare_added,
            },
            engine: config.engine,
            cells: cells.iter().map(|c| c.cell_id.clone()).collect(),
            partitions,
            noc_posterior_approximate: report.noc_posterior.clone(),
            hypotheses,
            lr_table,
            metrics,
        })
    })??;

    write_json(&config.out_path, &document)?;
    Ok(document)
}

fn render_partitions(
    beam: &[Plp],
    scorer: &ClusterScorer,
    cells: &[ScEpg],
    pois: &[(String, Genotype)],
    top_k: usize,
) -> Vec<PartitionEntry> {
    use crate::inference::symmetry_log_factor;
    use crate::peakmodel::log_sum_exp;

    let adjusted: Vec<f64> = beam
        .iter()
        .map(|p| p.log_likelihood + symmetry_log_factor(p))
        .collect();
    let total = log_sum_exp(&adjusted);
    beam.iter()
        .take(top_k)
        .enumerate()
        .map(|(rank, plp)| {
            let clusters = plp
                .clusters
                .iter()
                .map(|cluster| {
                    let mut ids: Vec<String> = cluster
                        .members
                        .iter()
                        .map(|i| cells[i].cell_id.clone())
                        .collect();
                    ids.sort();
                    let inferred = cluster.label.is_none().then(|| {
                        let g = scorer.most_likely_genotypes(cluster, pois);
                        g.loci()
                            .map(|locus| {
                                let (a, b) = g.pair(locus).unwrap();
                                (locus.to_string(), [a.to_string(), b.to_string()])
                            })
                            .collect::<BTreeMap<_, _>>()
                    });
                    ClusterEntry {
                        cells: ids,
                        label: cluster
                            .label
                            .map(|p| pois[p as usize].0.clone()),
                        inferred_genotype: inferred,
                    }
                })
                .collect();
            PartitionEntry {
                rank,
                log10_likelihood: plp.log_likelihood / LN_10,
                log10_likelihood_adjusted: adjusted[rank] / LN_10,
                posterior: (adjusted[rank] - total).exp(),
                clusters,
            }
        })
        .collect()
}

/// One-line human summary of the top partition.
pub fn top_partition_summary(doc: &ClusterDocument) -> String {
    match doc.partitions.first() {
        Some(top) => {
            let rendered: Vec<String> = top
                .clusters
                .iter()
                .map(|c| {
                    let body = c.cells.join(",");
                    match &c.label {
                        Some(l) => format!("({body}|{l})"),
                        None => format!("({body})"),
                    }
                })
                .collect();
            format!(
                "top partition ({} clusters, log10 L = {:.4}, posterior {:.4}): {}",
                top.clusters.len(),
                top.log10_likelihood,
                top.posterior,
                rendered.join(" ")
            )
        }
        None => "no partitions survived".to_string(),
    }
}

/// Configuration of a `simulate` run.
#[derive(Clone, Debug, Serialize)]
pub struct SimulateConfig {
    pub freq_path: PathBuf,
    pub designs_path: Option<PathBuf>,
    pub replicates: usize,
    pub engine: Engine,
    pub trim: TrimPolicy,
    pub order: CellOrder,
    pub lr_mode: LrMode,
    pub filter: QualityFilter,
    pub params: PeakModelParams,
    pub theta: f64,
    pub force_poi: bool,
    pub seed: u64,
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub canonical: bool,
}

impl SimulateConfig {
    pub fn new(freq: PathBuf, out_dir: PathBuf) -> Self {
        SimulateConfig {
            freq_path: freq,
            designs_path: None,
            replicates: 5,
            engine: Engine::Ipa,
            trim: TrimPolicy::default(),
            order: CellOrder::Input,
            lr_mode: LrMode::Marginal,
            filter: QualityFilter::good_quality(),
            params: PeakModelParams::default(),
            theta: 0.0,
            force_poi: false,
            seed: 0,
            threads: 1,
            out_dir,
            canonical: false,
        }
    }
}

/// Run a simulation batch and write its outputs plus a manifest.
pub fn cmd_simulate(config: &SimulateConfig) -> Result<crate::simulator::BatchSummary> {
    let db = FrequencyDb::from_csv_path(
        &config.freq_path,
        config.theta,
        DEFAULT_FREQUENCY_SUM_TOLERANCE,
    )?;
    let designs = match &config.designs_path {
        Some(path) => load_designs(path)?,
        None => table1_designs(),
    };
    let batch = BatchConfig {
        designs,
        replicates: config.replicates,
        engine: config.engine,
        params: config.params.clone(),
        filter: config.filter,
        trim: config.trim,
        order: config.order,
        force_poi: config.force_poi,
        lr_mode: config.lr_mode,
        master_seed: config.seed,
    };

    let mut inputs: Vec<&Path> = vec![&config.freq_path];
    if let Some(p) = &config.designs_path {
        inputs.push(p);
    }
    let manifest = build_manifest(
        "simulate",
        config.seed,
        serde_json::to_value(config).map_err(|e| Error::Numerical(e.to_string()))?,
        &inputs,
        config.canonical,
    )?;

    let summary = with_pool(config.threads, || run_batch(&batch, Some(&config.out_dir), &db))??;
    write_json(&config.out_dir.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Configuration of a `calibrate` run.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrateConfig {
    pub cells_path: PathBuf,
    pub genotypes_path: PathBuf,
    pub analytic_threshold: f64,
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub out_path: PathBuf,
    #[serde(skip)]
    pub canonical: bool,
}

/// Output of the calibration fit.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationDocument {
    pub manifest: Manifest,
    pub params: PeakModelParams,
    pub fit: FitLog,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitLog {
    pub cells: usize,
    pub sweeps: usize,
    pub log_likelihood_trace: Vec<f64>,
}

/// Maximum-likelihood fit of the peak-model parameters from labelled
/// single-source scEPGs by coordinate ascent (golden-section line searches).
pub fn cmd_calibrate(config: &CalibrateConfig) -> Result<CalibrationDocument> {
    let (cells, _) = load_scepgs_csv(&config.cells_path, config.analytic_threshold)?;
    let genotypes = load_poi_genotypes(&config.genotypes_path)?;
    let mut pairs: Vec<(&ScEpg, &Genotype)> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let donor = cell.truth_donor.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "cell {} carries no donor column; calibration needs labelled cells",
                cell.cell_id
            ))
        })?;
        let genotype = genotypes
            .get(donor)
            .ok_or_else(|| Error::MissingPoiGenotype(donor.to_string()))?;
        pairs.push((cell, genotype));
    }
    if pairs.iter().all(|(c, _)| c.peak_count() == 0) {
        return Err(Error::InvalidInput(
            "no peaks at all in the calibration data".into(),
        ));
    }

    let manifest = build_manifest(
        "calibrate",
        0,
        serde_json::to_value(config).map_err(|e| Error::Numerical(e.to_string()))?,
        &[&config.cells_path, &config.genotypes_path],
        config.canonical,
    )?;

    let (params, fit) = with_pool(config.threads, || fit_params(&pairs, config.analytic_threshold))??;
    let document = CalibrationDocument {
        manifest,
        params,
        fit,
    };
    write_json(&config.out_path, &document)?;
    Ok(document)
}

fn objective(pairs: &[(&ScEpg, &Genotype)], params: &PeakModelParams) -> f64 {
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|(cell, genotype)| {
            cell_likelihood(cell, genotype, params).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    terms.iter().sum()
}

fn golden_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    (x, fx)
}

fn fit_params(
    pairs: &[(&ScEpg, &Genotype)],
    analytic_threshold: f64,
) -> Result<(PeakModelParams, FitLog)> {
    let mut params = PeakModelParams {
        analytic_threshold,
        ..PeakModelParams::default()
    };
    // seed the mean from the observed heights
    let mut heights: Vec<f64> = Vec::new();
    for (cell, _) in pairs {
        for (_, peaks) in cell.loci() {
            heights.extend(peaks.iter().map(|p| p.height));
        }
    }
    if !heights.is_empty() {
        heights.sort_by(f64::total_cmp);
        params.mean_cell_height = heights[heights.len() / 2].max(analytic_threshold + 1.0);
    }

    let mut trace = vec![objective(pairs, &params)];
    let mut sweeps = 0usize;
    for _ in 0..20 {
        sweeps += 1;
        let before = *trace.last().unwrap();

        // log-scale searches for the strictly positive parameters
        let best_mu = golden_max(
            |x| {
                let mut p = params.clone();
                p.mean_cell_height = x.exp();
                objective(pairs, &p)
            },
            (analytic_threshold.max(1.0)).ln(),
            100_000f64.ln(),
            48,
        );
        params.mean_cell_height = best_mu.0.exp();

        let best_shape = golden_max(
            |x| {
                let mut p = params.clone();
                p.gamma_shape = x.exp();
                objective(pairs, &p)
            },
            0.2f64.ln(),
            20f64.ln(),
            48,
        );
        params.gamma_shape = best_shape.0.exp();

        for field in 0..4 {
            let apply = |p: &mut PeakModelParams, v: f64| match field {
                0 => p.back1_rate = v,
                1 => p.back2_rate = v,
                2 => p.fwd1_rate = v,
                _ => p.dropin_rate = v,
            };
            let best = golden_max(
                |v| {
                    let mut p = params.clone();
                    apply(&mut p, v);
                    objective(pairs, &p)
                },
                0.0,
                0.5,
                48,
            );
            apply(&mut params, best.0);
        }

        let after = objective(pairs, &params);
        trace.push(after);
        if after - before < 1e-6 {
            break;
        }
    }

    if !trace.last().unwrap().is_finite() {
        return Err(Error::Numerical(
            "calibration objective is not finite; the data cannot be explained".into(),
        ));
    }
    Ok((
        params,
        FitLog {
            cells: pairs.len(),
            sweeps,
            log_likelihood_trace: trace,
        },
    ))
}

/// Configuration of a `gen-freq` run.
#[derive(Clone, Debug, Serialize)]
pub struct GenFreqConfig {
    pub loci: usize,
    pub alleles: usize,
    pub seed: u64,
    #[serde(skip)]
    pub out_path: PathBuf,
}

/// Write a synthetic allele-frequency table.
pub fn cmd_gen_freq(config: &GenFreqConfig) -> Result<()> {
    let db = crate::simulator::demo_frequency_db(config.loci, config.alleles, config.seed);
    crate::simulator::write_frequency_csv(&db, &config.out_path)
}

/// Read peak-model parameters from JSON: either a bare parameter object or a
/// calibration document.
pub fn load_params_json(path: &Path) -> Result<PeakModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if let Ok(p) = serde_json::from_str::<PeakModelParams>(&text) {
        return Ok(p);
    }
    #[derive(serde::Deserialize)]
    struct Wrapper {
        params: PeakModelParams,
    }
    serde_json::from_str::<Wrapper>(&text)
        .map(|w| w.params)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}
