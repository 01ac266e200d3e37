//! Synthetic admixture generation, quality filtering, and the batch
//! evaluation harness.
//!
//! Real scEPG datasets are laboratory property; the harness substitutes
//! model-generated cells throughout, so every headline rate it produces is a
//! property of the generator and engine together, not a reproduction of any
//! laboratory figure.

use crate::error::{Error, Result};
use crate::genetics::{match_probability, Designation, FrequencyDb, Genotype};
use crate::inference::{
    hypothesis_marginals, likelihood_ratio, poi_in_out_expressions, score_metrics,
    ClusterMetrics, LrMode, LrValue,
};
use crate::partition::ClusterScorer;
use crate::peakmodel::{sample_scepg, PeakModelParams, ScEpg};
use crate::search::{hac_run, ipa_run, order_cells, CellOrder, Engine, TrimPolicy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Locus names used by synthetic frequency tables (the autosomal STR panel
/// of a common 24-locus kit).
pub const AUTOSOMAL_LOCI: [&str; 21] = [
    "D3S1358", "vWA", "D16S539", "CSF1PO", "TPOX", "D8S1179", "D21S11", "D18S51", "D2S441",
    "D19S433", "TH01", "FGA", "D22S1045", "D5S818", "D13S317", "D7S820", "SE33", "D10S1248",
    "D1S1656", "D12S391", "D2S1338",
];

/// Build a plausible synthetic allele-frequency table: geometric-ish
/// frequencies with seeded jitter over consecutive integer designations.
pub fn demo_frequency_db(n_loci: usize, alleles_per_locus: usize, seed: u64) -> FrequencyDb {
    assert!(n_loci >= 1 && alleles_per_locus >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = FrequencyDb::new(0.0, format!("demo(seed={seed})"));
    for li in 0..n_loci {
        let base = AUTOSOMAL_LOCI[li % AUTOSOMAL_LOCI.len()];
        let locus = if li < AUTOSOMAL_LOCI.len() {
            base.to_string()
        } else {
            format!("{base}.{}", li / AUTOSOMAL_LOCI.len() + 1)
        };
        let start: u16 = rng.gen_range(6..12);
        let mut weights: Vec<f64> = (0..alleles_per_locus)
            .map(|i| 0.72f64.powi(i as i32) * rng.gen_range(0.6..1.4))
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w = (*w / total).max(0.005);
        }
        let total: f64 = weights.iter().sum();
        for (i, w) in weights.iter().enumerate() {
            db.insert_allele(&locus, Designation::numeric(start + i as u16, 0), w / total)
                .unwrap();
        }
    }
    db.normalize(1.0).unwrap();
    db
}

/// Write a frequency table as `locus,allele,frequency` CSV.
pub fn write_frequency_csv(db: &FrequencyDb, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    })?;
    w.write_record(["locus", "allele", "frequency"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for locus in db.locus_names() {
        let lf = db.locus(locus).unwrap();
        for (a, f) in lf.alleles().iter().zip(lf.freqs()) {
            w.write_record([locus, &a.to_string(), &format!("{f}")])
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Draw one genotype i.i.d. from the population frequencies.
pub fn sample_genotype<R: Rng>(db: &FrequencyDb, rng: &mut R) -> Genotype {
    let mut g = Genotype::new();
    for locus in db.locus_names() {
        let lf = db.locus(locus).unwrap();
        let mut draw = || {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &f) in lf.freqs().iter().enumerate() {
                acc += f;
                if u < acc {
                    return lf.alleles()[i].clone();
                }
            }
            lf.alleles()[lf.len() - 1].clone()
        };
        let a = draw();
        let b = draw();
        g.set_pair(locus, a, b);
    }
    g
}

/// One admixture design: how many cells each contributor donates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmixtureDesign {
    pub label: String,
    pub cell_counts: Vec<usize>,
}

impl AdmixtureDesign {
    pub fn noc(&self) -> usize {
        self.cell_counts.len()
    }

    pub fn total_cells(&self) -> usize {
        self.cell_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_counts.is_empty() || self.cell_counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(format!(
                "design {} must list positive per-donor cell counts",
                self.label
            )));
        }
        Ok(())
    }
}

/// The standard two-to-five contributor design battery.
pub fn table1_designs() -> Vec<AdmixtureDesign> {
    let rows: [(&str, &[usize]); 11] = [
        ("2x1:1", &[15, 15]),
        ("2x1:7.5", &[2, 15]),
        ("3x1:1:1", &[15, 15, 15]),
        ("3x1:5:7.5", &[2, 10, 15]),
        ("3x1:1:7.5", &[2, 2, 15]),
        ("4x1:1:1:1", &[15, 15, 15, 15]),
        ("4x1:5:5:7.5", &[2, 10, 10, 15]),
        ("4x1:1:1:7.5", &[2, 2, 2, 15]),
        ("5x1:1:1:1:1", &[15, 15, 15, 15, 15]),
        ("5x1:5:5:7.5:7.5", &[2, 10, 10, 15, 15]),
        ("5x1:1:1:1:7.5", &[2, 2, 2, 2, 15]),
    ];
    rows.iter()
        .map(|(label, counts)| AdmixtureDesign {
            label: label.to_string(),
            cell_counts: counts.to_vec(),
        })
        .collect()
}

/// Load designs from a JSON list of `{label, cell_counts}`.
pub fn load_designs(path: &Path) -> Result<Vec<AdmixtureDesign>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let designs: Vec<AdmixtureDesign> =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!(
            "{}: {e}",
            path.display()
        )))?;
    if designs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} holds no designs",
            path.display()
        )));
    }
    for d in &designs {
        d.validate()?;
    }
    Ok(designs)
}

/// Pool admission rule: a cell must show between `min_large_peaks` and
/// `max_large_peaks` allelic peaks of at least `frac_of_expected` times the
/// expected height of that peak.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QualityFilter {
    pub min_large_peaks: usize,
    pub max_large_peaks: Option<usize>,
    pub frac_of_expected: f64,
}

impl QualityFilter {
    /// Good-quality regime: at least nine large allelic peaks.
    pub fn good_quality() -> Self {
        QualityFilter {
            min_large_peaks: 9,
            max_large_peaks: None,
            frac_of_expected: 0.2,
        }
    }

    /// Low-quality regime: between two and thirty large allelic peaks.
    pub fn low_quality() -> Self {
        QualityFilter {
            min_large_peaks: 2,
            max_large_peaks: Some(30),
            frac_of_expected: 0.2,
        }
    }

    /// Count the cell's allelic peaks that clear the size fraction; the
    /// expected height of a position follows the generating model (dosage
    /// times the degraded single-copy mean).
    pub fn large_allelic_peaks(
        &self,
        cell: &ScEpg,
        genotype: &Genotype,
        params: &PeakModelParams,
    ) -> usize {
        let mut count = 0usize;
        for locus in genotype.loci() {
            let (a, b) = genotype.pair(locus).unwrap();
            let positions: &[(&Designation, f64)] = &if a == b {
                vec![(a, 2.0 * params.expected_height(a))]
            } else {
                vec![
                    (a, params.expected_height(a)),
                    (b, params.expected_height(b)),
                ]
            };
            for (d, expected) in positions {
                if let Some(peak) = cell.peaks(locus).iter().find(|p| p.allele == **d) {
                    if peak.height >= self.frac_of_expected * expected {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    pub fn passes(&self, cell: &ScEpg, genotype: &Genotype, params: &PeakModelParams) -> bool {
        let n = self.large_allelic_peaks(cell, genotype, params);
        n >= self.min_large_peaks && self.max_large_peaks.map_or(true, |max| n <= max)
    }
}

/// A pool of quality-filtered cells with known donors.
#[derive(Clone, Debug)]
pub struct CellPool {
    pub donors: Vec<(String, Genotype)>,
    pub cells_by_donor: Vec<Vec<ScEpg>>,
    pub filter: QualityFilter,
    pub attempts: usize,
}

const DONOR_RESAMPLE_LIMIT: usize = 200;

/// Sample donor genotypes from the population (rejecting duplicate full
/// profiles) and generate quality-passing cells until each donor's quota is
/// met. Deterministic per seed.
pub fn build_pool(
    donor_count: usize,
    cells_per_donor: usize,
    db: &FrequencyDb,
    params: &PeakModelParams,
    filter: QualityFilter,
    seed: u64,
) -> Result<CellPool> {
    if donor_count == 0 || cells_per_donor == 0 {
        return Err(Error::InvalidInput("pool needs positive donor and cell counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut donors: Vec<(String, Genotype)> = Vec::with_capacity(donor_count);
    for d in 0..donor_count {
        let mut tries = 0;
        let genotype = loop {
            let g = sample_genotype(db, &mut rng);
            if donors.iter().all(|(_, existing)| *existing != g) {
                break g;
            }
            tries += 1;
            if tries > DONOR_RESAMPLE_LIMIT {
                return Err(Error::SimulationQuota(format!(
                    "could not draw {donor_count} distinct donor profiles"
                )));
            }
        };
        donors.push((format!("d{d}"), genotype));
    }

    let budget = cells_per_donor * 1000 + 1000;
    let mut cells_by_donor = Vec::with_capacity(donor_count);
    let mut attempts_total = 0usize;
    for (donor_id, genotype) in &donors {
        let mut kept = Vec::with_capacity(cells_per_donor);
        let mut attempts = 0usize;
        while kept.len() < cells_per_donor {
            attempts += 1;
            if attempts > budget {
                return Err(Error::SimulationQuota(format!(
                    "donor {donor_id}: {}/{cells_per_donor} cells passed the filter \
                     (min {}, max {:?}, frac {}) after {attempts} draws",
                    kept.len(),
                    filter.min_large_peaks,
                    filter.max_large_peaks,
                    filter.frac_of_expected
                )));
            }
            let id = format!("{donor_id}_c{}", kept.len());
            let mut cell = sample_scepg(&id, genotype, db, params, &mut rng)?;
            cell.truth_donor = Some(donor_id.clone());
            if filter.passes(&cell, genotype, params) {
                kept.push(cell);
            }
        }
        attempts_total += attempts;
        cells_by_donor.push(kept);
    }
    Ok(CellPool {
        donors,
        cells_by_donor,
        filter,
        attempts: attempts_total,
    })
}

/// Draw one admixture from the pool: distinct donors (always including
/// `forced_poi` when given), the design's cell counts without replacement,
/// and a shuffled cell order.
pub fn sample_admixture(
    pool: &CellPool,
    design: &AdmixtureDesign,
    forced_poi: Option<&str>,
    seed: u64,
) -> Result<Vec<ScEpg>> {
    design.validate()?;
    let noc = design.noc();
    if noc > pool.donors.len() {
        return Err(Error::InvalidInput(format!(
            "design {} wants {noc} donors, pool has {}",
            design.label,
            pool.donors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut donor_indices: Vec<usize> = (0..pool.donors.len()).collect();
    donor_indices.shuffle(&mut rng);
    if let Some(poi) = forced_poi {
        let poi_idx = pool
            .donors
            .iter()
            .position(|(id, _)| id == poi)
            .ok_or_else(|| Error::InvalidInput(format!("no donor {poi} in the pool")))?;
        let pos = donor_indices.iter().position(|&i| i == poi_idx).unwrap();
        donor_indices.swap(0, pos);
        let slot = rng.gen_range(0..noc);
        donor_indices.swap(0, slot);
    }
    let selected = &donor_indices[..noc];

    let mut cells = Vec::with_capacity(design.total_cells());
    for (slot, &donor_idx) in selected.iter().enumerate() {
        let want = design.cell_counts[slot];
        let available = &pool.cells_by_donor[donor_idx];
        if available.len() < want {
            return Err(Error::InvalidInput(format!(
                "donor {} has {} pooled cells, design {} wants {want}",
                pool.donors[donor_idx].0,
                available.len(),
                design.label
            )));
        }
        let mut order: Vec<usize> = (0..available.len()).collect();
        order.shuffle(&mut rng);
        for &ci in order.iter().take(want) {
            cells.push(available[ci].clone());
        }
    }
    cells.shuffle(&mut rng);
    Ok(cells)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-run seed: two applications of splitmix64 over master seed, design
/// index and replicate index.
pub fn derive_run_seed(master: u64, design_idx: usize, replicate: usize) -> u64 {
    splitmix64(splitmix64(master ^ (design_idx as u64).wrapping_mul(0x9E3779B97F4A7C15)) ^ replicate as u64)
}

/// Batch configuration for [`run_batch`].
#[derive(Clone, Debug, Serialize)]
pub struct BatchConfig {
    pub designs: Vec<AdmixtureDesign>,
    pub replicates: usize,
    pub engine: Engine,
    pub params: PeakModelParams,
    pub filter: QualityFilter,
    pub trim: TrimPolicy,
    pub order: CellOrder,
    /// Force one donor into every admixture as the POI and report its LR.
    pub force_poi: bool,
    pub lr_mode: LrMode,
    pub master_seed: u64,
}

/// Everything recorded about one simulated run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub design: String,
    pub replicate: usize,
    pub seed: u64,
    pub n_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ClusterMetrics>,
    pub beam_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_log10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_llr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_probability_log10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poi_cluster_pure: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One histogram bin of normalized LLR values.
#[derive(Clone, Debug, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Aggregated batch results.
#[derive(Clone, Debug, Serialize)]
pub struct BatchSummary {
    pub runs: Vec<RunRecord>,
    pub per_design: BTreeMap<String, DesignAggregate>,
    /// mc (rows) by oc (columns) counts over scored runs.
    pub crosstab: Vec<CrosstabRow>,
    pub llr_histogram: Vec<HistogramBin>,
    pub failed_runs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DesignAggregate {
    pub runs: usize,
    pub perfect: usize,
    pub mean_dc: f64,
    pub mean_mc: f64,
    pub mean_oc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrosstabRow {
    pub mc: usize,
    pub counts: BTreeMap<usize, usize>,
    pub total: usize,
}

/// Run every (design, replicate) pair: build a per-run pool, draw the
/// admixture, search, score against truth, and (for forced-POI batches)
/// compute the POI's likelihood ratio. Failures are recorded and the batch
/// continues. Deterministic given the master seed.
pub fn run_batch(config: &BatchConfig, out_dir: Option<&Path>, db: &FrequencyDb) -> Result<BatchSummary> {
    if config.replicates == 0 || config.designs.is_empty() {
        return Err(Error::InvalidInput("batch needs designs and replicates".into()));
    }
    for d in &config.designs {
        d.validate()?;
    }
    if config.force_poi && config.engine != Engine::Ipa {
        return Err(Error::InvalidInput(
            "POI likelihood ratios require the incremental engine".into(),
        ));
    }
    config.params.validate()?;
    config.trim.validate()?;

    let specs: Vec<(usize, usize)> = (0..config.designs.len())
        .flat_map(|d| (0..config.replicates).map(move |r| (d, r)))
        .collect();

    let runs: Vec<RunRecord> = specs
        .par_iter()
        .map(|&(design_idx, replicate)| {
            let design = &config.designs[design_idx];
            let seed = derive_run_seed(config.master_seed, design_idx, replicate);
            match simulate_one(config, design, seed, db) {
                Ok(record) => record,
                Err(e) => RunRecord {
                    design: design.label.clone(),
                    replicate,
                    seed,
                    n_cells: design.total_cells(),
                    metrics: None,
                    beam_size: 0,
                    lr_log10: None,
                    normalized_llr: None,
                    match_probability_log10: None,
                    poi_cluster_pure: None,
                    error: Some(e.to_string()),
                },
            }
            .with_replicate(replicate)
        })
        .collect();

    let summary = aggregate(runs);
    if let Some(dir) = out_dir {
        write_batch_outputs(&summary, dir)?;
    }
    Ok(summary)
}

impl RunRecord {
    fn with_replicate(mut self, replicate: usize) -> Self {
        self.replicate = replicate;
        self
    }
}

fn simulate_one(
    config: &BatchConfig,
    design: &AdmixtureDesign,
    seed: u64,
    db: &FrequencyDb,
) -> Result<RunRecord> {
    let max_count = *design.cell_counts.iter().max().unwrap();
    let pool = build_pool(design.noc(), max_count, db, &config.params, config.filter, seed)?;
    let forced = config.force_poi.then(|| pool.donors[0].0.clone());
    let cells = sample_admixture(&pool, design, forced.as_deref(), splitmix64(seed))?;
    let cells = order_cells(cells, config.order);

    let pois: Vec<(String, Genotype)> = match &forced {
        Some(poi_id) => {
            let g = pool
                .donors
                .iter()
                .find(|(id, _)| id == poi_id)
                .map(|(_, g)| g.clone())
                .unwrap();
            vec![(poi_id.clone(), g)]
        }
        None => Vec::new(),
    };

    let scorer = ClusterScorer::new(&cells, db, &pois, &config.params)?;
    let beam = match config.engine {
        Engine::Ipa => ipa_run(&scorer, &config.trim)?,
        Engine::Fac1 => vec![hac_run(&scorer, crate::search::HacVariant::Fac1)?.partition],
        Engine::Fac2 => vec![hac_run(&scorer, crate::search::HacVariant::Fac2)?.partition],
    };

    let truth: Vec<&str> = cells
        .iter()
        .map(|c| c.truth_donor.as_deref().unwrap())
        .collect();
    let metrics = score_metrics(&beam[0], &truth);

    let mut record = RunRecord {
        design: design.label.clone(),
        replicate: 0,
        seed,
        n_cells: cells.len(),
        metrics: Some(metrics),
        beam_size: beam.len(),
        lr_log10: None,
        normalized_llr: None,
        match_probability_log10: None,
        poi_cluster_pure: None,
        error: None,
    };

    if let Some(poi_id) = &forced {
        let report = hypothesis_marginals(&beam, &[poi_id.clone()], true);
        let (num, den) = poi_in_out_expressions(1, 0);
        let lr = likelihood_ratio(&report, &num, &den, config.lr_mode);
        let mp = match_probability(&pois[0].1, db)?;
        record.match_probability_log10 = Some(mp);
        if let LrValue::Defined { log10, .. } = lr {
            record.lr_log10 = Some(log10);
            record.normalized_llr = Some(log10 / -mp);
        }
        // purity of the labelled cluster in the best POI-labelled partition
        record.poi_cluster_pure = beam
            .iter()
            .find(|p| p.label_count() == 1)
            .map(|p| {
                p.clusters
                    .iter()
                    .find(|c| c.label.is_some())
                    .map(|c| c.members.iter().all(|i| truth[i] == poi_id))
                    .unwrap_or(false)
            });
    }
    Ok(record)
}

fn aggregate(runs: Vec<RunRecord>) -> BatchSummary {
    let mut per_design: BTreeMap<String, DesignAggregate> = BTreeMap::new();
    let mut crosstab: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut llr_values = Vec::new();
    let mut failed = 0usize;
    for run in &runs {
        match &run.metrics {
            Some(m) => {
                let agg = per_design.entry(run.design.clone()).or_insert(DesignAggregate {
                    runs: 0,
                    perfect: 0,
                    mean_dc: 0.0,
                    mean_mc: 0.0,
                    mean_oc: 0.0,
                });
                agg.runs += 1;
                if m.dc == 0 && m.mc == 0 && m.oc == 0 {
                    agg.perfect += 1;
                }
                agg.mean_dc += m.dc as f64;
                agg.mean_mc += m.mc as f64;
                agg.mean_oc += m.oc as f64;
                *crosstab.entry(m.mc).or_default().entry(m.oc).or_default() += 1;
            }
            None => failed += 1,
        }
        if let Some(v) = run.normalized_llr {
            llr_values.push(v);
        }
    }
    for agg in per_design.values_mut() {
        let n = agg.runs.max(1) as f64;
        agg.mean_dc /= n;
        agg.mean_mc /= n;
        agg.mean_oc /= n;
    }
    let crosstab = crosstab
        .into_iter()
        .map(|(mc, counts)| {
            let total = counts.values().sum();
            CrosstabRow { mc, counts, total }
        })
        .collect();
    BatchSummary {
        runs,
        per_design,
        crosstab,
        llr_histogram: histogram(&llr_values),
        failed_runs: failed,
    }
}

/// Fixed bins of width 0.05 over [-0.2, 1.0]; outliers widen the edge bins.
fn histogram(values: &[f64]) -> Vec<HistogramBin> {
    let lo = -0.2f64;
    let hi = 1.0f64;
    let width = 0.05f64;
    let bins = ((hi - lo) / width).round() as usize;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        out[idx].count += 1;
    }
    out
}

fn write_batch_outputs(summary: &BatchSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let io_err = |path: &Path, e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };

    let json_path = dir.join("batch_summary.json");
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;

    // mc-by-oc cross-tab with margins
    let crosstab_path = dir.join("crosstab_mc_oc.csv");
    let max_oc = summary
        .crosstab
        .iter()
        .flat_map(|r| r.counts.keys().copied())
        .max()
        .unwrap_or(0);
    let mut text = String::from("mc");
    for oc in 0..=max_oc {
        text.push_str(&format!(",oc{oc}"));
    }
    text.push_str(",total\n");
    let mut col_totals = vec![0usize; max_oc + 1];
    for row in &summary.crosstab {
        text.push_str(&row.mc.to_string());
        for oc in 0..=max_oc {
            let c = row.counts.get(&oc).copied().unwrap_or(0);
            col_totals[oc] += c;
            text.push_str(&format!(",{c}"));
        }
        text.push_str(&format!(",{}\n", row.total));
    }
    text.push_str("total");
    for c in &col_totals {
        text.push_str(&format!(",{c}"));
    }
    text.push_str(&format!(",{}\n", col_totals.iter().sum::<usize>()));
    std::fs::write(&crosstab_path, text).map_err(|e| io_err(&crosstab_path, e))?;

    let hist_path = dir.join("llr_histogram.csv");
    let mut text = String::from("lo,hi,count\n");
    for bin in &summary.llr_histogram {
        text.push_str(&format!("{},{},{}\n", bin.lo, bin.hi, bin.count));
    }
    std::fs::write(&hist_path, text).map_err(|e| io_err(&hist_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_db() -> FrequencyDb {
        demo_frequency_db(5, 6, 99)
    }

    fn high_gain() -> PeakModelParams {
        PeakModelParams {
            mean_cell_height: 2000.0,
            ..PeakModelParams::default()
        }
    }

    #[test]
    fn demo_db_is_deterministic_and_normalized() {
        let a = demo_frequency_db(21, 8, 7);
        let b = demo_frequency_db(21, 8, 7);
        assert_eq!(a.n_loci(), 21);
        for locus in a.locus_names() {
            let fa = a.locus(locus).unwrap();
            let fb = b.locus(locus).unwrap();
            assert_eq!(fa.freqs(), fb.freqs());
            let sum: f64 = fa.freqs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_panel_match_probability_is_in_the_typical_range() {
        let db = demo_frequency_db(21, 8, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let g = sample_genotype(&db, &mut rng);
            let mp = match_probability(&g, &db).unwrap();
            assert!((-30.0..=-20.0).contains(&mp), "mp={mp}");
        }
    }

    #[test]
    fn table1_has_eleven_designs_with_two_to_five_donors() {
        let designs = table1_designs();
        assert_eq!(designs.len(), 11);
        for d in &designs {
            assert!((2..=5).contains(&d.noc()));
            d.validate().unwrap();
        }
        // round trip through the JSON schema
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("designs.json");
        std::fs::write(&path, serde_json::to_string(&designs).unwrap()).unwrap();
        assert_eq!(load_designs(&path).unwrap(), designs);
    }

    #[test]
    fn good_quality_filter_accepts_nearly_everything_at_high_gain() {
        let db = fast_db();
        let pool = build_pool(2, 10, &db, &high_gain(), QualityFilter::good_quality(), 5).unwrap();
        // 5 loci cap the allelic count at 10, so use a scaled-down minimum
        let _ = pool;
        let pool = build_pool(
            2,
            10,
            &db,
            &high_gain(),
            QualityFilter {
                min_large_peaks: 5,
                max_large_peaks: None,
                frac_of_expected: 0.2,
            },
            5,
        )
        .unwrap();
        assert!(pool.attempts <= 24, "attempts={}", pool.attempts);
    }

    #[test]
    fn pools_are_deterministic_per_seed() {
        let db = fast_db();
        let filter = QualityFilter {
            min_large_peaks: 3,
            max_large_peaks: None,
            frac_of_expected: 0.2,
        };
        let a = build_pool(2, 4, &db, &high_gain(), filter, 42).unwrap();
        let b = build_pool(2, 4, &db, &high_gain(), filter, 42).unwrap();
        assert_eq!(a.cells_by_donor, b.cells_by_donor);
    }

    #[test]
    fn unattainable_quota_reports_diagnostics() {
        let db = fast_db();
        let params = PeakModelParams {
            mean_cell_height: 1e-6,
            ..PeakModelParams::default()
        };
        let err = build_pool(1, 2, &db, &params, QualityFilter::good_quality(), 1).unwrap_err();
        assert!(matches!(err, Error::SimulationQuota(_)), "{err}");
    }

    #[test]
    fn admixture_uses_every_cell_once_for_exact_fit() {
        let db = fast_db();
        let filter = QualityFilter {
            min_large_peaks: 3,
            max_large_peaks: None,
            frac_of_expected: 0.2,
        };
        let pool = build_pool(2, 15, &db, &high_gain(), filter, 8).unwrap();
        let design = AdmixtureDesign {
            label: "2x1:1".into(),
            cell_counts: vec![15, 15],
        };
        let cells = sample_admixture(&pool, &design, None, 3).unwrap();
        assert_eq!(cells.len(), 30);
        let ids: std::collections::BTreeSet<&str> =
            cells.iter().map(|c| c.cell_id.as_str()).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn forced_poi_contributes_a_design_count() {
        let db = fast_db();
        let filter = QualityFilter {
            min_large_peaks: 3,
            max_large_peaks: None,
            frac_of_expected: 0.2,
        };
        let pool = build_pool(3, 10, &db, &high_gain(), filter, 9).unwrap();
        let design = AdmixtureDesign {
            label: "2x1:5".into(),
            cell_counts: vec![2, 10],
        };
        for seed in 0..10 {
            let cells = sample_admixture(&pool, &design, Some("d0"), seed).unwrap();
            let poi_cells = cells
                .iter()
                .filter(|c| c.truth_donor.as_deref() == Some("d0"))
                .count();
            assert!(poi_cells == 2 || poi_cells == 10, "poi got {poi_cells} cells");
        }
    }

    fn small_batch_config(force_poi: bool) -> BatchConfig {
        BatchConfig {
            designs: vec![
                AdmixtureDesign {
                    label: "2x1:1".into(),
                    cell_counts: vec![4, 4],
                },
                AdmixtureDesign {
                    label: "3x1:1:1".into(),
                    cell_counts: vec![3, 3, 3],
                },
            ],
            replicates: 5,
            engine: Engine::Ipa,
            params: high_gain(),
            filter: QualityFilter {
                min_large_peaks: 3,
                max_large_peaks: None,
                frac_of_expected: 0.2,
            },
            trim: TrimPolicy::default(),
            order: CellOrder::Input,
            force_poi,
            lr_mode: LrMode::Marginal,
            master_seed: 1234,
        }
    }

    #[test]
    fn batch_accounting_and_determinism() {
        let db = fast_db();
        let config = small_batch_config(false);
        let a = run_batch(&config, None, &db).unwrap();
        let b = run_batch(&config, None, &db).unwrap();
        assert_eq!(a.runs.len(), 10);
        assert_eq!(a.failed_runs, 0);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // cross-tab totals account for every scored run
        let total: usize = a.crosstab.iter().map(|r| r.total).sum();
        assert_eq!(total, 10);
        for agg in a.per_design.values() {
            assert_eq!(agg.runs, 5);
        }
    }

    #[test]
    fn high_gain_batches_cluster_perfectly_most_of_the_time() {
        let db = fast_db();
        let summary = run_batch(&small_batch_config(false), None, &db).unwrap();
        let perfect: usize = summary.per_design.values().map(|a| a.perfect).sum();
        assert!(perfect >= 9, "perfect={perfect}/10");
    }

    #[test]
    fn forced_poi_batch_reports_bounded_ratios_and_pure_clusters() {
        let db = fast_db();
        let summary = run_batch(&small_batch_config(true), None, &db).unwrap();
        let mut pure = 0usize;
        let mut total_pure = 0usize;
        for run in &summary.runs {
            assert!(run.error.is_none(), "{:?}", run.error);
            let lr = run.lr_log10.expect("LR defined");
            let mp = run.match_probability_log10.unwrap();
            assert!(lr <= -mp + 1e-9, "lr={lr} mp={mp}");
            if let Some(p) = run.poi_cluster_pure {
                total_pure += 1;
                if p {
                    pure += 1;
                }
            }
        }
        assert!(pure * 10 >= total_pure * 9, "pure={pure}/{total_pure}");
        let binned: usize = summary.llr_histogram.iter().map(|b| b.count).sum();
        assert_eq!(binned, 10);
    }

    #[test]
    fn batch_outputs_are_written() {
        let db = fast_db();
        let dir = tempfile::tempdir().unwrap();
        run_batch(&small_batch_config(true), Some(dir.path()), &db).unwrap();
        assert!(dir.path().join("batch_summary.json").is_file());
        assert!(dir.path().join("crosstab_mc_oc.csv").is_file());
        assert!(dir.path().join("llr_histogram.csv").is_file());
        let crosstab = std::fs::read_to_string(dir.path().join("crosstab_mc_oc.csv")).unwrap();
        let last = crosstab.trim_end().lines().last().unwrap();
        assert!(last.starts_with("total"));
        assert!(last.ends_with(",10"));
    }
}
