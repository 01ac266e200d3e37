//! The scEPG data model and the continuous peak-height likelihood
//! `p(e | g)` with dropout, drop-in, stutter and degradation.
//!
//! Heights at an expected position are gamma distributed. Each expected
//! contribution (an allele copy, or a stutter of one) has mean
//! `mu * decay` scaled by its stutter rate; a contribution drops out with
//! the gamma mass below the analytic threshold, independently of its
//! siblings, so a homozygote's total-dropout mass is the square of the
//! single-copy mass. Conditional on the set of surviving contributions, an
//! observed height follows the threshold-truncated gamma whose mean is the
//! sum of the survivors' means. Peaks at unexpected positions are drop-ins:
//! Poisson count per locus, exponentially decaying heights above threshold.

use crate::error::{Error, Result};
use crate::genetics::{is_y_linked, Designation, FrequencyDb, Genotype};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use std::collections::BTreeMap;
use std::path::Path;

/// One recorded peak: allele designation and height in RFU.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Peak {
    pub allele: Designation,
    pub height: f64,
}

/// A single cell's electropherogram: peak heights per locus.
///
/// `truth_donor` is simulator ground truth; the search never reads it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScEpg {
    pub cell_id: String,
    pub kit_id: String,
    loci: BTreeMap<String, Vec<Peak>>,
    pub truth_donor: Option<String>,
}

impl ScEpg {
    pub fn new(cell_id: impl Into<String>, kit_id: impl Into<String>) -> Self {
        ScEpg {
            cell_id: cell_id.into(),
            kit_id: kit_id.into(),
            loci: BTreeMap::new(),
            truth_donor: None,
        }
    }

    /// Record a peak, keeping the locus vector sorted by designation.
    /// A duplicate designation at a locus is rejected.
    pub fn add_peak(&mut self, locus: &str, allele: Designation, height: f64) -> Result<()> {
        let peaks = self.loci.entry(locus.to_string()).or_default();
        match peaks.binary_search_by(|p| p.allele.cmp(&allele)) {
            Ok(_) => Err(Error::InvalidInput(format!(
                "duplicate peak at allele {allele}, locus {locus}, cell {}",
                self.cell_id
            ))),
            Err(pos) => {
                peaks.insert(pos, Peak { allele, height });
                Ok(())
            }
        }
    }

    /// Peaks at `locus`, sorted by designation; empty when the locus dropped
    /// out entirely.
    pub fn peaks(&self, locus: &str) -> &[Peak] {
        self.loci.get(locus).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn loci(&self) -> impl Iterator<Item = (&str, &[Peak])> {
        self.loci.iter().map(|(l, p)| (l.as_str(), p.as_slice()))
    }

    pub fn peak_count(&self) -> usize {
        self.loci.values().map(Vec::len).sum()
    }
}

/// Parameters of the peak-height model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PeakModelParams {
    /// Minimum recordable height in RFU.
    pub analytic_threshold: f64,
    /// Mean height of one allele copy's peak (gamma mean, RFU).
    pub mean_cell_height: f64,
    /// Gamma shape; smaller means noisier amplification.
    pub gamma_shape: f64,
    /// Expected drop-in peaks per locus.
    pub dropin_rate: f64,
    /// Mean excess of a drop-in peak above the threshold (RFU).
    pub dropin_height_decay: f64,
    /// Single-repeat backward stutter proportion.
    pub back1_rate: f64,
    /// Two-repeat backward stutter proportion.
    pub back2_rate: f64,
    /// Single-repeat forward stutter proportion.
    pub fwd1_rate: f64,
    /// Log-height decay per designation unit; 0 disables degradation.
    pub degradation_slope: f64,
}

impl Default for PeakModelParams {
    fn default() -> Self {
        PeakModelParams {
            analytic_threshold: 5.0,
            mean_cell_height: 300.0,
            gamma_shape: 1.5,
            dropin_rate: 0.02,
            dropin_height_decay: 20.0,
            back1_rate: 0.08,
            back2_rate: 0.01,
            fwd1_rate: 0.01,
            degradation_slope: 0.0,
        }
    }
}

impl PeakModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.mean_cell_height > 0.0) {
            return bad(format!("mean_cell_height must be > 0, got {}", self.mean_cell_height));
        }
        if !(self.gamma_shape > 0.0) {
            return bad(format!("gamma_shape must be > 0, got {}", self.gamma_shape));
        }
        if !(self.analytic_threshold >= 0.0) {
            return bad(format!("analytic_threshold must be >= 0, got {}", self.analytic_threshold));
        }
        for (name, v) in [
            ("dropin_rate", self.dropin_rate),
            ("back1_rate", self.back1_rate),
            ("back2_rate", self.back2_rate),
            ("fwd1_rate", self.fwd1_rate),
            ("degradation_slope", self.degradation_slope),
        ] {
            if !(v >= 0.0) || v >= 1.0 && name != "degradation_slope" && name != "dropin_rate" {
                return bad(format!("{name} must be in [0,1), got {v}"));
            }
        }
        if self.dropin_rate > 0.0 && !(self.dropin_height_decay > 0.0) {
            return bad(format!(
                "dropin_height_decay must be > 0 when dropin_rate > 0, got {}",
                self.dropin_height_decay
            ));
        }
        Ok(())
    }

    /// Expected height of one allele copy at `d` after degradation.
    pub fn expected_height(&self, d: &Designation) -> f64 {
        let size = match d {
            Designation::Numeric { repeats, partial } => *repeats as f64 + *partial as f64 / 10.0,
            Designation::Label(_) => 0.0,
        };
        self.mean_cell_height * (-self.degradation_slope * size).exp()
    }
}

// ---------------------------------------------------------------------------
// Gamma helpers (log space)
// ---------------------------------------------------------------------------

fn ln_gamma_pdf(h: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * h.ln() - h / scale - shape * scale.ln() - ln_gamma(shape)
}

fn gamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, x / scale)
    }
}

fn gamma_sf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(shape, x / scale)
    }
}

/// The expected contributions accumulating at one peak position.
#[derive(Clone, Debug)]
struct PositionModel {
    means: SmallVec<[f64; 4]>,
}

impl PositionModel {
    /// Log mass of seeing no peak: every contribution independently falls
    /// below the threshold.
    fn ln_dropout(&self, shape: f64, at: f64) -> f64 {
        self.means
            .iter()
            .map(|&m| {
                if m <= 0.0 {
                    0.0
                } else {
                    gamma_cdf(at, shape, m / shape).ln()
                }
            })
            .sum()
    }

    /// Log density of an observed height `h >= at`: a mixture over the
    /// non-empty survivor subsets, each a threshold-truncated gamma whose
    /// mean is the subset's total.
    fn ln_density(&self, h: f64, shape: f64, at: f64) -> f64 {
        let r = self.means.len();
        let mut ln_drop = SmallVec::<[f64; 4]>::new();
        let mut ln_surv = SmallVec::<[f64; 4]>::new();
        for &m in &self.means {
            if m <= 0.0 {
                ln_drop.push(0.0);
                ln_surv.push(f64::NEG_INFINITY);
            } else {
                ln_drop.push(gamma_cdf(at, shape, m / shape).ln());
                let s = gamma_sf(at, shape, m / shape);
                ln_surv.push(if s > 0.0 { s.ln() } else { f64::NEG_INFINITY });
            }
        }
        let mut terms = SmallVec::<[f64; 16]>::new();
        for mask in 1u32..(1 << r) {
            let mut weight = 0.0;
            let mut total_mean = 0.0;
            let mut max_ln_surv = f64::NEG_INFINITY;
            for i in 0..r {
                if mask & (1 << i) != 0 {
                    weight += ln_surv[i];
                    total_mean += self.means[i];
                    max_ln_surv = max_ln_surv.max(ln_surv[i]);
                } else {
                    weight += ln_drop[i];
                }
            }
            if weight == f64::NEG_INFINITY {
                continue;
            }
            // survival of the merged gamma dominates each single survival;
            // fall back to that bound if the direct evaluation underflows
            let s_total = gamma_sf(at, shape, total_mean / shape);
            let ln_s_total = if s_total > 0.0 {
                s_total.ln().max(max_ln_surv)
            } else {
                max_ln_surv
            };
            terms.push(weight + ln_gamma_pdf(h, shape, total_mean / shape) - ln_s_total);
        }
        log_sum_exp(&terms)
    }
}

/// Numerically stable log of a sum of exponentials.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Expected positions for a genotype pair at one locus: designation ->
/// contribution means. Allele copies contribute `mu * decay`; each stutter
/// position contributes `rate` times its parent copy's mean.
fn expected_positions(
    locus: &str,
    pair: &(Designation, Designation),
    params: &PeakModelParams,
) -> Result<BTreeMap<Designation, PositionModel>> {
    let mut map: BTreeMap<Designation, PositionModel> = BTreeMap::new();
    let mut add = |d: Designation, mean: f64| {
        map.entry(d)
            .or_insert_with(|| PositionModel { means: SmallVec::new() })
            .means
            .push(mean);
    };
    for allele in [&pair.0, &pair.1] {
        if !allele.is_numeric() {
            return Err(Error::NonNumericAllele {
                locus: locus.to_string(),
                allele: allele.to_string(),
            });
        }
        let parent_mean = params.expected_height(allele);
        add(allele.clone(), parent_mean);
        for (rate, delta) in [
            (params.back1_rate, -1),
            (params.back2_rate, -2),
            (params.fwd1_rate, 1),
        ] {
            if rate > 0.0 {
                if let Some(pos) = allele.shifted(delta) {
                    add(pos, rate * parent_mean);
                }
            }
        }
    }
    Ok(map)
}

fn ln_poisson_pmf(k: usize, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)
}

fn ln_dropin_height_pdf(excess: f64, decay: f64) -> f64 {
    -decay.ln() - excess / decay
}

/// Log-likelihood of the observed peaks at one locus given a genotype pair.
///
/// Every observed peak is explained as allelic, stutter, or drop-in; every
/// expected position without a peak contributes its dropout mass. A peak
/// with no available mechanism yields negative infinity.
pub fn locus_likelihood(
    locus: &str,
    peaks: &[Peak],
    pair: &(Designation, Designation),
    params: &PeakModelParams,
) -> Result<f64> {
    let at = params.analytic_threshold;
    let shape = params.gamma_shape;
    let positions = expected_positions(locus, pair, params)?;
    let mut observed: BTreeMap<&Designation, f64> = BTreeMap::new();
    for p in peaks {
        if !p.allele.is_numeric() {
            return Err(Error::NonNumericAllele {
                locus: locus.to_string(),
                allele: p.allele.to_string(),
            });
        }
        observed.insert(&p.allele, p.height);
    }

    let mut ll = 0.0;
    for (pos, model) in &positions {
        match observed.remove(pos) {
            Some(h) => ll += model.ln_density(h, shape, at),
            None => ll += model.ln_dropout(shape, at),
        }
    }
    // whatever is left can only be drop-in
    ll += ln_poisson_pmf(observed.len(), params.dropin_rate);
    if !observed.is_empty() {
        if params.dropin_rate <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        for (_, h) in observed {
            ll += ln_dropin_height_pdf(h - at, params.dropin_height_decay);
        }
    }
    Ok(ll)
}

/// Log-likelihood of a whole cell given a full genotype: the sum over the
/// genotype's loci of [`locus_likelihood`]. The cell may not carry peaks at
/// loci outside the genotype.
pub fn cell_likelihood(cell: &ScEpg, genotype: &Genotype, params: &PeakModelParams) -> Result<f64> {
    for (locus, _) in cell.loci() {
        if genotype.pair(locus).is_none() {
            return Err(Error::UnknownLocus(format!(
                "{locus} (present in cell {}, absent from genotype)",
                cell.cell_id
            )));
        }
    }
    let mut total = 0.0;
    for locus in genotype.loci() {
        let pair = genotype.pair(locus).unwrap();
        total += locus_likelihood(locus, cell.peaks(locus), pair, params)?;
    }
    Ok(total)
}

/// Draw a synthetic scEPG from a genotype under the peak model: gamma
/// heights per contribution summed by position, censored below the
/// threshold, plus Poisson drop-ins with frequency-weighted alleles and
/// exponentially decaying heights.
pub fn sample_scepg<R: Rng>(
    cell_id: &str,
    genotype: &Genotype,
    db: &FrequencyDb,
    params: &PeakModelParams,
    rng: &mut R,
) -> Result<ScEpg> {
    let at = params.analytic_threshold;
    let shape = params.gamma_shape;
    let mut cell = ScEpg::new(cell_id, "sim");
    for locus in genotype.loci() {
        let pair = genotype.pair(locus).unwrap();
        let positions = expected_positions(locus, pair, params)?;
        let mut heights: BTreeMap<Designation, f64> = BTreeMap::new();
        for (pos, model) in positions {
            let mut total = 0.0;
            for &m in &model.means {
                if m > 0.0 {
                    let g = rand_distr::Gamma::new(shape, m / shape)
                        .map_err(|e| Error::Numerical(e.to_string()))?;
                    total += g.sample(rng);
                }
            }
            if total >= at {
                heights.insert(pos, total);
            }
        }
        if params.dropin_rate > 0.0 {
            let count = rand_distr::Poisson::new(params.dropin_rate)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(rng) as usize;
            if count > 0 {
                let lf = db.locus(locus)?;
                let exp = rand_distr::Exp::new(1.0 / params.dropin_height_decay)
                    .map_err(|e| Error::Numerical(e.to_string()))?;
                for _ in 0..count {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut idx = lf.len() - 1;
                    for (i, &f) in lf.freqs().iter().enumerate() {
                        acc += f;
                        if u < acc {
                            idx = i;
                            break;
                        }
                    }
                    let d = lf.alleles()[idx].clone();
                    *heights.entry(d).or_insert(0.0) += at + exp.sample(rng);
                }
            }
        }
        for (d, h) in heights {
            cell.add_peak(locus, d, h)?;
        }
    }
    Ok(cell)
}

// ---------------------------------------------------------------------------
// CSV ingest
// ---------------------------------------------------------------------------

/// Counts reported by the scEPG loader.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ScEpgLoadReport {
    pub cells: usize,
    pub peaks_kept: usize,
    pub sub_threshold_dropped: usize,
    pub y_linked_dropped: usize,
}

#[derive(Deserialize)]
struct CellRow {
    cell_id: String,
    kit: String,
    locus: String,
    allele: String,
    height: f64,
    donor: Option<String>,
}

/// Load scEPGs from CSV with header `cell_id,kit,locus,allele,height` (an
/// optional trailing `donor` column carries ground truth for calibration).
/// Rows below the analytic threshold and rows on Y-linked loci are dropped
/// and counted. Cells keep their first-appearance order.
pub fn load_scepgs_csv(path: &Path, analytic_threshold: f64) -> Result<(Vec<ScEpg>, ScEpgLoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    let mut cells: Vec<ScEpg> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut report = ScEpgLoadReport::default();
    let mut kit: Option<String> = None;

    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let mut raw = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(Error::Csv {
                    path: path.display().to_string(),
                    line: e.position().map(|p| p.line()).unwrap_or(0),
                    msg: e.to_string(),
                })
            }
        }
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let row: CellRow = raw.deserialize(Some(&headers)).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        match &kit {
            None => kit = Some(row.kit.clone()),
            Some(k) if *k != row.kit => {
                return Err(Error::InvalidInput(format!(
                    "multiple kits in one file ({k} and {}); one kit per run is assumed",
                    row.kit
                )))
            }
            _ => {}
        }
        if !(row.height > 0.0) {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line,
                msg: format!("non-positive height {}", row.height),
            });
        }
        let idx = *index.entry(row.cell_id.clone()).or_insert_with(|| {
            cells.push(ScEpg::new(row.cell_id.clone(), row.kit.clone()));
            cells.len() - 1
        });
        if let Some(donor) = &row.donor {
            if !donor.is_empty() {
                match &cells[idx].truth_donor {
                    Some(d) if d != donor => {
                        return Err(Error::Csv {
                            path: path.display().to_string(),
                            line,
                            msg: format!("cell {} labelled with two donors", row.cell_id),
                        })
                    }
                    _ => cells[idx].truth_donor = Some(donor.clone()),
                }
            }
        }
        if is_y_linked(&row.locus) {
            report.y_linked_dropped += 1;
            continue;
        }
        if row.height < analytic_threshold {
            report.sub_threshold_dropped += 1;
            continue;
        }
        let d: Designation = row.allele.parse().unwrap();
        cells[idx].add_peak(&row.locus, d, row.height).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        report.peaks_kept += 1;
    }
    report.cells = cells.len();
    if cells.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no cells found in {}",
            path.display()
        )));
    }
    Ok((cells, report))
}

/// Write scEPGs in the same CSV schema, with the `donor` column when truth
/// is known.
pub fn write_scepgs_csv(path: &Path, cells: &[ScEpg]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    })?;
    let any_truth = cells.iter().any(|c| c.truth_donor.is_some());
    let mut header = vec!["cell_id", "kit", "locus", "allele", "height"];
    if any_truth {
        header.push("donor");
    }
    w.write_record(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for cell in cells {
        for (locus, peaks) in cell.loci() {
            for p in peaks {
                let mut rec = vec![
                    cell.cell_id.clone(),
                    cell.kit_id.clone(),
                    locus.to_string(),
                    p.allele.to_string(),
                    format!("{}", p.height),
                ];
                if any_truth {
                    rec.push(cell.truth_donor.clone().unwrap_or_default());
                }
                w.write_record(&rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
