//! Post-processing of a beam of scored PLPs: symmetry adjustments,
//! per-hypothesis marginal and maximum likelihoods, likelihood ratios,
//! number-of-contributor posteriors, and clustering-quality metrics.

use crate::combinatorics::falling_factorial;
use crate::partition::{Plp, PoiIdx};
use crate::peakmodel::log_sum_exp;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use serde::Serialize;
use std::collections::BTreeMap;

/// Log prior adjustment of a PLP with `k` clusters and `j` labels:
/// `-ln(k (k-1) ... (k-j+1))`, zero for unlabelled partitions. Each labelled
/// partition is one of the equally likely ways of placing its labels on the
/// underlying unlabelled partition.
pub fn symmetry_log_factor(plp: &Plp) -> f64 {
    let k = plp.k();
    let j = plp.label_count();
    let mut ln = 0.0;
    for i in 0..j {
        ln += ((k - i) as f64).ln();
    }
    -ln
}

/// Aggregates for the PLPs labelled by one exact POI subset.
#[derive(Clone, Debug, Serialize)]
pub struct GroupStats {
    /// log-sum-exp of symmetry-adjusted scores (natural log).
    pub marginal_ln: f64,
    /// Highest symmetry-adjusted score (natural log).
    pub maximum_ln: f64,
    /// Beam index of the arg-max PLP.
    pub argmax_index: usize,
    /// Cluster count of the arg-max PLP.
    pub argmax_k: usize,
    /// Number of beam members in the group.
    pub count: usize,
}

/// Marginal/maximum likelihoods per POI subset plus the NoC posterior.
#[derive(Clone, Debug)]
pub struct HypothesisReport {
    pub poi_names: Vec<String>,
    pub groups: BTreeMap<Vec<PoiIdx>, GroupStats>,
    /// Posterior over the number of contributors, over the surviving beam
    /// only; sums to one.
    pub noc_posterior: BTreeMap<usize, f64>,
    /// True whenever the beam may have been thinned, making the posterior an
    /// approximation.
    pub noc_approximate: bool,
}

/// Group the beam by exact label set and aggregate. The overall
/// normalization constant is never computed; it cancels in every ratio.
pub fn hypothesis_marginals(beam: &[Plp], poi_names: &[String], trimmed: bool) -> HypothesisReport {
    let mut groups: BTreeMap<Vec<PoiIdx>, Vec<(usize, f64)>> = BTreeMap::new();
    let mut noc_terms: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (idx, plp) in beam.iter().enumerate() {
        let adjusted = plp.log_likelihood + symmetry_log_factor(plp);
        groups
            .entry(plp.label_set().to_vec())
            .or_default()
            .push((idx, adjusted));
        noc_terms.entry(plp.k()).or_default().push(adjusted);
    }

    let groups: BTreeMap<Vec<PoiIdx>, GroupStats> = groups
        .into_iter()
        .map(|(subset, entries)| {
            let scores: Vec<f64> = entries.iter().map(|(_, s)| *s).collect();
            let (argmax_index, maximum_ln) = entries
                .iter()
                .fold((entries[0].0, f64::NEG_INFINITY), |acc, (idx, s)| {
                    if *s > acc.1 {
                        (*idx, *s)
                    } else {
                        acc
                    }
                });
            let stats = GroupStats {
                marginal_ln: log_sum_exp(&scores),
                maximum_ln,
                argmax_index,
                argmax_k: beam[argmax_index].k(),
                count: entries.len(),
            };
            (subset, stats)
        })
        .collect();

    let per_k: BTreeMap<usize, f64> = noc_terms
        .into_iter()
        .map(|(k, terms)| (k, log_sum_exp(&terms)))
        .collect();
    let total = log_sum_exp(&per_k.values().copied().collect::<Vec<_>>());
    let mut noc_posterior: BTreeMap<usize, f64> = per_k
        .into_iter()
        .map(|(k, v)| (k, (v - total).exp()))
        .collect();
    let sum: f64 = noc_posterior.values().sum();
    for v in noc_posterior.values_mut() {
        *v /= sum;
    }

    HypothesisReport {
        poi_names: poi_names.to_vec(),
        groups,
        noc_posterior,
        noc_approximate: trimmed,
    }
}

/// Which aggregate a ratio uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    Marginal,
    Maximum,
}

impl std::str::FromStr for LrMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "marginal" => Ok(LrMode::Marginal),
            "maximum" => Ok(LrMode::Maximum),
            other => Err(crate::error::Error::InvalidInput(format!(
                "unknown LR mode {other}; expected marginal|maximum"
            ))),
        }
    }
}

/// A likelihood ratio, or the explicit flag that a requested hypothesis had
/// no surviving partitions.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LrValue {
    Defined {
        log10: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Undefined {
        missing: Vec<String>,
    },
}

fn side_value(
    report: &HypothesisReport,
    subsets: &[Vec<PoiIdx>],
    mode: LrMode,
) -> (Option<f64>, Option<usize>, Vec<String>) {
    let mut terms = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut missing = Vec::new();
    for subset in subsets {
        match report.groups.get(subset) {
            Some(stats) => {
                terms.push(stats.marginal_ln);
                if best.map_or(true, |(b, _)| stats.maximum_ln > b) {
                    best = Some((stats.maximum_ln, stats.argmax_k));
                }
            }
            None => missing.push(render_subset(subset, &report.poi_names)),
        }
    }
    if terms.is_empty() {
        return (None, None, missing);
    }
    match mode {
        LrMode::Marginal => (Some(log_sum_exp(&terms)), best.map(|(_, k)| k), missing),
        LrMode::Maximum => {
            let (v, k) = best.unwrap();
            (Some(v), Some(k), missing)
        }
    }
}

fn render_subset(subset: &[PoiIdx], names: &[String]) -> String {
    if subset.is_empty() {
        return "{}".to_string();
    }
    let parts: Vec<&str> = subset
        .iter()
        .map(|p| names.get(*p as usize).map(String::as_str).unwrap_or("?"))
        .collect();
    format!("{{{}}}", parts.join(","))
}

/// log10 ratio of the numerator subsets' aggregate to the denominator's.
/// In `Maximum` mode a structural-mismatch note is attached when the two
/// arg-max partitions disagree on the cluster count.
pub fn likelihood_ratio(
    report: &HypothesisReport,
    numerator: &[Vec<PoiIdx>],
    denominator: &[Vec<PoiIdx>],
    mode: LrMode,
) -> LrValue {
    let (num, num_k, num_missing) = side_value(report, numerator, mode);
    let (den, den_k, den_missing) = side_value(report, denominator, mode);
    match (num, den) {
        (Some(num), Some(den)) => {
            let note = match (mode, num_k, den_k) {
                (LrMode::Maximum, Some(a), Some(b)) if a != b => Some(format!(
                    "arg-max partitions have different cluster counts ({a} vs {b}); \
                     the ratio is not of the replace-one-contributor form"
                )),
                _ => None,
            };
            LrValue::Defined {
                log10: (num - den) / std::f64::consts::LN_10,
                note,
            }
        }
        _ => LrValue::Undefined {
            missing: num_missing.into_iter().chain(den_missing).collect(),
        },
    }
}

/// All subsets of `0..m` that contain `poi`, and all that do not. These are
/// the two sides of the standard "is this POI a contributor" ratio.
pub fn poi_in_out_expressions(m: usize, poi: PoiIdx) -> (Vec<Vec<PoiIdx>>, Vec<Vec<PoiIdx>>) {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for mask in 0u32..(1 << m) {
        let subset: Vec<PoiIdx> = (0..m as PoiIdx).filter(|p| mask & (1 << p) != 0).collect();
        if subset.contains(&poi) {
            with.push(subset);
        } else {
            without.push(subset);
        }
    }
    (with, without)
}

/// Clustering quality against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ClusterMetrics {
    /// Cluster-count error: clusters minus true contributors.
    pub dc: i64,
    /// Clusters containing cells from two or more people.
    pub mc: usize,
    /// Sum over people of the clusters they appear in, minus the people.
    pub oc: usize,
}

/// Score a partition against the true donor of every cell.
pub fn score_metrics(top: &Plp, truth: &[&str]) -> ClusterMetrics {
    let mut donors: BTreeMap<&str, usize> = BTreeMap::new();
    for d in truth {
        let next = donors.len();
        donors.entry(d).or_insert(next);
    }
    let n_donors = donors.len();
    let mut mc = 0usize;
    let mut clusters_per_donor = vec![0usize; n_donors];
    for cluster in &top.clusters {
        let mut present = vec![false; n_donors];
        for cell in cluster.members.iter() {
            present[donors[truth[cell]]] = true;
        }
        let distinct = present.iter().filter(|p| **p).count();
        if distinct >= 2 {
            mc += 1;
        }
        for (d, p) in present.iter().enumerate() {
            if *p {
                clusters_per_donor[d] += 1;
            }
        }
    }
    ClusterMetrics {
        dc: top.k() as i64 - n_donors as i64,
        mc,
        oc: clusters_per_donor.iter().sum::<usize>() - n_donors,
    }
}

/// Exact total prior weight over all PLPs of `n` cells and `m` labels:
/// the sum of `1/(k)_j` over every PLP. With one label this is `2 B(n)`;
/// with two it is `4 B(n) - 1`, making the normalization constant
/// `1/(4B(n)-1)`.
pub fn plp_prior_weight_total(n: usize, m: usize) -> crate::error::Result<BigRational> {
    let mut total = BigRational::from_integer(0.into());
    crate::partition::for_each_plp(n, m, |plp| {
        total += plp_weight(plp);
    })?;
    Ok(total)
}

/// Exact prior weight of the PLPs labelled by exactly `subset`.
pub fn plp_prior_group_weight(
    n: usize,
    m: usize,
    subset: &[PoiIdx],
) -> crate::error::Result<BigRational> {
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    let mut total = BigRational::from_integer(0.into());
    crate::partition::for_each_plp(n, m, |plp| {
        if plp.label_set().as_slice() == sorted.as_slice() {
            total += plp_weight(plp);
        }
    })?;
    Ok(total)
}

fn plp_weight(plp: &Plp) -> BigRational {
    let ff = falling_factorial(plp.k(), plp.label_count());
    BigRational::new(BigInt::one(), BigInt::from(ff))
}

// ---------------------------------------------------------------------------
// Report document types (serialized by the CLI)
// ---------------------------------------------------------------------------

/// One cluster of a reported partition.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterEntry {
    pub cells: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inferred_genotype: Option<BTreeMap<String, [String; 2]>>,
}

/// One ranked partition of the report.
#[derive(Clone, Debug, Serialize)]
pub struct PartitionEntry {
    pub rank: usize,
    pub log10_likelihood: f64,
    /// Score plus the symmetry adjustment, in log10.
    pub log10_likelihood_adjusted: f64,
    /// Posterior over the surviving beam under a uniform partition prior.
    pub posterior: f64,
    pub clusters: Vec<ClusterEntry>,
}

/// Marginal and maximum likelihood of one POI subset.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisEntry {
    pub pois: Vec<String>,
    pub marginal_log10: f64,
    pub maximum_log10: f64,
    pub count: usize,
    pub argmax_rank: usize,
}

/// One row of the LR table.
#[derive(Clone, Debug, Serialize)]
pub struct LrEntry {
    pub poi: String,
    pub mode: LrMode,
    pub value: LrValue,
    pub match_probability_log10: f64,
    /// `log10(LR) / (-log10 MP)`; bounded above by one for
    /// replace-one-contributor hypotheses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_llr: Option<f64>,
}
