//! Partition search: the incremental partitioning algorithm (IPA) over
//! partially labelled partitions, and hierarchical agglomerative baselines
//! with either a uniform prior on the contributor count (FAC1) or a uniform
//! prior over partitions (FAC2).

use crate::combinatorics::{ln_big_ratio, stirling2};
use crate::error::{Error, Result};
use crate::partition::{CellSet, Cluster, ClusterScorer, Plp, PoiIdx};
use crate::peakmodel::ScEpg;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Beam trimming: a log-likelihood window below the best partition, then a
/// hard cap on the number of survivors. The window is applied first.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrimPolicy {
    /// Natural-log window below the best score.
    pub delta_ln: f64,
    /// Maximum number of partitions kept after the window.
    pub max_partitions: usize,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        TrimPolicy {
            delta_ln: 25.0,
            max_partitions: 100,
        }
    }
}

impl TrimPolicy {
    /// No trimming at all; the beam holds the full PLP set.
    pub fn unbounded() -> Self {
        TrimPolicy {
            delta_ln: f64::INFINITY,
            max_partitions: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_ln > 0.0) {
            return Err(Error::InvalidInput(format!(
                "trim window must be > 0, got {}",
                self.delta_ln
            )));
        }
        if self.max_partitions == 0 {
            return Err(Error::InvalidInput("beam cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// How cells are ordered before the incremental search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellOrder {
    /// Keep the input order.
    #[default]
    Input,
    /// Information-rich cells first: stable sort by descending peak count.
    PeakCountDesc,
}

impl std::str::FromStr for CellOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(CellOrder::Input),
            "peaks-desc" => Ok(CellOrder::PeakCountDesc),
            other => Err(Error::InvalidInput(format!(
                "unknown cell order {other}; expected input|peaks-desc"
            ))),
        }
    }
}

/// Apply a cell ordering. The returned vector is what the scorer and all
/// reported cell indices refer to.
pub fn order_cells(mut cells: Vec<ScEpg>, order: CellOrder) -> Vec<ScEpg> {
    match order {
        CellOrder::Input => cells,
        CellOrder::PeakCountDesc => {
            cells.sort_by_key(|c| std::cmp::Reverse(c.peak_count()));
            cells
        }
    }
}

/// The beam after some prefix of cells has been processed, sorted by
/// descending score.
#[derive(Clone, Debug)]
pub struct BeamState {
    pub processed: usize,
    pub beam: Vec<Plp>,
}

fn sort_and_trim(mut beam: Vec<Plp>, policy: &TrimPolicy) -> Vec<Plp> {
    beam.sort_by(|a, b| {
        b.log_likelihood
            .total_cmp(&a.log_likelihood)
            .then_with(|| a.clusters.cmp(&b.clusters))
    });
    if let Some(best) = beam.first().map(|p| p.log_likelihood) {
        if best.is_finite() {
            beam.retain(|p| best - p.log_likelihood <= policy.delta_ln);
        }
    }
    beam.truncate(policy.max_partitions);
    beam
}

/// Start the beam: the first cell alone, unlabelled or labelled by each POI.
pub fn ipa_init(scorer: &ClusterScorer, policy: &TrimPolicy) -> BeamState {
    let n = scorer.n_cells();
    let mut beam = Vec::with_capacity(scorer.n_pois() + 1);
    beam.push(scorer.score_plp(vec![Cluster::unlabelled(CellSet::singleton(n, 0))]));
    for poi in 0..scorer.n_pois() {
        beam.push(scorer.score_plp(vec![Cluster::labelled(
            CellSet::singleton(n, 0),
            poi as PoiIdx,
        )]));
    }
    BeamState {
        processed: 1,
        beam: sort_and_trim(beam, policy),
    }
}

enum ChildKind {
    Extend(usize),
    NewUnlabelled,
    NewLabelled(PoiIdx),
}

/// Extend every beam member with the next cell in all admissible ways,
/// score the children incrementally (only the touched cluster is
/// re-evaluated), deduplicate by canonical form, and trim.
pub fn ipa_step(state: &BeamState, scorer: &ClusterScorer, policy: &TrimPolicy) -> BeamState {
    let cell = state.processed;
    let n = scorer.n_cells();
    let m = scorer.n_pois();

    let mut jobs: Vec<(usize, ChildKind)> = Vec::new();
    for (pi, parent) in state.beam.iter().enumerate() {
        for ci in 0..parent.clusters.len() {
            jobs.push((pi, ChildKind::Extend(ci)));
        }
        jobs.push((pi, ChildKind::NewUnlabelled));
        let used: HashSet<PoiIdx> = parent.clusters.iter().filter_map(|c| c.label).collect();
        for poi in 0..m as PoiIdx {
            if !used.contains(&poi) {
                jobs.push((pi, ChildKind::NewLabelled(poi)));
            }
        }
    }

    let children: Vec<Plp> = jobs
        .par_iter()
        .map(|(pi, kind)| {
            let parent = &state.beam[*pi];
            match kind {
                ChildKind::Extend(ci) => {
                    let old = &parent.clusters[*ci];
                    let grown = Cluster {
                        members: old.members.with(cell),
                        label: old.label,
                    };
                    let score = parent.log_likelihood - scorer.cluster_log_likelihood(old)
                        + scorer.cluster_log_likelihood(&grown);
                    let mut clusters = parent.clusters.clone();
                    clusters[*ci] = grown;
                    // appending a later cell never disturbs the canonical order
                    Plp {
                        clusters,
                        log_likelihood: score,
                    }
                }
                ChildKind::NewUnlabelled => {
                    let single = Cluster::unlabelled(CellSet::singleton(n, cell));
                    let score = parent.log_likelihood + scorer.cluster_log_likelihood(&single);
                    let mut clusters = parent.clusters.clone();
                    clusters.push(single);
                    Plp {
                        clusters,
                        log_likelihood: score,
                    }
                }
                ChildKind::NewLabelled(poi) => {
                    let single = Cluster::labelled(CellSet::singleton(n, cell), *poi);
                    let score = parent.log_likelihood + scorer.cluster_log_likelihood(&single);
                    let mut clusters = parent.clusters.clone();
                    clusters.push(single);
                    Plp {
                        clusters,
                        log_likelihood: score,
                    }
                }
            }
        })
        .collect();

    // children of distinct parents are distinct by construction; the dedup
    // guards the invariant anyway
    let mut seen: HashSet<Vec<Cluster>> = HashSet::with_capacity(children.len());
    let mut unique = Vec::with_capacity(children.len());
    for child in children {
        if seen.insert(child.clusters.clone()) {
            unique.push(child);
        }
    }

    BeamState {
        processed: cell + 1,
        beam: sort_and_trim(unique, policy),
    }
}

/// Run the incremental partitioning algorithm over all cells of the scorer.
/// Returns the surviving partitions ranked by descending score.
pub fn ipa_run(scorer: &ClusterScorer, policy: &TrimPolicy) -> Result<Vec<Plp>> {
    if scorer.n_cells() == 0 {
        return Err(Error::InvalidInput("cannot cluster zero cells".into()));
    }
    policy.validate()?;
    let mut state = ipa_init(scorer, policy);
    while state.processed < scorer.n_cells() {
        state = ipa_step(&state, scorer, policy);
    }
    Ok(state.beam)
}

/// Which search drives a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Ipa,
    Fac1,
    Fac2,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipa" => Ok(Engine::Ipa),
            "fac1" => Ok(Engine::Fac1),
            "fac2" => Ok(Engine::Fac2),
            other => Err(Error::InvalidInput(format!(
                "unknown engine {other}; expected ipa|fac1|fac2"
            ))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Engine::Ipa => write!(f, "ipa"),
            Engine::Fac1 => write!(f, "fac1"),
            Engine::Fac2 => write!(f, "fac2"),
        }
    }
}

/// Hierarchical agglomerative variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HacVariant {
    /// Uniform prior on the number of contributors; merge score carries a
    /// Stirling-ratio term.
    Fac1,
    /// Uniform prior over partitions; plain likelihood gain.
    Fac2,
}

/// One evaluated pair in a merge round: the likelihood gain of combining
/// clusters `i` and `j`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairEval {
    pub i: usize,
    pub j: usize,
    pub delta_star: f64,
}

/// One round of the agglomeration with everything that was evaluated.
#[derive(Clone, Debug, Serialize)]
pub struct HacRound {
    /// Cluster count before the merge.
    pub k: usize,
    /// `ln(S(n,k)/S(n,k-1))`, the FAC1 adjustment in force this round.
    pub ln_stirling_ratio: f64,
    pub evals: Vec<PairEval>,
    /// The merged pair, or `None` when the round stopped the algorithm.
    pub merged: Option<(usize, usize)>,
}

/// Result of a hierarchical run: the final partition and the full trace.
#[derive(Clone, Debug)]
pub struct HacRun {
    pub partition: Plp,
    pub rounds: Vec<HacRound>,
}

/// Agglomerate from singletons, merging the best-scoring pair while the
/// variant's criterion stays positive. Ties go to the smallest `(i,j)`.
pub fn hac_run(scorer: &ClusterScorer, variant: HacVariant) -> Result<HacRun> {
    let n = scorer.n_cells();
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster zero cells".into()));
    }
    if scorer.n_pois() > 0 {
        return Err(Error::InvalidInput(
            "hierarchical agglomeration does not take POIs; use the incremental engine".into(),
        ));
    }

    let mut clusters: Vec<Cluster> = (0..n)
        .map(|i| Cluster::unlabelled(CellSet::singleton(n, i)))
        .collect();
    let mut scores: Vec<f64> = clusters
        .iter()
        .map(|c| scorer.cluster_log_likelihood(c))
        .collect();
    let mut rounds = Vec::new();

    while clusters.len() > 1 {
        let k = clusters.len();
        let ln_ratio = ln_big_ratio(&stirling2(n, k), &stirling2(n, k - 1));
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .collect();
        let evals: Vec<PairEval> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let mut merged = clusters[i].members.clone();
                merged.union_with(&clusters[j].members);
                let joint = scorer.cluster_log_likelihood(&Cluster::unlabelled(merged));
                PairEval {
                    i,
                    j,
                    delta_star: joint - scores[i] - scores[j],
                }
            })
            .collect();

        let mut best: Option<&PairEval> = None;
        for eval in &evals {
            let criterion = match variant {
                HacVariant::Fac1 => eval.delta_star + ln_ratio,
                HacVariant::Fac2 => eval.delta_star,
            };
            let best_criterion = best.map(|b| match variant {
                HacVariant::Fac1 => b.delta_star + ln_ratio,
                HacVariant::Fac2 => b.delta_star,
            });
            if best_criterion.map_or(true, |bc| criterion > bc) {
                best = Some(eval);
            }
        }
        let best = *best.expect("at least one pair");
        let accept = match variant {
            HacVariant::Fac1 => best.delta_star + ln_ratio > 0.0,
            HacVariant::Fac2 => best.delta_star > 0.0,
        };
        rounds.push(HacRound {
            k,
            ln_stirling_ratio: ln_ratio,
            evals,
            merged: accept.then_some((best.i, best.j)),
        });
        if !accept {
            break;
        }
        let (i, j) = (best.i, best.j);
        let mut merged = clusters[i].members.clone();
        merged.union_with(&clusters[j].members);
        let merged = Cluster::unlabelled(merged);
        let merged_score = scorer.cluster_log_likelihood(&merged);
        clusters[i] = merged;
        scores[i] = merged_score;
        clusters.remove(j);
        scores.remove(j);
    }

    let total: f64 = scores.iter().sum();
    Ok(HacRun {
        partition: Plp::new(clusters, total),
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genetics::{Designation, FrequencyDb, Genotype};
    use crate::partition::enumerate_plps;
    use crate::peakmodel::{sample_scepg, PeakModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn des(s: &str) -> Designation {
        s.parse().unwrap()
    }

    fn small_db(loci: &[&str]) -> FrequencyDb {
        let mut db = FrequencyDb::new(0.0, "test");
        for locus in loci {
            for (i, f) in [0.25, 0.2, 0.15, 0.12, 0.1, 0.08, 0.06, 0.04].iter().enumerate() {
                db.insert_allele(locus, Designation::numeric(6 + i as u16, 0), *f)
                    .unwrap();
            }
        }
        db
    }

    fn donor(db: &FrequencyDb, offset: u16) -> Genotype {
        let mut g = Genotype::new();
        for locus in db.locus_names() {
            g.set_pair(
                locus,
                Designation::numeric(6 + offset * 2, 0),
                Designation::numeric(7 + offset * 2, 0),
            );
        }
        g
    }

    fn sample_cells(
        db: &FrequencyDb,
        donors: &[(&Genotype, usize)],
        params: &PeakModelParams,
        seed: u64,
    ) -> Vec<crate::peakmodel::ScEpg> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Vec::new();
        for (di, (g, count)) in donors.iter().enumerate() {
            for c in 0..*count {
                let mut cell =
                    sample_scepg(&format!("d{di}_c{c}"), g, db, params, &mut rng).unwrap();
                cell.truth_donor = Some(format!("d{di}"));
                cells.push(cell);
            }
        }
        cells
    }

    fn structures(beam: &[Plp]) -> BTreeSet<String> {
        beam.iter().map(|p| p.render(&["s1".into(), "s2".into()])).collect()
    }

    #[test]
    fn step_generates_the_five_extensions_of_two_partitions() {
        let db = small_db(&["A"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let cells = sample_cells(&db, &[(&g, 3)], &params, 1);
        let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
        let policy = TrimPolicy::unbounded();
        let s1 = ipa_init(&scorer, &policy);
        let s2 = ipa_step(&s1, &scorer, &policy);
        assert_eq!(s2.beam.len(), 2);
        let s3 = ipa_step(&s2, &scorer, &policy);
        let expect: BTreeSet<String> = [
            "(0,2)(1)",
            "(0)(1,2)",
            "(0)(1)(2)",
            "(0,1,2)",
            "(0,1)(2)",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(structures(&s3.beam), expect);
    }

    #[test]
    fn step_generates_the_five_plps_for_one_poi() {
        let db = small_db(&["A"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let cells = sample_cells(&db, &[(&g, 2)], &params, 2);
        let pois = vec![("s1".to_string(), g.clone())];
        let scorer = ClusterScorer::new(&cells, &db, &pois, &params).unwrap();
        let policy = TrimPolicy::unbounded();
        let s1 = ipa_init(&scorer, &policy);
        assert_eq!(structures(&s1.beam), ["(0)", "(0|s1)"].iter().map(|s| s.to_string()).collect());
        let s2 = ipa_step(&s1, &scorer, &policy);
        let expect: BTreeSet<String> = [
            "(0,1|s1)",
            "(0|s1)(1)",
            "(0,1)",
            "(0)(1)",
            "(0)(1|s1)",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(structures(&s2.beam), expect);
    }

    #[test]
    fn untrimmed_run_equals_exhaustive_enumeration() {
        let db = small_db(&["A", "B"]);
        let params = PeakModelParams::default();
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let cells = sample_cells(&db, &[(&g0, 3), (&g1, 2)], &params, 3);
        let pois = vec![("s1".to_string(), g0.clone())];
        let scorer = ClusterScorer::new(&cells, &db, &pois, &params).unwrap();
        let beam = ipa_run(&scorer, &TrimPolicy::unbounded()).unwrap();

        let mut expected: Vec<Plp> = enumerate_plps(5, 1)
            .unwrap()
            .into_iter()
            .map(|p| scorer.score_plp(p.clusters))
            .collect();
        expected.sort_by(|a, b| {
            b.log_likelihood
                .total_cmp(&a.log_likelihood)
                .then_with(|| a.clusters.cmp(&b.clusters))
        });
        assert_eq!(beam.len(), expected.len());
        for (got, want) in beam.iter().zip(&expected) {
            assert_eq!(got.clusters, want.clusters);
            assert!((got.log_likelihood - want.log_likelihood).abs() < 1e-9);
        }
    }

    #[test]
    fn one_donor_collapses_to_a_single_cluster() {
        let db = small_db(&["A", "B", "C", "D"]);
        let params = PeakModelParams {
            mean_cell_height: 2000.0,
            ..PeakModelParams::default()
        };
        let g = donor(&db, 0);
        let mut hits = 0;
        for seed in 0..100 {
            let cells = sample_cells(&db, &[(&g, 5)], &params, seed);
            let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
            let beam = ipa_run(&scorer, &TrimPolicy::default()).unwrap();
            if beam[0].k() == 1 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "single-cluster top in {hits}/100 runs");
    }

    #[test]
    fn two_disjoint_donors_recover_the_true_partition() {
        let db = small_db(&["A", "B", "C", "D"]);
        let params = PeakModelParams {
            mean_cell_height: 2000.0,
            ..PeakModelParams::default()
        };
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let mut hits = 0;
        for seed in 0..100 {
            let cells = sample_cells(&db, &[(&g0, 4), (&g1, 4)], &params, seed);
            let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
            let beam = ipa_run(&scorer, &TrimPolicy::default()).unwrap();
            let top = &beam[0];
            let want: BTreeSet<Vec<usize>> =
                [vec![0, 1, 2, 3], vec![4, 5, 6, 7]].into_iter().collect();
            let got: BTreeSet<Vec<usize>> = top
                .clusters
                .iter()
                .map(|c| c.members.iter().collect())
                .collect();
            if got == want {
                hits += 1;
            }
        }
        assert!(hits >= 95, "true partition on {hits}/100 runs");
    }

    #[test]
    fn trimmed_search_keeps_the_exhaustive_top() {
        let db = small_db(&["A", "B", "C"]);
        let params = PeakModelParams {
            mean_cell_height: 1200.0,
            ..PeakModelParams::default()
        };
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let mut agree = 0;
        for seed in 100..150 {
            let cells = sample_cells(&db, &[(&g0, 4), (&g1, 3)], &params, seed);
            let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
            let trimmed = ipa_run(&scorer, &TrimPolicy::default()).unwrap();
            let full = ipa_run(&scorer, &TrimPolicy::unbounded()).unwrap();
            if trimmed[0].clusters == full[0].clusters {
                agree += 1;
            }
        }
        assert_eq!(agree, 50, "trimmed top agreed on {agree}/50 runs");
    }

    #[test]
    fn beam_respects_window_and_cap() {
        let db = small_db(&["A"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let cells = sample_cells(&db, &[(&g, 6)], &params, 9);
        let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
        let policy = TrimPolicy {
            delta_ln: 3.0,
            max_partitions: 7,
        };
        let beam = ipa_run(&scorer, &policy).unwrap();
        assert!(beam.len() <= 7);
        let best = beam[0].log_likelihood;
        for p in &beam {
            assert!(best - p.log_likelihood <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn determinism_across_runs() {
        let db = small_db(&["A", "B"]);
        let params = PeakModelParams::default();
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let cells = sample_cells(&db, &[(&g0, 3), (&g1, 3)], &params, 4);
        let run = |cells: &[crate::peakmodel::ScEpg]| {
            let scorer = ClusterScorer::new(cells, &db, &[], &params).unwrap();
            ipa_run(&scorer, &TrimPolicy::default()).unwrap()
        };
        let a = run(&cells);
        let b = run(&cells);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clusters, y.clusters);
            assert_eq!(x.log_likelihood.to_bits(), y.log_likelihood.to_bits());
        }
    }

    #[test]
    fn hac_single_cell_is_one_singleton() {
        let db = small_db(&["A"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let cells = sample_cells(&db, &[(&g, 1)], &params, 5);
        let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
        let run = hac_run(&scorer, HacVariant::Fac2).unwrap();
        assert_eq!(run.partition.k(), 1);
        assert!(run.rounds.is_empty());
    }

    #[test]
    fn fac1_minus_fac2_is_the_stirling_ratio() {
        let db = small_db(&["A", "B"]);
        let params = PeakModelParams::default();
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let cells = sample_cells(&db, &[(&g0, 3), (&g1, 3)], &params, 6);
        let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
        let run = hac_run(&scorer, HacVariant::Fac1).unwrap();
        let n = cells.len();
        assert!(!run.rounds.is_empty());
        for round in &run.rounds {
            // independent route: exact ratio through rationals, then log
            let num = stirling2(n, round.k);
            let den = stirling2(n, round.k - 1);
            let expect = crate::combinatorics::big_ratio_to_f64(&num, &den).ln();
            for eval in &round.evals {
                let delta = eval.delta_star + round.ln_stirling_ratio;
                assert!((delta - eval.delta_star - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fac2_trajectory_is_monotone_and_locally_maximal() {
        let db = small_db(&["A", "B", "C"]);
        let params = PeakModelParams {
            mean_cell_height: 1500.0,
            ..PeakModelParams::default()
        };
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let cells = sample_cells(&db, &[(&g0, 4), (&g1, 4)], &params, 7);
        let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
        let run = hac_run(&scorer, HacVariant::Fac2).unwrap();
        for round in &run.rounds {
            if let Some((i, j)) = round.merged {
                let gain = round
                    .evals
                    .iter()
                    .find(|e| e.i == i && e.j == j)
                    .unwrap()
                    .delta_star;
                assert!(gain > 0.0);
            }
        }
        // no remaining pairwise merge improves the final partition
        let last = run.rounds.last().unwrap();
        if last.merged.is_none() {
            for eval in &last.evals {
                assert!(eval.delta_star <= 0.0);
            }
        }
    }

    #[test]
    fn fac2_top_matches_ipa_on_separated_donors() {
        let db = small_db(&["A", "B", "C", "D"]);
        let params = PeakModelParams {
            mean_cell_height: 2000.0,
            ..PeakModelParams::default()
        };
        let g0 = donor(&db, 0);
        let g1 = donor(&db, 1);
        let mut agree = 0;
        for seed in 0..20 {
            let cells = sample_cells(&db, &[(&g0, 4), (&g1, 4)], &params, seed);
            let scorer = ClusterScorer::new(&cells, &db, &[], &params).unwrap();
            let ipa = ipa_run(&scorer, &TrimPolicy::default()).unwrap();
            let fac2 = hac_run(&scorer, HacVariant::Fac2).unwrap();
            if ipa[0].clusters == fac2.partition.clusters {
                agree += 1;
            }
        }
        assert!(agree >= 19, "agreement on {agree}/20 runs");
    }

    #[test]
    fn hac_rejects_pois() {
        let db = small_db(&["A"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let cells = sample_cells(&db, &[(&g, 2)], &params, 8);
        let pois = vec![("s1".to_string(), g.clone())];
        let scorer = ClusterScorer::new(&cells, &db, &pois, &params).unwrap();
        assert!(hac_run(&scorer, HacVariant::Fac2).is_err());
    }

    #[test]
    fn ordering_by_peak_count_is_stable() {
        let db = small_db(&["A", "B"]);
        let params = PeakModelParams::default();
        let g = donor(&db, 0);
        let mut cells = sample_cells(&db, &[(&g, 4)], &params, 10);
        cells[1] = {
            let mut c = crate::peakmodel::ScEpg::new("sparse", "sim");
            c.add_peak("A", des("6"), 50.0).unwrap();
            c
        };
        let ordered = order_cells(cells.clone(), CellOrder::PeakCountDesc);
        assert_eq!(ordered.last().unwrap().cell_id, "sparse");
        let unchanged = order_cells(cells.clone(), CellOrder::Input);
        assert_eq!(
            unchanged.iter().map(|c| &c.cell_id).collect::<Vec<_>>(),
            cells.iter().map(|c| &c.cell_id).collect::<Vec<_>>()
        );
    }
}
