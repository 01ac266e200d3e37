//! Partitions and partially labelled partitions (PLPs) of a set of cells,
//! cluster-likelihood evaluation with memoization, and exhaustive
//! enumerators used as oracles in tests.

use crate::combinatorics::plp_count;
use crate::error::{Error, Result};
use crate::genetics::{ln_genotype_prob, Designation, FrequencyDb, Genotype};
use crate::peakmodel::{locus_likelihood, log_sum_exp, PeakModelParams, ScEpg};
use dashmap::DashMap;
use num_traits::ToPrimitive;
use smallvec::SmallVec;

/// Fixed-width bitset over cell indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellSet {
    blocks: SmallVec<[u64; 2]>,
}

impl CellSet {
    pub fn empty(universe: usize) -> Self {
        CellSet {
            blocks: smallvec::smallvec![0u64; universe.div_ceil(64).max(1)],
        }
    }

    pub fn singleton(universe: usize, i: usize) -> Self {
        let mut s = CellSet::empty(universe);
        s.insert(i);
        s
    }

    pub fn insert(&mut self, i: usize) {
        self.blocks[i / 64] |= 1u64 << (i % 64);
    }

    pub fn with(&self, i: usize) -> Self {
        let mut s = self.clone();
        s.insert(i);
        s
    }

    pub fn contains(&self, i: usize) -> bool {
        self.blocks
            .get(i / 64)
            .map_or(false, |b| b & (1u64 << (i % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|&b| b == 0)
    }

    pub fn min_index(&self) -> Option<usize> {
        for (bi, &b) in self.blocks.iter().enumerate() {
            if b != 0 {
                return Some(bi * 64 + b.trailing_zeros() as usize);
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().enumerate().flat_map(|(bi, &b)| {
            let mut rest = b;
            std::iter::from_fn(move || {
                if rest == 0 {
                    None
                } else {
                    let t = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    Some(bi * 64 + t)
                }
            })
        })
    }

    pub fn union_with(&mut self, other: &CellSet) {
        for (a, b) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            *a |= b;
        }
    }
}

/// Index of a POI within the run's ordered POI list.
pub type PoiIdx = u8;

/// One cluster of a PLP: its member set and an optional POI label. Also the
/// memoization key for cluster likelihoods.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cluster {
    pub members: CellSet,
    pub label: Option<PoiIdx>,
}

impl Cluster {
    pub fn unlabelled(members: CellSet) -> Self {
        Cluster {
            members,
            label: None,
        }
    }

    pub fn labelled(members: CellSet, poi: PoiIdx) -> Self {
        Cluster {
            members,
            label: Some(poi),
        }
    }
}

/// A partially labelled partition with its natural-log peak-height score.
/// The symmetry adjustment for labelled partitions is *not* included here;
/// it is applied downstream when hypotheses are aggregated.
///
/// Canonical form: clusters sorted by smallest member index.
#[derive(Clone, Debug, PartialEq)]
pub struct Plp {
    pub clusters: Vec<Cluster>,
    pub log_likelihood: f64,
}

impl Plp {
    pub fn new(mut clusters: Vec<Cluster>, log_likelihood: f64) -> Self {
        clusters.sort_by_key(|c| c.members.min_index());
        Plp {
            clusters,
            log_likelihood,
        }
    }

    /// Number of clusters `k`.
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Number of labelled clusters `j`.
    pub fn label_count(&self) -> usize {
        self.clusters.iter().filter(|c| c.label.is_some()).count()
    }

    /// The sorted set of labels in use.
    pub fn label_set(&self) -> SmallVec<[PoiIdx; 4]> {
        let mut v: SmallVec<[PoiIdx; 4]> = self
            .clusters
            .iter()
            .filter_map(|c| c.label)
            .collect();
        v.sort_unstable();
        v
    }

    /// Total number of cells covered.
    pub fn covered(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    /// Debug rendering such as `(0,2|s1)(1)`.
    pub fn render(&self, poi_names: &[String]) -> String {
        let mut out = String::new();
        for c in &self.clusters {
            out.push('(');
            let ids: Vec<String> = c.members.iter().map(|i| i.to_string()).collect();
            out.push_str(&ids.join(","));
            if let Some(p) = c.label {
                out.push('|');
                out.push_str(
                    poi_names
                        .get(p as usize)
                        .map(String::as_str)
                        .unwrap_or("?"),
                );
            }
            out.push(')');
        }
        out
    }
}

/// Precomputed per-cell likelihood tables plus a concurrent cluster-score
/// cache. All scoring during a search goes through this.
pub struct ClusterScorer<'a> {
    cells: &'a [ScEpg],
    loci: Vec<String>,
    /// per locus: the unordered allele-index pairs forming the genotype space
    genotype_pairs: Vec<Vec<(u16, u16)>>,
    /// per locus, per genotype: natural-log prior probability
    ln_priors: Vec<Vec<f64>>,
    /// `[cell][locus][genotype]` natural-log peak likelihood
    cell_ll: Vec<Vec<Vec<f64>>>,
    /// `[poi][cell]` whole-cell log-likelihood at the POI's genotype
    poi_cell_ll: Vec<Vec<f64>>,
    poi_names: Vec<String>,
    allele_tables: Vec<Vec<Designation>>,
    cache: DashMap<Cluster, f64>,
}

impl<'a> ClusterScorer<'a> {
    /// Build the tables. Every peak-model evaluation happens here, so later
    /// cluster scoring is infallible.
    pub fn new(
        cells: &'a [ScEpg],
        db: &FrequencyDb,
        pois: &[(String, Genotype)],
        params: &PeakModelParams,
    ) -> Result<Self> {
        params.validate()?;
        let loci: Vec<String> = db.locus_names().map(String::from).collect();
        for cell in cells {
            for (locus, _) in cell.loci() {
                if !db.has_locus(locus) {
                    return Err(Error::UnknownLocus(format!(
                        "{locus} (cell {} carries peaks there, frequency table does not list it)",
                        cell.cell_id
                    )));
                }
            }
        }

        let mut genotype_pairs = Vec::with_capacity(loci.len());
        let mut ln_priors = Vec::with_capacity(loci.len());
        let mut allele_tables = Vec::with_capacity(loci.len());
        for locus in &loci {
            let lf = db.locus(locus)?;
            let n = lf.len();
            let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
            let mut priors = Vec::with_capacity(n * (n + 1) / 2);
            for i in 0..n {
                for j in i..n {
                    pairs.push((i as u16, j as u16));
                    priors.push(ln_genotype_prob(
                        lf.freqs()[i],
                        lf.freqs()[j],
                        i == j,
                        db.theta,
                    ));
                }
            }
            genotype_pairs.push(pairs);
            ln_priors.push(priors);
            allele_tables.push(lf.alleles().to_vec());
        }

        let mut cell_ll = Vec::with_capacity(cells.len());
        for cell in cells {
            let mut per_locus = Vec::with_capacity(loci.len());
            for (li, locus) in loci.iter().enumerate() {
                let peaks = cell.peaks(locus);
                let alleles = &allele_tables[li];
                let mut lls = Vec::with_capacity(genotype_pairs[li].len());
                for &(i, j) in &genotype_pairs[li] {
                    let pair = (alleles[i as usize].clone(), alleles[j as usize].clone());
                    lls.push(locus_likelihood(locus, peaks, &pair, params)?);
                }
                per_locus.push(lls);
            }
            cell_ll.push(per_locus);
        }

        let mut poi_cell_ll = Vec::with_capacity(pois.len());
        let mut poi_names = Vec::with_capacity(pois.len());
        for (name, genotype) in pois {
            let mut per_cell = Vec::with_capacity(cells.len());
            for cell in cells {
                let mut total = 0.0;
                for locus in &loci {
                    let pair = genotype.pair(locus).ok_or_else(|| Error::PoiMissingLocus {
                        poi: name.clone(),
                        locus: locus.clone(),
                    })?;
                    total += locus_likelihood(locus, cell.peaks(locus), pair, params)?;
                }
                per_cell.push(total);
            }
            poi_cell_ll.push(per_cell);
            poi_names.push(name.clone());
        }

        Ok(ClusterScorer {
            cells,
            loci,
            genotype_pairs,
            ln_priors,
            cell_ll,
            poi_cell_ll,
            poi_names,
            allele_tables,
            cache: DashMap::new(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_pois(&self) -> usize {
        self.poi_names.len()
    }

    pub fn poi_names(&self) -> &[String] {
        &self.poi_names
    }

    pub fn cells(&self) -> &[ScEpg] {
        self.cells
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Memoized cluster log-likelihood.
    ///
    /// Unlabelled: per locus, log-sum-exp over the genotype space of
    /// prior + member likelihoods, summed over loci. Labelled: the members'
    /// likelihoods at the POI genotype with no prior factor.
    pub fn cluster_log_likelihood(&self, cluster: &Cluster) -> f64 {
        if let Some(hit) = self.cache.get(cluster) {
            return *hit;
        }
        let value = self.compute_cluster(cluster);
        self.cache.insert(cluster.clone(), value);
        value
    }

    /// The same value with the memo table bypassed (used to audit the cache).
    pub fn cluster_log_likelihood_uncached(&self, cluster: &Cluster) -> f64 {
        self.compute_cluster(cluster)
    }

    fn compute_cluster(&self, cluster: &Cluster) -> f64 {
        debug_assert!(!cluster.members.is_empty());
        match cluster.label {
            Some(poi) => {
                let table = &self.poi_cell_ll[poi as usize];
                cluster.members.iter().map(|i| table[i]).sum()
            }
            None => {
                let members: SmallVec<[usize; 8]> = cluster.members.iter().collect();
                let mut total = 0.0;
                let mut scratch: Vec<f64> = Vec::new();
                for li in 0..self.loci.len() {
                    scratch.clear();
                    scratch.extend_from_slice(&self.ln_priors[li]);
                    for &cell in &members {
                        let lls = &self.cell_ll[cell][li];
                        for (acc, ll) in scratch.iter_mut().zip(lls) {
                            *acc += ll;
                        }
                    }
                    total += log_sum_exp(&scratch);
                }
                total
            }
        }
    }

    /// Sum of cluster scores for an assembled partition structure.
    pub fn partition_log_likelihood(&self, clusters: &[Cluster]) -> f64 {
        clusters
            .iter()
            .map(|c| self.cluster_log_likelihood(c))
            .sum()
    }

    /// Score a structure into a canonical [`Plp`].
    pub fn score_plp(&self, clusters: Vec<Cluster>) -> Plp {
        let ll = self.partition_log_likelihood(&clusters);
        Plp::new(clusters, ll)
    }

    /// The most likely contributor genotype for a cluster: for unlabelled
    /// clusters the per-locus arg-max term of the genotype sum; for labelled
    /// clusters the POI's own profile.
    pub fn most_likely_genotypes(&self, cluster: &Cluster, poi_genotypes: &[(String, Genotype)]) -> Genotype {
        if let Some(poi) = cluster.label {
            return poi_genotypes[poi as usize].1.clone();
        }
        let members: Vec<usize> = cluster.members.iter().collect();
        let mut genotype = Genotype::new();
        for (li, locus) in self.loci.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_g = 0usize;
            for (gi, prior) in self.ln_priors[li].iter().enumerate() {
                let mut v = *prior;
                for &cell in &members {
                    v += self.cell_ll[cell][li][gi];
                }
                if v > best {
                    best = v;
                    best_g = gi;
                }
            }
            let (i, j) = self.genotype_pairs[li][best_g];
            genotype.set_pair(
                locus,
                self.allele_tables[li][i as usize].clone(),
                self.allele_tables[li][j as usize].clone(),
            );
        }
        genotype
    }
}

/// Upper bounds enforced by [`enumerate_plps`].
pub const ENUMERATION_MAX_N: usize = 12;
pub const ENUMERATION_MAX_COUNT: u64 = 10_000_000;

/// Visit every PLP of `n` cells with `m` labels exactly once, in canonical
/// form. Scores are left at zero; the caller assigns them.
pub fn for_each_plp(n: usize, m: usize, mut visit: impl FnMut(&Plp)) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot enumerate PLPs of zero cells".into()));
    }
    let count = plp_count(n, m);
    if n > ENUMERATION_MAX_N || count > ENUMERATION_MAX_COUNT.into() {
        return Err(Error::EnumerationGuard {
            n,
            m,
            count: count.to_string(),
            max_n: ENUMERATION_MAX_N,
            max_count: ENUMERATION_MAX_COUNT,
        });
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    partition_rec(0, n, m, &mut clusters, &mut visit);
    Ok(())
}

fn partition_rec(
    i: usize,
    n: usize,
    m: usize,
    clusters: &mut Vec<Vec<usize>>,
    visit: &mut impl FnMut(&Plp),
) {
    if i == n {
        let mut labels: Vec<Option<PoiIdx>> = vec![None; clusters.len()];
        label_rec(0, m, clusters, &mut labels, visit, n);
        return;
    }
    for j in 0..clusters.len() {
        clusters[j].push(i);
        partition_rec(i + 1, n, m, clusters, visit);
        clusters[j].pop();
    }
    clusters.push(vec![i]);
    partition_rec(i + 1, n, m, clusters, visit);
    clusters.pop();
}

fn label_rec(
    poi: usize,
    m: usize,
    clusters: &[Vec<usize>],
    labels: &mut Vec<Option<PoiIdx>>,
    visit: &mut impl FnMut(&Plp),
    n: usize,
) {
    if poi == m {
        let built: Vec<Cluster> = clusters
            .iter()
            .zip(labels.iter())
            .map(|(members, label)| {
                let mut set = CellSet::empty(n);
                for &i in members {
                    set.insert(i);
                }
                Cluster {
                    members: set,
                    label: *label,
                }
            })
            .collect();
        visit(&Plp::new(built, 0.0));
        return;
    }
    // this POI labels nothing
    label_rec(poi + 1, m, clusters, labels, visit, n);
    // or one of the unlabelled clusters
    for j in 0..clusters.len() {
        if labels[j].is_none() {
            labels[j] = Some(poi as PoiIdx);
            label_rec(poi + 1, m, clusters, labels, visit, n);
            labels[j] = None;
        }
    }
}

/// Collect the full PLP set (guarded; intended for oracle-scale inputs).
pub fn enumerate_plps(n: usize, m: usize) -> Result<Vec<Plp>> {
    let count = plp_count(n, m)
        .to_usize()
        .ok_or_else(|| Error::InvalidInput("PLP count overflows usize".into()))?;
    let mut out = Vec::with_capacity(count.min(ENUMERATION_MAX_COUNT as usize));
    for_each_plp(n, m, |plp| out.push(plp.clone()))?;
    Ok(out)
}
