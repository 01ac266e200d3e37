//! Alleles, genotypes, population allele frequencies and genotype
//! probabilities with population-substructure (theta) correction.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Loci excluded from likelihood evaluation because of Y-chromosome linkage.
pub const Y_LINKED_LOCI: [&str; 2] = ["Yindel", "DYS391"];

/// True when `locus` is one of the Y-linked loci dropped on ingest.
pub fn is_y_linked(locus: &str) -> bool {
    Y_LINKED_LOCI.iter().any(|y| y.eq_ignore_ascii_case(locus))
}

/// Default floor frequency for alleles seen in evidence but absent from the
/// frequency table: 5/(2N) with a nominal database size of N = 200.
pub const DEFAULT_RARE_ALLELE_FLOOR: f64 = 5.0 / 400.0;

/// Default tolerance for per-locus frequency sums before rescaling.
pub const DEFAULT_FREQUENCY_SUM_TOLERANCE: f64 = 0.015;

/// An allele designation within a locus: a repeat count such as `12`, a
/// fractional repeat such as `9.3`, or an arbitrary label for non-numeric
/// designations.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Designation {
    /// `repeats` full repeat units plus `partial` extra bases (0 for none).
    Numeric { repeats: u16, partial: u8 },
    /// Anything that does not parse as a repeat count (e.g. `X`, `Y`).
    Label(String),
}

impl Designation {
    pub fn numeric(repeats: u16, partial: u8) -> Self {
        Designation::Numeric { repeats, partial }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Designation::Numeric { .. })
    }

    /// Position shifted by `delta` whole repeats (stutter arithmetic).
    /// `None` for non-numeric designations or when the shift leaves the
    /// representable range.
    pub fn shifted(&self, delta: i32) -> Option<Designation> {
        match self {
            Designation::Numeric { repeats, partial } => {
                let shifted = *repeats as i32 + delta;
                if shifted < 1 {
                    None
                } else {
                    Some(Designation::Numeric {
                        repeats: shifted as u16,
                        partial: *partial,
                    })
                }
            }
            Designation::Label(_) => None,
        }
    }
}

impl FromStr for Designation {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let parsed = match s.split_once('.') {
            Some((whole, frac)) => match (whole.parse::<u16>(), frac.parse::<u8>()) {
                (Ok(r), Ok(p)) => Some(Designation::Numeric {
                    repeats: r,
                    partial: p,
                }),
                _ => None,
            },
            None => s
                .parse::<u16>()
                .ok()
                .map(|r| Designation::Numeric { repeats: r, partial: 0 }),
        };
        Ok(parsed.unwrap_or_else(|| Designation::Label(s.to_string())))
    }
}

impl fmt::Display for Designation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Designation::Numeric { repeats, partial: 0 } => write!(f, "{repeats}"),
            Designation::Numeric { repeats, partial } => write!(f, "{repeats}.{partial}"),
            Designation::Label(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for Designation {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Designation {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Ok(s.parse().unwrap())
    }
}

/// Allele frequencies for one locus, alleles kept sorted by designation.
#[derive(Clone, Debug)]
pub struct LocusFrequencies {
    alleles: Vec<Designation>,
    freqs: Vec<f64>,
}

impl LocusFrequencies {
    pub fn alleles(&self) -> &[Designation] {
        &self.alleles
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.alleles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alleles.is_empty()
    }

    pub fn index_of(&self, d: &Designation) -> Option<usize> {
        self.alleles.binary_search(d).ok()
    }

    pub fn freq_of(&self, d: &Designation) -> Option<f64> {
        self.index_of(d).map(|i| self.freqs[i])
    }

    fn rescale(&mut self) {
        let sum: f64 = self.freqs.iter().sum();
        for f in &mut self.freqs {
            *f /= sum;
        }
    }
}

/// Population allele-frequency database plus the substructure parameter.
#[derive(Clone, Debug)]
pub struct FrequencyDb {
    pub theta: f64,
    pub source: String,
    loci: BTreeMap<String, LocusFrequencies>,
}

impl FrequencyDb {
    pub fn new(theta: f64, source: impl Into<String>) -> Self {
        FrequencyDb {
            theta,
            source: source.into(),
            loci: BTreeMap::new(),
        }
    }

    /// Locus names in deterministic (sorted) order.
    pub fn locus_names(&self) -> impl Iterator<Item = &str> {
        self.loci.keys().map(|s| s.as_str())
    }

    pub fn n_loci(&self) -> usize {
        self.loci.len()
    }

    pub fn locus(&self, name: &str) -> Result<&LocusFrequencies> {
        self.loci
            .get(name)
            .ok_or_else(|| Error::UnknownLocus(name.to_string()))
    }

    pub fn has_locus(&self, name: &str) -> bool {
        self.loci.contains_key(name)
    }

    /// Insert one allele row; duplicate designations within a locus are
    /// rejected. Used by loaders and by synthetic table builders.
    pub fn insert_allele(&mut self, locus: &str, d: Designation, freq: f64) -> Result<()> {
        if !(freq > 0.0 && freq <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "frequency {freq} for allele {d} at locus {locus} is outside (0,1]"
            )));
        }
        let entry = self.loci.entry(locus.to_string()).or_insert(LocusFrequencies {
            alleles: Vec::new(),
            freqs: Vec::new(),
        });
        match entry.alleles.binary_search(&d) {
            Ok(_) => Err(Error::DuplicateAllele {
                locus: locus.to_string(),
                allele: d.to_string(),
            }),
            Err(pos) => {
                entry.alleles.insert(pos, d);
                entry.freqs.insert(pos, freq);
                Ok(())
            }
        }
    }

    /// Check per-locus sums against `tolerance` and rescale each locus so its
    /// frequencies sum to exactly one.
    pub fn normalize(&mut self, tolerance: f64) -> Result<()> {
        for (name, locus) in &mut self.loci {
            let sum: f64 = locus.freqs.iter().sum();
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::FrequencySum {
                    locus: name.clone(),
                    sum,
                    tolerance,
                });
            }
            locus.rescale();
        }
        Ok(())
    }

    /// Load a frequency table from CSV with header `locus,allele,frequency`.
    /// Y-linked loci are dropped; per-locus sums are validated and rescaled.
    pub fn from_csv_path(path: &Path, theta: f64, tolerance: f64) -> Result<FrequencyDb> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            })?;
        let mut db = FrequencyDb::new(theta, path.display().to_string());
        for row in rdr.deserialize::<FreqRow>() {
            let row = row.map_err(|e| csv_error(path, &e))?;
            if is_y_linked(&row.locus) {
                continue;
            }
            let d: Designation = row.allele.parse().unwrap();
            db.insert_allele(&row.locus, d, row.frequency)?;
        }
        if db.loci.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frequency table {} contains no usable loci",
                path.display()
            )));
        }
        db.normalize(tolerance)?;
        Ok(db)
    }

    /// Add floor-frequency entries for observed alleles missing from the
    /// table and renormalize the affected loci. Returns how many alleles were
    /// added.
    pub fn augment_with_observed<'a>(
        &mut self,
        observed: impl IntoIterator<Item = (&'a str, &'a Designation)>,
        floor: f64,
    ) -> Result<usize> {
        let mut added = 0usize;
        let mut touched: Vec<String> = Vec::new();
        for (locus, d) in observed {
            if !self.has_locus(locus) {
                return Err(Error::UnknownLocus(locus.to_string()));
            }
            if self.loci[locus].index_of(d).is_none() {
                self.insert_allele(locus, d.clone(), floor)?;
                touched.push(locus.to_string());
                added += 1;
            }
        }
        for locus in touched {
            self.loci.get_mut(&locus).unwrap().rescale();
        }
        Ok(added)
    }
}

#[derive(Deserialize)]
struct FreqRow {
    locus: String,
    allele: String,
    frequency: f64,
}

fn csv_error(path: &Path, e: &csv::Error) -> Error {
    let line = e
        .position()
        .map(|p| p.line())
        .unwrap_or(0);
    Error::Csv {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// A full genotype: one unordered allele pair per locus, stored with the
/// smaller designation first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Genotype {
    pairs: BTreeMap<String, (Designation, Designation)>,
}

impl Genotype {
    pub fn new() -> Self {
        Genotype::default()
    }

    pub fn set_pair(&mut self, locus: &str, a: Designation, b: Designation) {
        let pair = if b < a { (b, a) } else { (a, b) };
        self.pairs.insert(locus.to_string(), pair);
    }

    pub fn pair(&self, locus: &str) -> Option<&(Designation, Designation)> {
        self.pairs.get(locus)
    }

    pub fn loci(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(|s| s.as_str())
    }

    pub fn n_loci(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_homozygous(&self, locus: &str) -> Option<bool> {
        self.pairs.get(locus).map(|(a, b)| a == b)
    }
}

/// Log (natural) probability of a single-person genotype pair at one locus,
/// with per-person theta correction applied:
/// homozygote `p (theta + p (1-theta))`, heterozygote `2 p q (1-theta)`.
/// Reduces to the product rule at theta = 0.
pub fn genotype_prob(db: &FrequencyDb, locus: &str, pair: &(Designation, Designation)) -> Result<f64> {
    let lf = db.locus(locus)?;
    let (a, b) = pair;
    let pa = lf.freq_of(a).ok_or_else(|| Error::UnknownAllele {
        locus: locus.to_string(),
        allele: a.to_string(),
    })?;
    let pb = lf.freq_of(b).ok_or_else(|| Error::UnknownAllele {
        locus: locus.to_string(),
        allele: b.to_string(),
    })?;
    Ok(ln_genotype_prob(pa, pb, a == b, db.theta))
}

/// Same correction, expressed on raw frequencies; the hot path precomputes
/// with this.
pub fn ln_genotype_prob(pa: f64, pb: f64, homozygous: bool, theta: f64) -> f64 {
    if homozygous {
        (pa * (theta + pa * (1.0 - theta))).ln()
    } else {
        (2.0 * pa * pb * (1.0 - theta)).ln()
    }
}

/// Exact four-allele sampling probability of two homozygous `(a,a)` profiles
/// in two distinct untyped persons. Used only to validate the per-cluster
/// approximation; `theta = 0` reduces it to `p^4`.
pub fn joint_prob_exact_two_homozygotes(p: f64, theta: f64) -> f64 {
    p * (theta + p * (1.0 - theta)) * (2.0 * theta + p * (1.0 - theta))
        * (3.0 * theta + p * (1.0 - theta))
        / ((1.0 + theta) * (1.0 + 2.0 * theta))
}

/// Ratio of the exact joint probability to the per-person product for two
/// heterozygous profiles sharing no alleles: `(1-theta)/((1+theta)(1+2theta))`,
/// independent of the allele frequencies.
pub fn joint_ratio_disjoint_hets(theta: f64) -> f64 {
    (1.0 - theta) / ((1.0 + theta) * (1.0 + 2.0 * theta))
}

/// log10 match probability of a profile: the sum over the database's loci of
/// the log10 genotype probabilities. An empty database gives 0.
pub fn match_probability(profile: &Genotype, db: &FrequencyDb) -> Result<f64> {
    let mut total_ln = 0.0;
    for locus in db.locus_names() {
        let pair = profile.pair(locus).ok_or_else(|| {
            Error::InvalidInput(format!("profile is missing locus {locus}"))
        })?;
        total_ln += genotype_prob(db, locus, pair)?;
    }
    Ok(total_ln / std::f64::consts::LN_10)
}

/// Load POI reference genotypes from CSV with header
/// `poi_id,locus,allele1,allele2`.
pub fn load_poi_genotypes(path: &Path) -> Result<BTreeMap<String, Genotype>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    let mut out: BTreeMap<String, Genotype> = BTreeMap::new();
    for row in rdr.deserialize::<PoiRow>() {
        let row = row.map_err(|e| csv_error(path, &e))?;
        let g = out.entry(row.poi_id.clone()).or_default();
        if g.pair(&row.locus).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate locus {} for POI {}",
                row.locus, row.poi_id
            )));
        }
        g.set_pair(&row.locus, row.allele1.parse().unwrap(), row.allele2.parse().unwrap());
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "POI table {} is empty",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PoiRow {
    poi_id: String,
    locus: String,
    allele1: String,
    allele2: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn des(s: &str) -> Designation {
        s.parse().unwrap()
    }

    fn two_allele_db(pa: f64, pb: f64, theta: f64) -> FrequencyDb {
        let mut db = FrequencyDb::new(theta, "test");
        db.insert_allele("L1", des("10"), pa).unwrap();
        db.insert_allele("L1", des("11"), pb).unwrap();
        db
    }

    #[test]
    fn designation_parsing_and_order() {
        assert_eq!(des("9.3"), Designation::numeric(9, 3));
        assert_eq!(des("12"), Designation::numeric(12, 0));
        assert!(des("9.3") < des("10"));
        assert!(des("9") < des("9.3"));
        assert_eq!(des("X"), Designation::Label("X".into()));
        assert_eq!(des("9.3").to_string(), "9.3");
        assert_eq!(des("12").to_string(), "12");
    }

    #[test]
    fn designation_stutter_shift() {
        assert_eq!(des("9.3").shifted(-1), Some(des("8.3")));
        assert_eq!(des("9.3").shifted(1), Some(des("10.3")));
        assert_eq!(des("1").shifted(-1), None);
        assert_eq!(des("X").shifted(-1), None);
    }

    #[test]
    fn genotype_prob_hardy_weinberg() {
        let db = two_allele_db(0.2, 0.8, 0.0);
        let hom = genotype_prob(&db, "L1", &(des("10"), des("10"))).unwrap();
        assert!((hom - 0.04f64.ln()).abs() < 1e-12);

        let db = two_allele_db(0.1, 0.1, 0.0);
        let het = genotype_prob(&db, "L1", &(des("10"), des("11"))).unwrap();
        assert!((het - 0.02f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn genotype_prob_theta_corrected_homozygote() {
        let db = two_allele_db(0.2, 0.8, 0.02);
        let hom = genotype_prob(&db, "L1", &(des("10"), des("10"))).unwrap();
        let expect = (0.2f64 * (0.02 + 0.2 * 0.98)).ln();
        assert!((hom - expect).abs() < 1e-12);
        assert!((hom - 0.0432f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn genotype_prob_unknown_allele_is_named() {
        let db = two_allele_db(0.5, 0.5, 0.0);
        let err = genotype_prob(&db, "L1", &(des("10"), des("13.2"))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("13.2") && msg.contains("L1"), "{msg}");
    }

    #[test]
    fn genotype_probs_sum_to_one_with_theta() {
        let mut db = FrequencyDb::new(0.03, "test");
        for (i, f) in [0.4, 0.3, 0.2, 0.1].iter().enumerate() {
            db.insert_allele("L1", Designation::numeric(8 + i as u16, 0), *f)
                .unwrap();
        }
        let lf = db.locus("L1").unwrap();
        let mut total = 0.0;
        for i in 0..lf.len() {
            for j in i..lf.len() {
                total += ln_genotype_prob(lf.freqs()[i], lf.freqs()[j], i == j, db.theta).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "total={total}");
    }

    #[test]
    fn exact_two_homozygotes_reduces_to_p4() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!((joint_prob_exact_two_homozygotes(p, 0.0) - p.powi(4)).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_vs_squared_approximation_differences() {
        // difference at p = 0.8, theta = 0.02 is around 0.008
        let approx = 0.8 * (0.02 + 0.8 * 0.98);
        let diff = joint_prob_exact_two_homozygotes(0.8, 0.02) - approx * approx;
        assert!((diff - 0.008).abs() < 0.002, "diff={diff}");

        // and around 0.00059 at p = 0.2
        let approx = 0.2 * (0.02 + 0.2 * 0.98);
        let diff = joint_prob_exact_two_homozygotes(0.2, 0.02) - approx * approx;
        assert!((diff - 0.00059).abs() < 0.0001, "diff={diff}");
    }

    #[test]
    fn exact_equals_squared_at_theta_zero() {
        for i in 1..=99 {
            let p = i as f64 / 100.0;
            let single: f64 = p * p;
            let joint = joint_prob_exact_two_homozygotes(p, 0.0);
            assert!((joint - single * single).abs() < 1e-12 * joint.max(1e-300));
        }
    }

    #[test]
    fn disjoint_het_ratio_values() {
        assert!((joint_ratio_disjoint_hets(0.0) - 1.0).abs() < 1e-15);
        assert!((joint_ratio_disjoint_hets(0.02) - 0.92383).abs() < 1e-4);
        assert!((joint_ratio_disjoint_hets(0.1) - 0.9 / (1.1 * 1.2)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_het_ratio_monotone_decreasing() {
        let mut last = f64::INFINITY;
        for i in 0..=50 {
            let theta = i as f64 / 100.0;
            let r = joint_ratio_disjoint_hets(theta);
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn match_probability_single_locus() {
        let db = two_allele_db(0.1, 0.1, 0.0);
        let mut g = Genotype::new();
        g.set_pair("L1", des("10"), des("11"));
        let mp = match_probability(&g, &db).unwrap();
        assert!((mp - 0.02f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn match_probability_empty_db_is_zero() {
        let db = FrequencyDb::new(0.0, "empty");
        let g = Genotype::new();
        assert_eq!(match_probability(&g, &db).unwrap(), 0.0);
    }

    #[test]
    fn frequency_sum_tolerance_enforced() {
        let mut db = FrequencyDb::new(0.0, "test");
        db.insert_allele("L1", des("10"), 0.5).unwrap();
        db.insert_allele("L1", des("11"), 0.45).unwrap();
        // sums to 0.95: outside the 0.015 default tolerance
        assert!(db.normalize(DEFAULT_FREQUENCY_SUM_TOLERANCE).is_err());

        let mut db = FrequencyDb::new(0.0, "test");
        db.insert_allele("L1", des("10"), 0.5).unwrap();
        db.insert_allele("L1", des("11"), 0.49).unwrap();
        db.normalize(DEFAULT_FREQUENCY_SUM_TOLERANCE).unwrap();
        let sum: f64 = db.locus("L1").unwrap().freqs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augment_adds_floor_and_renormalizes() {
        let mut db = two_allele_db(0.6, 0.4, 0.0);
        let observed = des("12");
        let added = db
            .augment_with_observed([("L1", &observed)], DEFAULT_RARE_ALLELE_FLOOR)
            .unwrap();
        assert_eq!(added, 1);
        let lf = db.locus("L1").unwrap();
        assert_eq!(lf.len(), 3);
        let sum: f64 = lf.freqs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(lf.freq_of(&observed).unwrap() > 0.0);
    }

    #[test]
    fn duplicate_allele_rejected() {
        let mut db = FrequencyDb::new(0.0, "test");
        db.insert_allele("L1", des("10"), 0.5).unwrap();
        assert!(matches!(
            db.insert_allele("L1", des("10"), 0.5),
            Err(Error::DuplicateAllele { .. })
        ));
    }
}
