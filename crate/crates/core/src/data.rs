//! Synthetic patient records, frequent/rare labelling, splits and the three
//! silo partitioners.
//!
//! Class `c` is a Gaussian cluster: `mean_c + spread * noise`. Only the
//! leading `input_dim - nuisance_dims` coordinates carry class signal; the
//! trailing nuisance coordinates are pure noise that a trained encoder
//! learns to discount.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_rng, SeededRng};

/// Syndromes with at least this many images count as frequent.
pub const FREQUENT_THRESHOLD: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("cannot partition: {0}")]
    Partition(String),
    #[error("record {0}: {1}")]
    Record(u64, String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Gallery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyClass {
    Frequent,
    Rare,
}

/// Rare iff fewer than seven images.
pub fn classify_frequency(count: usize) -> FrequencyClass {
    if count < FREQUENT_THRESHOLD {
        FrequencyClass::Rare
    } else {
        FrequencyClass::Frequent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u64,
    pub features: Vec<f64>,
    pub syndrome: usize,
    pub split: Option<Split>,
    pub silo: Option<usize>,
}

/// Explicit per-class image counts, overriding the power-law draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub frequent: Vec<usize>,
    pub rare: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_frequent_classes: usize,
    pub num_rare_classes: usize,
    pub counts: Option<ClassCounts>,
    /// Pareto tail index for frequent-class counts (smaller = heavier tail).
    pub tail_exponent: f64,
    pub frequent_max: usize,
    pub rare_min: usize,
    pub input_dim: usize,
    pub nuisance_dims: usize,
    pub class_separation: f64,
    pub cluster_spread: f64,
    pub nuisance_spread: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_frequent_classes: 60,
            num_rare_classes: 30,
            counts: None,
            tail_exponent: 1.5,
            frequent_max: 40,
            rare_min: 2,
            input_dim: 48,
            nuisance_dims: 16,
            class_separation: 5.0,
            cluster_spread: 5.0,
            nuisance_spread: 5.0,
            seed: 2024,
        }
    }
}

impl DatasetConfig {
    /// Per-class counts, frequent classes first.
    pub fn class_counts(&self) -> Result<Vec<usize>, DataError> {
        if let Some(c) = &self.counts {
            if let Some(bad) = c.frequent.iter().find(|&&n| n < FREQUENT_THRESHOLD) {
                return Err(DataError::Config(format!("frequent class with {bad} images")));
            }
            if let Some(bad) = c.rare.iter().find(|&&n| n == 0 || n >= FREQUENT_THRESHOLD) {
                return Err(DataError::Config(format!("rare class with {bad} images")));
            }
            return Ok(c.frequent.iter().chain(&c.rare).copied().collect());
        }
        if self.frequent_max < FREQUENT_THRESHOLD {
            return Err(DataError::Config("frequent_max below the frequent threshold".into()));
        }
        if self.rare_min == 0 || self.rare_min >= FREQUENT_THRESHOLD {
            return Err(DataError::Config("rare_min must be in 1..7".into()));
        }
        if !(self.tail_exponent > 0.0) {
            return Err(DataError::Config("tail_exponent must be positive".into()));
        }
        let mut rng = derive_rng(self.seed, "data/counts");
        let mut counts = Vec::with_capacity(self.num_frequent_classes + self.num_rare_classes);
        for _ in 0..self.num_frequent_classes {
            // Pareto(x_min = 7, a): x = x_min * u^(-1/a)
            let u = 1.0 - rng.next_f64();
            let x = FREQUENT_THRESHOLD as f64 * u.powf(-1.0 / self.tail_exponent);
            counts.push((x.floor() as usize).min(self.frequent_max));
        }
        for _ in 0..self.num_rare_classes {
            let span = FREQUENT_THRESHOLD - self.rare_min;
            counts.push(self.rare_min + (rng.next_f64() * span as f64) as usize);
        }
        Ok(counts)
    }

    fn validate_geometry(&self) -> Result<(), DataError> {
        if self.input_dim == 0 || self.nuisance_dims >= self.input_dim {
            return Err(DataError::Config("need at least one signal dimension".into()));
        }
        if self.cluster_spread < 0.0 || self.nuisance_spread < 0.0 || self.class_separation < 0.0 {
            return Err(DataError::Config("spreads must be non-negative".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic synthetic dataset; records are ordered by class, ids from 0.
pub fn generate_synthetic(cfg: &DatasetConfig) -> Result<Vec<PatientRecord>, DataError> {
    cfg.validate_geometry()?;
    let counts = cfg.class_counts()?;
    let signal = cfg.input_dim - cfg.nuisance_dims;
    let mut records = Vec::with_capacity(counts.iter().sum());
    let mut id = 0;
    for (class, &count) in counts.iter().enumerate() {
        let mut mean_rng = derive_rng(cfg.seed, format!("data/class={class}/mean"));
        let mean: Vec<f64> = (0..signal)
            .map(|_| cfg.class_separation * normal(&mut mean_rng))
            .collect();
        let mut rng = derive_rng(cfg.seed, format!("data/class={class}/samples"));
        for _ in 0..count {
            let mut features = Vec::with_capacity(cfg.input_dim);
            for m in &mean {
                features.push(m + cfg.cluster_spread * normal(&mut rng));
            }
            for _ in 0..cfg.nuisance_dims {
                features.push(cfg.nuisance_spread * normal(&mut rng));
            }
            records.push(PatientRecord {
                id,
                features,
                syndrome: class,
                split: None,
                silo: None,
            });
            id += 1;
        }
    }
    Ok(records)
}

/// Images per syndrome.
pub fn class_sizes(records: &[PatientRecord]) -> BTreeMap<usize, usize> {
    let mut sizes = BTreeMap::new();
    for r in records {
        *sizes.entry(r.syndrome).or_insert(0) += 1;
    }
    sizes
}

/// Frequent-class fractions; the gallery receives the remainder
/// `1 - train - val - test`. Rare classes split their images between test
/// and gallery in the ratio `test : gallery`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.1,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn gallery(&self) -> f64 {
        (1.0 - self.train - self.val - self.test).max(0.0)
    }

    fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Ratios("each ratio must lie in [0, 1]".into()));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(DataError::Ratios("ratios sum above 1".into()));
        }
        Ok(())
    }
}

/// `(train, val, test, gallery)` counts for one class.
fn allocate(count: usize, freq: FrequencyClass, r: &SplitRatios) -> [usize; 4] {
    // Fallback when the ratios cannot be honoured: one test image, rest gallery.
    let fallback = [0, 0, 1.min(count), count.saturating_sub(1)];
    match freq {
        FrequencyClass::Frequent => {
            let c = count as f64;
            let val = (c * r.val).round() as usize;
            let test = (c * r.test).round() as usize;
            let gallery = (c * r.gallery()).round() as usize;
            let Some(train) = count.checked_sub(val + test + gallery) else {
                return fallback;
            };
            let starved = [(r.train, train), (r.val, val), (r.test, test), (r.gallery(), gallery)]
                .iter()
                .any(|&(ratio, n)| ratio > 1e-12 && n == 0);
            if starved {
                fallback
            } else {
                [train, val, test, gallery]
            }
        }
        FrequencyClass::Rare => {
            let denom = r.test + r.gallery();
            if denom <= 1e-12 || count < 2 {
                return fallback;
            }
            let test = ((count as f64 * r.test / denom).round() as usize).clamp(1, count - 1);
            [0, 0, test, count - test]
        }
    }
}

/// Stratified split tags. Rare syndromes never receive train or val tags.
pub fn split_dataset(
    records: &[PatientRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<PatientRecord>, DataError> {
    ratios.validate()?;
    let sizes = class_sizes(records);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.syndrome).or_default().push(i);
    }
    let mut out = records.to_vec();
    for (class, mut idx) in by_class {
        let mut rng = derive_rng(seed, format!("split/class={class}"));
        idx.shuffle(&mut rng);
        let [train, val, test, _] = allocate(sizes[&class], classify_frequency(sizes[&class]), &ratios);
        for (pos, &i) in idx.iter().enumerate() {
            out[i].split = Some(if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Val
            } else if pos < train + val + test {
                Split::Test
            } else {
                Split::Gallery
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    NearUniform,
    NonOverlapping,
    Dirichlet { alpha: f64 },
}

/// Silo (1-based) to record ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: BTreeMap<usize, Vec<u64>>,
    pub scheme: PartitionScheme,
}

impl Partition {
    pub fn silos(&self) -> usize {
        self.assignment.len()
    }

    pub fn silo_of(&self) -> BTreeMap<u64, usize> {
        self.assignment
            .iter()
            .flat_map(|(&s, ids)| ids.iter().map(move |&id| (id, s)))
            .collect()
    }

    /// The `{"1": [ids], "2": [ids], ...}` file body.
    pub fn to_json_map(&self) -> String {
        serde_json::to_string(&self.assignment).expect("map of integers serializes")
    }
}

fn group_by_class(records: &[&PatientRecord]) -> BTreeMap<usize, Vec<u64>> {
    let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.syndrome).or_default().push(r.id);
    }
    groups
}

fn check_silos(records: &[&PatientRecord], n: usize) -> Result<(), DataError> {
    if n == 0 {
        return Err(DataError::Partition("need at least one silo".into()));
    }
    if records.len() < n {
        return Err(DataError::Partition(format!(
            "{} records cannot fill {n} silos",
            records.len()
        )));
    }
    Ok(())
}

fn empty_assignment(n: usize) -> BTreeMap<usize, Vec<u64>> {
    (1..=n).map(|s| (s, Vec::new())).collect()
}

/// Per class, deal shuffled records round-robin; the dealer position carries
/// over between classes so silo totals stay balanced too.
pub fn partition_near_uniform(
    records: &[&PatientRecord],
    n: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    check_silos(records, n)?;
    let mut assignment = empty_assignment(n);
    let mut dealer = 0;
    for (class, mut ids) in group_by_class(records) {
        ids.shuffle(&mut derive_rng(seed, format!("partition/uniform/class={class}")));
        for id in ids {
            assignment.get_mut(&(dealer % n + 1)).unwrap().push(id);
            dealer += 1;
        }
    }
    Ok(Partition {
        assignment,
        scheme: PartitionScheme::NearUniform,
    })
}

/// Whole classes go to one silo each, largest classes first, always to the
/// currently lightest silo.
pub fn partition_non_overlapping(records: &[&PatientRecord], n: usize) -> Result<Partition, DataError> {
    check_silos(records, n)?;
    let mut classes: Vec<(usize, Vec<u64>)> = group_by_class(records).into_iter().collect();
    if classes.len() < n {
        return Err(DataError::Partition(format!(
            "{} classes cannot be spread over {n} silos without overlap",
            classes.len()
        )));
    }
    classes.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let mut assignment = empty_assignment(n);
    for (_, ids) in classes {
        let lightest = *assignment
            .iter()
            .min_by_key(|(&s, v)| (v.len(), s))
            .map(|(s, _)| s)
            .unwrap();
        assignment.get_mut(&lightest).unwrap().extend(ids);
    }
    Ok(Partition {
        assignment,
        scheme: PartitionScheme::NonOverlapping,
    })
}

/// Per class, proportions `p ~ Dir(alpha * 1_N)` cut the shuffled records at
/// the cumulative boundaries `floor(n_c * (p_1 + .. + p_s))`. Silos left
/// empty each take one record from the currently largest silo.
pub fn partition_dirichlet(
    records: &[&PatientRecord],
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    check_silos(records, n)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DataError::Partition(format!("alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::Partition(e.to_string()))?;
    let mut assignment = empty_assignment(n);
    for (class, mut ids) in group_by_class(records) {
        let mut rng = derive_rng(seed, format!("partition/dirichlet/class={class}"));
        ids.shuffle(&mut rng);
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let mut cum = 0.0;
        let mut start = 0;
        for (s, g) in draws.iter().enumerate() {
            cum += g / total;
            let end = if s + 1 == n {
                ids.len()
            } else {
                ((ids.len() as f64 * cum).floor() as usize).clamp(start, ids.len())
            };
            assignment.get_mut(&(s + 1)).unwrap().extend_from_slice(&ids[start..end]);
            start = end;
        }
    }
    repair_empty(&mut assignment);
    Ok(Partition {
        assignment,
        scheme: PartitionScheme::Dirichlet { alpha },
    })
}

fn repair_empty(assignment: &mut BTreeMap<usize, Vec<u64>>) {
    while let Some(empty) = assignment.iter().find(|(_, v)| v.is_empty()).map(|(&s, _)| s) {
        let largest = *assignment
            .iter()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
            .map(|(s, _)| s)
            .unwrap();
        let moved = assignment.get_mut(&largest).unwrap().pop().unwrap();
        assignment.get_mut(&empty).unwrap().push(moved);
    }
}

pub fn partition(
    records: &[&PatientRecord],
    n: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Partition, DataError> {
    match scheme {
        PartitionScheme::NearUniform => partition_near_uniform(records, n, seed),
        PartitionScheme::NonOverlapping => partition_non_overlapping(records, n),
        PartitionScheme::Dirichlet { alpha } => partition_dirichlet(records, n, alpha, seed),
    }
}

/// Population SD across silos of each class's share of its own images,
/// keyed by class.
pub fn class_distribution_sd(p: &Partition, records: &[PatientRecord]) -> BTreeMap<usize, f64> {
    let class_of: BTreeMap<u64, usize> = records.iter().map(|r| (r.id, r.syndrome)).collect();
    let n = p.silos();
    let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, ids) in p.assignment.values().enumerate() {
        for id in ids {
            if let Some(&c) = class_of.get(id) {
                counts.entry(c).or_insert_with(|| vec![0; n])[pos] += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(c, per_silo)| {
            let total: usize = per_silo.iter().sum();
            let props: Vec<f64> = per_silo.iter().map(|&k| k as f64 / total as f64).collect();
            let mean = props.iter().sum::<f64>() / n as f64;
            let var = props.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n as f64;
            (c, var.sqrt())
        })
        .collect()
}

/// Sets `silo` on train records from `partition` and deals all other
/// records (val, test, gallery) round-robin per class over `n` silos.
pub fn assign_silos(
    records: &[PatientRecord],
    partition: &Partition,
    seed: u64,
) -> Vec<PatientRecord> {
    let n = partition.silos();
    let train_silo = partition.silo_of();
    let mut out = records.to_vec();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in out.iter_mut().enumerate() {
        if r.split == Some(Split::Train) {
            r.silo = train_silo.get(&r.id).copied();
        } else {
            by_class.entry(r.syndrome).or_default().push(i);
        }
    }
    let mut dealer = 0;
    for (class, mut idx) in by_class {
        idx.shuffle(&mut derive_rng(seed, format!("holders/class={class}")));
        for i in idx {
            out[i].silo = Some(dealer % n + 1);
            dealer += 1;
        }
    }
    out
}

pub fn write_jsonl<W: Write>(records: &[PatientRecord], mut w: W) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PatientRecord>, DataError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explicit(frequent: Vec<usize>, rare: Vec<usize>) -> DatasetConfig {
        DatasetConfig {
            counts: Some(ClassCounts { frequent, rare }),
            input_dim: 6,
            nuisance_dims: 2,
            ..DatasetConfig::default()
        }
    }

    fn ids(p: &Partition) -> Vec<u64> {
        let mut all: Vec<u64> = p.assignment.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    #[test]
    fn frequency_threshold_is_seven() {
        assert_eq!(classify_frequency(6), FrequencyClass::Rare);
        assert_eq!(classify_frequency(7), FrequencyClass::Frequent);
        assert_eq!(classify_frequency(1), FrequencyClass::Rare);
    }

    #[test]
    fn zero_spread_gives_identical_vectors() {
        let cfg = DatasetConfig {
            cluster_spread: 0.0,
            nuisance_spread: 0.0,
            ..explicit(vec![], vec![3])
        };
        let recs = generate_synthetic(&cfg).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.features == recs[0].features));
    }

    #[test]
    fn totals_and_frequency_labels() {
        let cfg = explicit(vec![7, 12], vec![6, 2]);
        let recs = generate_synthetic(&cfg).unwrap();
        assert_eq!(recs.len(), 27);
        let sizes = class_sizes(&recs);
        assert_eq!(classify_frequency(sizes[&0]), FrequencyClass::Frequent);
        assert_eq!(classify_frequency(sizes[&2]), FrequencyClass::Rare);
        assert!(generate_synthetic(&explicit(vec![6], vec![])).is_err());
        assert!(generate_synthetic(&explicit(vec![], vec![7])).is_err());
    }

    #[test]
    fn default_counts_respect_frequency_bands() {
        let cfg = DatasetConfig::default();
        let counts = cfg.class_counts().unwrap();
        assert_eq!(counts.len(), 90);
        assert!(counts[..60].iter().all(|&c| (7..=40).contains(&c)));
        assert!(counts[60..].iter().all(|&c| (2..7).contains(&c)));
    }

    #[test]
    fn rare_classes_never_train() {
        let recs = generate_synthetic(&explicit(vec![20], vec![6])).unwrap();
        let split = split_dataset(&recs, SplitRatios::default(), 1).unwrap();
        let rare: Vec<_> = split.iter().filter(|r| r.syndrome == 1).collect();
        assert!(rare
            .iter()
            .all(|r| matches!(r.split, Some(Split::Test) | Some(Split::Gallery))));
        assert_eq!(rare.iter().filter(|r| r.split == Some(Split::Test)).count(), 3);
    }

    #[test]
    fn all_train_ratio() {
        let recs = generate_synthetic(&explicit(vec![9], vec![4])).unwrap();
        let ratios = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let split = split_dataset(&recs, ratios, 1).unwrap();
        assert!(split[..9].iter().all(|r| r.split == Some(Split::Train)));
        // rare class falls back to one test image, rest gallery
        let rare_tests = split[9..].iter().filter(|r| r.split == Some(Split::Test)).count();
        assert_eq!(rare_tests, 1);
    }

    #[test]
    fn split_counts_sum_to_class_size() {
        let recs = generate_synthetic(&DatasetConfig::default()).unwrap();
        let split = split_dataset(&recs, SplitRatios::default(), 3).unwrap();
        assert!(split.iter().all(|r| r.split.is_some()));
        let sizes = class_sizes(&recs);
        for (class, size) in sizes {
            let n = split.iter().filter(|r| r.syndrome == class).count();
            assert_eq!(n, size);
            if classify_frequency(size) == FrequencyClass::Frequent {
                for s in [Split::Train, Split::Test, Split::Gallery] {
                    assert!(split.iter().any(|r| r.syndrome == class && r.split == Some(s)));
                }
            }
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        let recs = generate_synthetic(&explicit(vec![9], vec![])).unwrap();
        let r = SplitRatios {
            train: 0.8,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&recs, r, 0).is_err());
    }

    fn class_records(sizes: &[usize]) -> Vec<PatientRecord> {
        let mut out = Vec::new();
        let mut id = 0;
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                out.push(PatientRecord {
                    id,
                    features: vec![0.0],
                    syndrome: c,
                    split: Some(Split::Train),
                    silo: None,
                });
                id += 1;
            }
        }
        out
    }

    fn per_class_counts(p: &Partition, recs: &[PatientRecord], class: usize) -> Vec<usize> {
        p.assignment
            .values()
            .map(|v| v.iter().filter(|&&id| recs[id as usize].syndrome == class).count())
            .collect()
    }

    #[test]
    fn near_uniform_deals_evenly() {
        let recs = class_records(&[8, 5]);
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let p = partition_near_uniform(&refs, 4, 0).unwrap();
        assert_eq!(per_class_counts(&p, &recs, 0), vec![2, 2, 2, 2]);
        let mut five = per_class_counts(&p, &recs, 1);
        five.sort_unstable();
        assert_eq!(five, vec![1, 1, 1, 2]);
        assert_eq!(ids(&p), (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn non_overlapping_is_disjoint_by_class() {
        let recs = class_records(&[5, 5, 5, 5]);
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let p = partition_non_overlapping(&refs, 2).unwrap();
        for ids in p.assignment.values() {
            assert_eq!(ids.len(), 10);
        }
        let classes = |s: usize| -> std::collections::BTreeSet<usize> {
            p.assignment[&s].iter().map(|&id| recs[id as usize].syndrome).collect()
        };
        assert!(classes(1).is_disjoint(&classes(2)));
        assert_eq!(classes(1).len(), 2);

        let one = partition_non_overlapping(&refs, 1).unwrap();
        assert_eq!(one.assignment[&1].len(), 20);
        assert!(partition_non_overlapping(&refs, 5).is_err());
    }

    #[test]
    fn dirichlet_high_alpha_is_near_uniform() {
        let recs = class_records(&[400, 37]);
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let p = partition_dirichlet(&refs, 4, 1e6, 9).unwrap();
        for class in 0..2 {
            let counts = per_class_counts(&p, &recs, class);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 2, "{counts:?}");
        }
        assert_eq!(ids(&p), (0..437).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_repairs_empty_silos() {
        let recs = class_records(&[3, 3]);
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        for seed in 0..50 {
            let p = partition_dirichlet(&refs, 6, 0.05, seed).unwrap();
            assert!(p.assignment.values().all(|v| !v.is_empty()));
            assert_eq!(ids(&p), (0..6).collect::<Vec<_>>());
        }
        assert!(partition_dirichlet(&refs, 2, 0.0, 0).is_err());
    }

    #[test]
    fn dirichlet_sd_falls_with_alpha() {
        let recs = class_records(&[30; 20]);
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        let mean_sd = |alpha: f64, seed: u64| {
            let p = partition_dirichlet(&refs, 4, alpha, seed).unwrap();
            let sd = class_distribution_sd(&p, &recs);
            sd.values().sum::<f64>() / sd.len() as f64
        };
        assert!(mean_sd(0.5, 1) > mean_sd(10.0, 1));
    }

    #[test]
    fn class_sd_by_hand() {
        let recs = class_records(&[4, 4]);
        let p = Partition {
            assignment: BTreeMap::from([(1, vec![0, 1, 2, 3, 4, 5]), (2, vec![6, 7])]),
            scheme: PartitionScheme::NearUniform,
        };
        let sd = class_distribution_sd(&p, &recs);
        assert_eq!(sd.len(), 2);
        assert!((sd[&0] - 0.5).abs() < 1e-15);
        assert!((sd[&1] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn partition_file_is_a_silo_map() {
        let p = Partition {
            assignment: BTreeMap::from([(1, vec![0, 2]), (2, vec![1])]),
            scheme: PartitionScheme::NearUniform,
        };
        assert_eq!(p.to_json_map(), r#"{"1":[0,2],"2":[1]}"#);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = generate_synthetic(&explicit(vec![7], vec![2])).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn holders_cover_everything() {
        let recs = generate_synthetic(&explicit(vec![10, 10], vec![4])).unwrap();
        let recs = split_dataset(&recs, SplitRatios::default(), 0).unwrap();
        let train: Vec<&PatientRecord> = recs.iter().filter(|r| r.split == Some(Split::Train)).collect();
        let p = partition_near_uniform(&train, 3, 0).unwrap();
        let placed = assign_silos(&recs, &p, 0);
        assert!(placed.iter().all(|r| matches!(r.silo, Some(1..=3))));
    }
}
