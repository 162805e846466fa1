//! Top-k unique-syndrome retrieval, the four test/gallery settings, cluster
//! metrics and similar-subgroup discovery over a [`DistanceMatrix`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Split;
use crate::flake::DistanceMatrix;

pub const DEFAULT_K_LIST: [usize; 4] = [1, 5, 10, 30];

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("setting {0} has no test rows")]
    EmptyTest(Setting),
    #[error("setting {0} has an empty gallery")]
    EmptyGallery(Setting),
    #[error("no pair available for the {0} distance")]
    NoPairs(&'static str),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("test row {0} is also a gallery row")]
    Overlap(usize),
}

/// Which frequency classes populate the test set and the gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "FF")]
    FF,
    #[serde(rename = "RR")]
    RR,
    #[serde(rename = "FFR")]
    FFR,
    #[serde(rename = "RFR")]
    RFR,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::FF, Setting::RR, Setting::FFR, Setting::RFR];

    fn test_frequent(self) -> bool {
        matches!(self, Setting::FF | Setting::FFR)
    }

    fn gallery(self) -> GalleryComposition {
        match self {
            Setting::FF => GalleryComposition::F,
            Setting::RR => GalleryComposition::R,
            Setting::FFR | Setting::RFR => GalleryComposition::FR,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setting::FF => "F-F",
            Setting::RR => "R-R",
            Setting::FFR => "F-FR",
            Setting::RFR => "R-FR",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GalleryComposition {
    F,
    R,
    FR,
}

impl GalleryComposition {
    fn admits(self, frequent: bool) -> bool {
        match self {
            GalleryComposition::F => frequent,
            GalleryComposition::R => !frequent,
            GalleryComposition::FR => true,
        }
    }
}

/// Gallery rows (indices into the distance matrix) with their labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GallerySet {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub composition: GalleryComposition,
}

/// Distinct syndromes in ascending distance order, each with the distance of
/// its closest gallery sample. Equal distances rank by gallery position.
pub fn rank_unique(distances: &[f64], labels: &[usize]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut seen = BTreeSet::new();
    order
        .into_iter()
        .filter(|&i| seen.insert(labels[i]))
        .map(|i| (labels[i], distances[i]))
        .collect()
}

/// True iff `true_label` is among the first `k` distinct syndromes.
pub fn topk_unique_match(distances: &[f64], gallery_labels: &[usize], true_label: usize, k: usize) -> bool {
    rank_unique(distances, gallery_labels)
        .iter()
        .take(k)
        .any(|&(l, _)| l == true_label)
}

/// Position (0-based) of `true_label` among distinct syndromes, if present.
fn unique_rank_of(distances: &[f64], labels: &[usize], true_label: usize) -> Option<usize> {
    rank_unique(distances, labels).iter().position(|&(l, _)| l == true_label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub topk_acc: BTreeMap<usize, f64>,
    pub n_test: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn is_monotone(&self) -> bool {
        self.topk_acc
            .values()
            .zip(self.topk_acc.values().skip(1))
            .all(|(a, b)| a <= b)
    }
}

/// Test rows and gallery for `setting`, using split tags from the matrix
/// metadata and `frequent` as the set of frequent syndromes.
pub fn setting_rows(
    d: &DistanceMatrix,
    setting: Setting,
    frequent: &BTreeSet<usize>,
) -> (Vec<usize>, GallerySet) {
    let mut test = Vec::new();
    let mut gallery = GallerySet {
        rows: Vec::new(),
        labels: Vec::new(),
        composition: setting.gallery(),
    };
    for (i, m) in d.meta.iter().enumerate() {
        let is_frequent = frequent.contains(&m.label);
        match m.split {
            Split::Test if is_frequent == setting.test_frequent() => test.push(i),
            Split::Gallery if gallery.composition.admits(is_frequent) => {
                gallery.rows.push(i);
                gallery.labels.push(m.label);
            }
            _ => {}
        }
    }
    (test, gallery)
}

/// Top-k unique accuracy of every `test` row against `gallery`.
pub fn evaluate_rows(
    d: &DistanceMatrix,
    setting: Setting,
    test: &[usize],
    gallery: &GallerySet,
    k_list: &[usize],
    seed: u64,
) -> Result<EvalReport, InferenceError> {
    if test.is_empty() {
        return Err(InferenceError::EmptyTest(setting));
    }
    if gallery.rows.is_empty() {
        return Err(InferenceError::EmptyGallery(setting));
    }
    if k_list.contains(&0) {
        return Err(InferenceError::ZeroK);
    }
    let gallery_rows: BTreeSet<usize> = gallery.rows.iter().copied().collect();
    if let Some(&t) = test.iter().find(|t| gallery_rows.contains(t)) {
        return Err(InferenceError::Overlap(t));
    }
    let ranks: Vec<Option<usize>> = test
        .iter()
        .map(|&t| {
            let row = d.values.row(t);
            let dist: Vec<f64> = gallery.rows.iter().map(|&g| row[g]).collect();
            unique_rank_of(&dist, &gallery.labels, d.meta[t].label)
        })
        .collect();
    let topk_acc = k_list
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p < k)).count();
            (k, hits as f64 / test.len() as f64)
        })
        .collect();
    Ok(EvalReport {
        setting,
        topk_acc,
        n_test: test.len(),
        seed,
    })
}

pub fn evaluate_setting(
    d: &DistanceMatrix,
    setting: Setting,
    frequent: &BTreeSet<usize>,
    k_list: &[usize],
    seed: u64,
) -> Result<EvalReport, InferenceError> {
    let (test, gallery) = setting_rows(d, setting, frequent);
    evaluate_rows(d, setting, &test, &gallery, k_list, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScope {
    Test,
    RareGallery,
    TestAndRareGallery,
}

impl MetricScope {
    pub fn rows(self, d: &DistanceMatrix, frequent: &BTreeSet<usize>) -> Vec<usize> {
        d.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                let test = m.split == Split::Test;
                let rare_gallery = m.split == Split::Gallery && !frequent.contains(&m.label);
                match self {
                    MetricScope::Test => test,
                    MetricScope::RareGallery => rare_gallery,
                    MetricScope::TestAndRareGallery => test || rare_gallery,
                }
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub intra: f64,
    pub inter: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

/// Mean distance over same-label pairs and over different-label pairs
/// among `rows`.
pub fn cluster_metrics(d: &DistanceMatrix, rows: &[usize]) -> Result<ClusterMetrics, InferenceError> {
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut n_intra, mut n_inter) = (0usize, 0usize);
    for (a, &p) in rows.iter().enumerate() {
        for &q in &rows[a + 1..] {
            let v = d.values.get(p, q);
            if d.meta[p].label == d.meta[q].label {
                intra += v;
                n_intra += 1;
            } else {
                inter += v;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 {
        return Err(InferenceError::NoPairs("intra-class"));
    }
    if n_inter == 0 {
        return Err(InferenceError::NoPairs("inter-class"));
    }
    Ok(ClusterMetrics {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
        intra_pairs: n_intra,
        inter_pairs: n_inter,
    })
}

/// A group of mutually close patients and the silos that hold them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroup {
    pub ids: Vec<u64>,
    pub silos: Vec<usize>,
}

/// Connected components of the graph `D(p,q) <= tau` over `rows` with at
/// least `min_size` members. Groups are sorted by their smallest id.
pub fn discover_subgroups(d: &DistanceMatrix, rows: &[usize], tau: f64, min_size: usize) -> Vec<Subgroup> {
    let n = rows.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for a in 0..n {
        for b in a + 1..n {
            if d.values.get(rows[a], rows[b]) <= tau {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..n {
        let root = find(&mut parent, a);
        groups.entry(root).or_default().push(rows[a]);
    }
    let mut out: Vec<Subgroup> = groups
        .into_values()
        .filter(|g| g.len() >= min_size.max(2))
        .map(|g| {
            let mut ids: Vec<u64> = g.iter().map(|&r| d.meta[r].id).collect();
            ids.sort_unstable();
            let silos: BTreeSet<usize> = g.iter().map(|&r| d.meta[r].silo).collect();
            Subgroup {
                ids,
                silos: silos.into_iter().collect(),
            }
        })
        .collect();
    out.sort_by_key(|g| g.ids[0]);
    out
}
