//! Preranked gene-set enrichment.
//!
//! The enrichment score walks the ranked list: a hit adds
//! `|score|^p / N_R` (N_R = sum of `|score|^p` over the set's in-list genes), a
//! miss subtracts `1 / (N - N_H)`. The score is the running-sum value of
//! largest magnitude, sign kept; an exact tie between a positive and a
//! negative extreme resolves to the positive one.
//!
//! Significance uses gene-set permutation with a seeded generator and the
//! plus-one estimator. q-values are Benjamini-Hochberg, computed separately
//! for positive and negative scores.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{BioContext, GeneSet, RankedList, Term, TermKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GseaError {
    #[error("gene set {0:?} shares no genes with the ranked list")]
    NoOverlap(String),
    #[error("gene set {0:?} covers the whole ranked list")]
    FullOverlap(String),
    #[error("gene set {0:?} has zero total weight (all in-list scores are 0)")]
    ZeroNormalizer(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no gene set passes the size filter")]
    NoAdmissibleSets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GseaParams {
    pub weight_exponent: f64,
    pub permutations: usize,
    pub seed: u64,
    pub min_set_size: usize,
    pub max_set_size: usize,
}

impl Default for GseaParams {
    fn default() -> Self {
        GseaParams {
            weight_exponent: 1.0,
            permutations: 1000,
            seed: 0,
            min_set_size: 3,
            max_set_size: 500,
        }
    }
}

impl GseaParams {
    pub fn validate(&self) -> Result<(), GseaError> {
        if !(self.weight_exponent >= 0.0 && self.weight_exponent.is_finite()) {
            return Err(GseaError::InvalidParams("weight_exponent must be finite and >= 0".into()));
        }
        if self.permutations == 0 {
            return Err(GseaError::InvalidParams("permutations must be >= 1".into()));
        }
        if self.min_set_size > self.max_set_size {
            return Err(GseaError::InvalidParams("min_set_size exceeds max_set_size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn of(es: f64) -> Self {
        if es >= 0.0 {
            Direction::Positive
        } else {
            Direction::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentResult {
    pub set_name: String,
    pub es: f64,
    pub p_value: f64,
    pub q_value: f64,
    pub hit_count: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentScore {
    pub es: f64,
    pub running_sum: Vec<f64>,
}

fn hit_mask(ranked: &RankedList, set: &GeneSet) -> Vec<bool> {
    ranked.genes().map(|g| set.genes.contains(g)).collect()
}

fn weight(score: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        score.abs().powf(p)
    }
}

fn check_overlap(name: &str, hits: usize, n: usize) -> Result<(), GseaError> {
    if hits == 0 {
        return Err(GseaError::NoOverlap(name.to_string()));
    }
    if hits == n {
        return Err(GseaError::FullOverlap(name.to_string()));
    }
    Ok(())
}

/// Magnitudes closer than this count as tied; accumulated rounding would
/// otherwise decide the sign of a symmetric walk.
const TIE_TOLERANCE: f64 = 1e-12;

/// Picks the signed extreme, preferring positive on equal magnitude.
fn signed_extreme(max_pos: f64, min_neg: f64) -> f64 {
    if max_pos >= -min_neg - TIE_TOLERANCE {
        max_pos
    } else {
        min_neg
    }
}

/// Full walk of the ranked list, returning the running sum at every position.
pub fn enrichment_score(
    ranked: &RankedList,
    set: &GeneSet,
    weight_exponent: f64,
) -> Result<EnrichmentScore, GseaError> {
    let mask = hit_mask(ranked, set);
    let n = mask.len();
    let n_hits = mask.iter().filter(|h| **h).count();
    check_overlap(&set.name, n_hits, n)?;
    let entries = ranked.entries();
    let normalizer: f64 = entries
        .iter()
        .zip(&mask)
        .filter(|(_, h)| **h)
        .map(|(e, _)| weight(e.score, weight_exponent))
        .sum();
    if normalizer <= 0.0 {
        return Err(GseaError::ZeroNormalizer(set.name.clone()));
    }
    let miss_step = 1.0 / (n - n_hits) as f64;

    let mut running = Vec::with_capacity(n);
    let mut sum = 0.0;
    let (mut max_pos, mut min_neg) = (0.0f64, 0.0f64);
    for (e, &hit) in entries.iter().zip(&mask) {
        if hit {
            sum += weight(e.score, weight_exponent) / normalizer;
        } else {
            sum -= miss_step;
        }
        max_pos = max_pos.max(sum);
        min_neg = min_neg.min(sum);
        running.push(sum);
    }
    Ok(EnrichmentScore {
        es: signed_extreme(max_pos, min_neg),
        running_sum: running,
    })
}

/// Enrichment score from sorted hit positions only, O(k) instead of O(N).
/// Extremes can only occur at a hit (maximum) or just before one (minimum).
fn es_at_positions(weights: &[f64], positions: &[usize], n: usize) -> Option<f64> {
    let k = positions.len();
    let normalizer: f64 = positions.iter().map(|&i| weights[i]).sum();
    if normalizer <= 0.0 || k == 0 || k == n {
        return None;
    }
    let miss_step = 1.0 / (n - k) as f64;
    let (mut max_pos, mut min_neg) = (0.0f64, 0.0f64);
    let mut hit_sum = 0.0;
    for (j, &pos) in positions.iter().enumerate() {
        let misses_before = (pos - j) as f64;
        min_neg = min_neg.min(hit_sum / normalizer - misses_before * miss_step);
        hit_sum += weights[pos];
        max_pos = max_pos.max(hit_sum / normalizer - misses_before * miss_step);
    }
    Some(signed_extreme(max_pos, min_neg))
}

/// Derives an independent generator seed for one gene set so that results do
/// not depend on evaluation order.
pub fn set_seed(seed: u64, set_name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(set_name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

struct NullSample {
    observed: f64,
    null: Vec<f64>,
}

fn sample_null(ranked: &RankedList, set: &GeneSet, params: &GseaParams) -> Result<NullSample, GseaError> {
    params.validate()?;
    let mask = hit_mask(ranked, set);
    let n = mask.len();
    let observed_positions: Vec<usize> = mask.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i).collect();
    check_overlap(&set.name, observed_positions.len(), n)?;
    let weights: Vec<f64> = ranked
        .entries()
        .iter()
        .map(|e| weight(e.score, params.weight_exponent))
        .collect();
    let observed = es_at_positions(&weights, &observed_positions, n)
        .ok_or_else(|| GseaError::ZeroNormalizer(set.name.clone()))?;

    let k = observed_positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut null = Vec::with_capacity(params.permutations);
    let mut positions = Vec::with_capacity(k);
    for _ in 0..params.permutations {
        positions.clear();
        positions.extend(rand::seq::index::sample(&mut rng, n, k).into_iter());
        positions.sort_unstable();
        // Draws whose genes all carry zero weight have no defined score.
        if let Some(es) = es_at_positions(&weights, &positions, n) {
            null.push(es);
        }
    }
    Ok(NullSample { observed, null })
}

/// Permuted enrichment scores for random gene sets of the same in-list size,
/// drawn with `params.seed`.
pub fn null_distribution(ranked: &RankedList, set: &GeneSet, params: &GseaParams) -> Result<Vec<f64>, GseaError> {
    Ok(sample_null(ranked, set, params)?.null)
}

/// Plus-one permutation p-value from an observed score and its null sample.
pub fn pvalue_from_null(observed: f64, null: &[f64]) -> f64 {
    let dir = Direction::of(observed);
    let same_sign: Vec<f64> = null.iter().copied().filter(|e| Direction::of(*e) == dir).collect();
    if same_sign.is_empty() {
        log::warn!("no permuted score shares the observed sign; p set to 1.0");
        return 1.0;
    }
    let as_extreme = same_sign.iter().filter(|e| e.abs() >= observed.abs()).count();
    (1 + as_extreme) as f64 / (1 + same_sign.len()) as f64
}

pub fn permutation_pvalue(ranked: &RankedList, set: &GeneSet, params: &GseaParams) -> Result<f64, GseaError> {
    let sample = sample_null(ranked, set, params)?;
    Ok(pvalue_from_null(sample.observed, &sample.null))
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_fdr(p_values: &[f64]) -> Vec<f64> {
    let n = p_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; n];
    let mut running_min = f64::INFINITY;
    for (rank_idx, &i) in order.iter().enumerate().rev() {
        let rank = (rank_idx + 1) as f64;
        running_min = running_min.min(p_values[i] * (n as f64 / rank));
        q[i] = running_min.min(1.0);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub q_max: f64,
    pub p_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            q_max: 0.25,
            p_max: 0.01,
        }
    }
}

/// Maps gene-set name prefixes to term kinds; unmatched names fall back to
/// `default_kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMap {
    pub prefixes: Vec<(String, TermKind)>,
    pub default_kind: TermKind,
}

impl Default for KindMap {
    fn default() -> Self {
        let p = |s: &str, k| (s.to_string(), k);
        KindMap {
            prefixes: vec![
                p("GOBP_", TermKind::GoBiologicalProcess),
                p("GOMF_", TermKind::GoMolecularFunction),
                p("GOCC_", TermKind::GoCellularComponent),
                p("GO_", TermKind::GoBiologicalProcess),
                p("REACTOME_", TermKind::Pathway),
                p("KEGG_", TermKind::Pathway),
                p("WP_", TermKind::Pathway),
                p("BIOCARTA_", TermKind::Pathway),
                p("HALLMARK_", TermKind::Pathway),
            ],
            default_kind: TermKind::Pathway,
        }
    }
}

impl KindMap {
    pub fn classify<'a>(&self, set_name: &'a str) -> (TermKind, &'a str) {
        let upper = set_name.to_uppercase();
        for (prefix, kind) in &self.prefixes {
            if upper.starts_with(&prefix.to_uppercase()) {
                return (*kind, &set_name[prefix.len()..]);
            }
        }
        (self.default_kind, set_name)
    }
}

fn term_for(set: &GeneSet, kind_map: &KindMap) -> Term {
    let (kind, stem) = kind_map.classify(&set.name);
    let description = set.description.trim();
    let name = if !description.is_empty() && !description.starts_with("http") && description != "na" {
        description.to_string()
    } else {
        stem.replace('_', " ").to_lowercase()
    };
    Term::new(set.name.clone(), name, kind, "GSEA")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub result: EnrichmentResult,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GseaOutcome {
    pub context: BioContext,
    pub results: Vec<ScoredSet>,
}

/// Scores every size-admissible set, adjusts for multiple testing, and turns
/// sets with `p < p_max` and `q < q_max` into context terms (unfiltered).
pub fn enrich_to_context(
    compound_id: &str,
    ranked: &RankedList,
    sets: &[GeneSet],
    params: &GseaParams,
    thresholds: Thresholds,
    kind_map: &KindMap,
) -> Result<GseaOutcome, GseaError> {
    params.validate()?;
    let universe: BTreeSet<&str> = ranked.genes().collect();
    let n = universe.len();
    let admissible: Vec<&GeneSet> = sets
        .iter()
        .filter(|s| {
            let overlap = s.genes.iter().filter(|g| universe.contains(g.as_str())).count();
            overlap >= params.min_set_size.max(1) && overlap <= params.max_set_size && overlap < n
        })
        .collect();
    if admissible.is_empty() {
        return Err(GseaError::NoAdmissibleSets);
    }

    let scored: Vec<Result<(f64, f64, usize), GseaError>> = admissible
        .par_iter()
        .map(|set| {
            let es = enrichment_score(ranked, set, params.weight_exponent)?.es;
            let per_set = GseaParams {
                seed: set_seed(params.seed, &set.name),
                ..params.clone()
            };
            let p = permutation_pvalue(ranked, set, &per_set)?;
            let hits = set.genes.iter().filter(|g| universe.contains(g.as_str())).count();
            Ok((es, p, hits))
        })
        .collect();

    let mut results = Vec::with_capacity(admissible.len());
    for (set, r) in admissible.iter().zip(scored) {
        match r {
            Ok((es, p, hits)) => results.push(EnrichmentResult {
                set_name: set.name.clone(),
                es,
                p_value: p,
                q_value: 1.0,
                hit_count: hits,
                direction: Direction::of(es),
            }),
            Err(GseaError::ZeroNormalizer(name)) => {
                log::warn!("skipping gene set {name}: all in-list scores are zero");
            }
            Err(e) => return Err(e),
        }
    }

    for dir in [Direction::Positive, Direction::Negative] {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].direction == dir).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| results[i].p_value).collect();
        for (&i, q) in idx.iter().zip(bh_fdr(&ps)) {
            results[i].q_value = q;
        }
    }

    let by_name: HashMap<&str, &GeneSet> = admissible.iter().map(|s| (s.name.as_str(), *s)).collect();
    let mut context = BioContext::empty(compound_id);
    let mut out = Vec::with_capacity(results.len());
    for result in results {
        let kept = result.p_value < thresholds.p_max && result.q_value < thresholds.q_max;
        if kept {
            context.push(term_for(by_name[result.set_name.as_str()], kind_map));
        }
        out.push(ScoredSet { result, kept });
    }
    Ok(GseaOutcome { context, results: out })
}

/// `set_name<TAB>es<TAB>p<TAB>q<TAB>hits<TAB>kept` with a header line.
pub fn enrichment_report_tsv(results: &[ScoredSet]) -> String {
    let mut s = String::from("set_name\tes\tp\tq\thits\tkept\n");
    for r in results {
        let e = &r.result;
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            e.set_name, e.es, e.p_value, e.q_value, e.hit_count, r.kept
        ));
    }
    s
}
