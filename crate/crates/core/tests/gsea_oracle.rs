use std::collections::BTreeSet;

use cotox_core::gsea::{
    enrich_to_context, enrichment_score, null_distribution, permutation_pvalue, pvalue_from_null, GseaParams,
    KindMap, Thresholds,
};
use cotox_core::ingest::{GeneSet, RankedList};
use proptest::prelude::*;

fn set(name: &str, genes: &[String]) -> GeneSet {
    GeneSet {
        name: name.into(),
        description: String::new(),
        genes: genes.iter().cloned().collect(),
    }
}

/// Textbook running-sum computation over an explicit (gene, score) order,
/// written without reference to the library's internals.
fn oracle_es(order: &[(String, f64)], members: &BTreeSet<String>, p: f64) -> f64 {
    let n = order.len() as f64;
    let nh = order.iter().filter(|(g, _)| members.contains(g)).count() as f64;
    let nr: f64 = order
        .iter()
        .filter(|(g, _)| members.contains(g))
        .map(|(_, s)| s.abs().powf(p))
        .sum();
    let (mut best, mut worst) = (0.0f64, 0.0f64);
    for i in 0..order.len() {
        let mut phit = 0.0;
        let mut pmiss = 0.0;
        for (g, s) in &order[..=i] {
            if members.contains(g) {
                phit += s.abs().powf(p) / nr;
            } else {
                pmiss += 1.0 / (n - nh);
            }
        }
        let v = phit - pmiss;
        if v > best {
            best = v;
        }
        if v < worst {
            worst = v;
        }
    }
    if best >= -worst - 1e-12 {
        best
    } else {
        worst
    }
}

fn canonical(pairs: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

proptest! {
    #[test]
    fn matches_brute_force(
        scores in prop::collection::vec(-50i32..50, 4..30),
        picks in prop::collection::vec(any::<bool>(), 30),
        p in prop::sample::select(vec![0.0, 1.0, 2.0]),
    ) {
        let pairs: Vec<(String, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("G{i:02}"), *s as f64 / 4.0 + 0.125))
            .collect();
        let members: Vec<String> = pairs
            .iter()
            .zip(&picks)
            .filter(|(_, k)| **k)
            .map(|((g, _), _)| g.clone())
            .collect();
        prop_assume!(!members.is_empty() && members.len() < pairs.len());
        let ranked = RankedList::new(pairs.clone()).unwrap();
        let got = enrichment_score(&ranked, &set("s", &members), p).unwrap();
        let want = oracle_es(&canonical(&pairs), &members.iter().cloned().collect(), p);
        prop_assert!((got.es - want).abs() < 1e-9, "{} vs {}", got.es, want);
        prop_assert!(got.running_sum.last().unwrap().abs() < 1e-9);
        prop_assert!(got.es.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn scale_invariant(
        scores in prop::collection::vec(1i32..100, 5..20),
        c in 0.01f64..100.0,
        k in 1usize..4,
    ) {
        let pairs: Vec<(String, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("G{i:02}"), *s as f64 - 50.5))
            .collect();
        let scaled: Vec<(String, f64)> = pairs.iter().map(|(g, s)| (g.clone(), s * c)).collect();
        let members: Vec<String> = pairs.iter().take(k).map(|(g, _)| g.clone()).collect();
        let s = set("s", &members);
        let a = enrichment_score(&RankedList::new(pairs).unwrap(), &s, 1.0).unwrap().es;
        let b = enrichment_score(&RankedList::new(scaled).unwrap(), &s, 1.0).unwrap().es;
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}

#[test]
fn single_gene_null_is_enumerable() {
    let pairs = vec![
        ("A".to_string(), 3.0),
        ("B".to_string(), 2.0),
        ("C".to_string(), 1.0),
        ("D".to_string(), -1.0),
    ];
    let ranked = RankedList::new(pairs).unwrap();
    let s = set("s", &["A".to_string()]);
    assert_eq!(enrichment_score(&ranked, &s, 1.0).unwrap().es, 1.0);

    // Every size-1 set of this list has one of four scores.
    let allowed = [1.0, 2.0 / 3.0, -2.0 / 3.0, -1.0];
    let params = GseaParams {
        permutations: 1000,
        seed: 7,
        min_set_size: 1,
        ..Default::default()
    };
    let null = null_distribution(&ranked, &s, &params).unwrap();
    assert_eq!(null.len(), 1000);
    for e in &null {
        assert!(allowed.iter().any(|a| (a - e).abs() < 1e-12), "{e}");
    }
    let at_one = null.iter().filter(|e| (*e - 1.0).abs() < 1e-12).count();
    let positive = null.iter().filter(|e| **e >= 0.0).count();
    let p = permutation_pvalue(&ranked, &s, &params).unwrap();
    assert_eq!(p, (1 + at_one) as f64 / (1 + positive) as f64);
    assert_eq!(p, pvalue_from_null(1.0, &null));
    // Half of the positive draws are {A}.
    assert!((p - 0.5).abs() < 0.06, "{p}");
}

#[test]
fn pvalue_is_deterministic_per_seed() {
    let pairs: Vec<(String, f64)> = (0..40).map(|i| (format!("G{i}"), 20.0 - i as f64 + 0.5)).collect();
    let ranked = RankedList::new(pairs).unwrap();
    let s = set("s", &["G1".into(), "G3".into(), "G30".into()]);
    let params = GseaParams {
        permutations: 300,
        seed: 99,
        ..Default::default()
    };
    let a = permutation_pvalue(&ranked, &s, &params).unwrap();
    let b = permutation_pvalue(&ranked, &s, &params).unwrap();
    assert_eq!(a, b);
    assert!(a > 0.0 && a <= 1.0);
}

#[test]
fn planted_signal_is_recovered() {
    // 50 genes scored 25..1 then -1..-25; the planted set is the top five.
    let mut pairs = Vec::new();
    for i in 0..25 {
        pairs.push((format!("G{i:02}"), (25 - i) as f64));
    }
    for i in 0..25 {
        pairs.push((format!("G{:02}", 25 + i), -((i + 1) as f64)));
    }
    let ranked = RankedList::new(pairs).unwrap();
    let top: Vec<String> = (0..5).map(|i| format!("G{i:02}")).collect();
    let mut sets = vec![set("PLANTED", &top)];
    // Decoys: deterministic pseudo-random five-gene sets.
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for d in 0..100 {
        let mut genes = BTreeSet::new();
        while genes.len() < 5 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            genes.insert(format!("G{:02}", state % 50));
        }
        sets.push(set(&format!("DECOY{d:03}"), &genes.into_iter().collect::<Vec<_>>()));
    }
    let params = GseaParams {
        permutations: 1000,
        seed: 1,
        ..Default::default()
    };
    let out = enrich_to_context("X", &ranked, &sets, &params, Thresholds::default(), &KindMap::default()).unwrap();
    let planted = out.results.iter().find(|r| r.result.set_name == "PLANTED").unwrap();
    assert!(planted.result.p_value < 0.01, "{}", planted.result.p_value);
    assert!(planted.kept);
    let decoy_hits = out
        .results
        .iter()
        .filter(|r| r.result.set_name.starts_with("DECOY") && r.result.p_value < 0.01)
        .count();
    assert!(decoy_hits <= 5, "{decoy_hits} decoys reached p < 0.01");
    assert!(out.context.terms().any(|t| t.term_id == "PLANTED"));
}
