//! Init-image selection against exhaustive oracles.

use std::collections::BTreeMap;

use pavad_core::curate::{
    balanced_pool, default_instruction, scene_caps, score_image, select_from_scored, select_topk, BalanceConfig,
    ClassSpec, EmbeddingIndex, EmbeddingKind, EmbeddingRecord, Scored,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scored(rng: &mut impl Rng, n: usize, scenes: usize, levels: u32) -> Vec<Scored> {
    (0..n)
        .map(|i| Scored {
            id: format!("img{i:02}"),
            // Coarse levels force ties.
            score: (rng.random_range(0..levels) as f64) / levels as f64,
            scene_id: format!("s{}", rng.random_range(0..scenes)),
            source_path: format!("{i}.jpg"),
        })
        .collect()
}

/// Selection by repeated extraction of the best remaining candidate.
fn extract_best(pool: &[Scored], k: usize) -> Vec<String> {
    let mut left: Vec<&Scored> = pool.iter().collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if a.score > b.score || (a.score == b.score && a.id < b.id) {
                best = i;
            }
        }
        out.push(left.remove(best).id.clone());
    }
    out
}

fn ids(v: &[Scored]) -> Vec<String> {
    v.iter().map(|s| s.id.clone()).collect()
}

proptest! {
    #[test]
    fn unbalanced_selection_equals_exhaustive_ranking(seed in any::<u64>(), n in 1usize..=20, k in 1usize..25, levels in 2u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = scored(&mut rng, n, 3, levels);
        let got = select_from_scored(&pool, k, &BalanceConfig::disabled()).unwrap();
        prop_assert_eq!(ids(&got), extract_best(&pool, k));
    }

    #[test]
    fn quota_rule_matches_subset_enumeration(seed in any::<u64>(), n in 3usize..=12, k in 1usize..8, quota in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = scored(&mut rng, n, 3, 1000);
        // Distinct scores make the optimum unique.
        for (i, s) in pool.iter_mut().enumerate() {
            s.score += i as f64 * 1e-7;
        }
        let mut per_scene: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &pool {
            *per_scene.entry(&s.scene_id).or_default() += 1;
        }
        let required: usize = per_scene.values().map(|&c| c.min(quota)).sum();
        prop_assume!(required <= k);

        let bal = BalanceConfig { alpha: 1.0, min_quota_per_scene: quota, enabled: true, scale: Some(1.0) };
        let got = select_from_scored(&pool, k, &bal).unwrap();

        let size = k.min(n);
        let mut best: Option<(f64, u32)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let admissible = per_scene.iter().all(|(scene, &c)| {
                let taken = (0..n).filter(|&i| mask >> i & 1 == 1 && pool[i].scene_id == *scene).count();
                taken >= c.min(quota)
            });
            if !admissible {
                continue;
            }
            let total: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| pool[i].score).sum();
            if best.is_none_or(|(b, _)| total > b) {
                best = Some((total, mask));
            }
        }
        let (_, mask) = best.unwrap();
        let mut want: Vec<String> = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| pool[i].id.clone()).collect();
        let mut have = ids(&got);
        want.sort();
        have.sort();
        prop_assert_eq!(have, want);
    }

    #[test]
    fn scene_caps_follow_power_rule(counts in prop::collection::vec(1usize..200, 1..6), alpha in 0.0f64..=1.0) {
        let map: BTreeMap<String, usize> = counts.iter().enumerate().map(|(i, &c)| (format!("s{i}"), c)).collect();
        let bal = BalanceConfig { alpha, min_quota_per_scene: 0, enabled: true, scale: None };
        let caps = scene_caps(&map, &bal);
        let scale = counts.iter().map(|&c| (c as f64).powf(1.0 - alpha)).fold(f64::INFINITY, f64::min);
        for (scene, &c) in &map {
            let ideal = (c as f64).powf(alpha) * scale;
            let cap = caps[scene];
            prop_assert!(cap >= 1 && cap <= c);
            prop_assert!(cap as f64 + 1e-6 >= ideal.min(c as f64));
            prop_assert!((cap as f64) < ideal + 1.0 + 1e-6);
        }
    }
}

#[test]
fn balanced_pool_keeps_best_of_each_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = scored(&mut rng, 60, 4, 100);
    let bal = BalanceConfig {
        alpha: 0.5,
        min_quota_per_scene: 0,
        enabled: true,
        scale: None,
    };
    let kept = balanced_pool(&pool, &bal);
    let mut counts = BTreeMap::new();
    for s in &pool {
        *counts.entry(s.scene_id.clone()).or_insert(0) += 1;
    }
    let caps = scene_caps(&counts, &bal);
    for (scene, cap) in caps {
        let members: Vec<Scored> = pool.iter().filter(|s| s.scene_id == scene).cloned().collect();
        let mut want = extract_best(&members, cap);
        let mut have: Vec<String> = kept
            .iter()
            .filter(|s| s.scene_id == scene)
            .map(|s| s.id.clone())
            .collect();
        want.sort();
        have.sort();
        assert_eq!(have, want, "scene {scene}");
    }
}

#[test]
fn quota_overflow_keeps_best_by_rank() {
    let pool: Vec<Scored> = [("a", 0.9, "x"), ("b", 0.8, "x"), ("c", 0.7, "y"), ("d", 0.1, "z")]
        .iter()
        .map(|&(id, score, scene)| Scored {
            id: id.into(),
            score,
            scene_id: scene.into(),
            source_path: String::new(),
        })
        .collect();
    let bal = BalanceConfig {
        alpha: 1.0,
        min_quota_per_scene: 1,
        enabled: true,
        scale: Some(1.0),
    };
    assert_eq!(ids(&select_from_scored(&pool, 2, &bal).unwrap()), ["a", "c"]);
    assert_eq!(ids(&select_from_scored(&pool, 3, &bal).unwrap()), ["a", "c", "d"]);
    assert_eq!(ids(&select_from_scored(&pool, 4, &bal).unwrap()), ["a", "b", "c", "d"]);
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_index(rng: &mut impl Rng, images: usize, d: usize, spec: &ClassSpec) -> EmbeddingIndex {
    let mut records: Vec<EmbeddingRecord> = (0..images)
        .map(|i| EmbeddingRecord {
            id: format!("im{i:03}"),
            kind: EmbeddingKind::Image,
            vector: unit(rng, d),
            scene_id: Some(format!("scene{}", i % 3)),
            source_path: format!("im{i:03}.jpg"),
        })
        .collect();
    for q in std::iter::once(spec.positive_query()).chain(spec.negative_phrases.iter().cloned()) {
        records.push(EmbeddingRecord {
            id: q,
            kind: EmbeddingKind::Text,
            vector: unit(rng, d),
            scene_id: None,
            source_path: String::new(),
        });
    }
    EmbeddingIndex::new(records).unwrap()
}

fn spec(lambda: f64, top_k: usize) -> ClassSpec {
    ClassSpec {
        class_name: "fighting".into(),
        positive_phrases: vec!["people punching".into()],
        negative_phrases: vec!["people dancing".into(), "people hugging".into()],
        lambda,
        top_k,
        template_phrases: vec![],
        refinement_instruction: default_instruction(),
    }
}

#[test]
fn zero_lambda_ranks_by_positive_similarity_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let sp = spec(0.0, 5);
        let index = random_index(&mut rng, 15, 6, &sp);
        let got = select_topk(&index, &sp, &BalanceConfig::disabled()).unwrap();
        let pos = &index.text(&sp.positive_query()).unwrap().vector;
        let mut by_pos: Vec<(f64, String)> = index
            .images()
            .iter()
            .map(|r| (dot(&r.vector, pos), r.id.clone()))
            .collect();
        by_pos.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<String> = by_pos.into_iter().take(5).map(|p| p.1).collect();
        assert_eq!(ids(&got), want);
    }
}

#[test]
fn score_is_positive_minus_weighted_hardest_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let (v, t, n1, n2) = (
            unit(&mut rng, 5),
            unit(&mut rng, 5),
            unit(&mut rng, 5),
            unit(&mut rng, 5),
        );
        let lambda = rng.random_range(0.0..1.0);
        let want = dot(&v, &t) - lambda * dot(&v, &n1).max(dot(&v, &n2));
        let got = score_image(&v, &t, &[&n1, &n2], lambda).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert_eq!(score_image(&v, &t, &[], lambda).unwrap(), dot(&v, &t));
    }
}

#[test]
fn index_rejects_bad_records() {
    let good = EmbeddingRecord {
        id: "a".into(),
        kind: EmbeddingKind::Image,
        vector: vec![0.6, 0.8],
        scene_id: Some("s".into()),
        source_path: "a.jpg".into(),
    };
    assert!(EmbeddingIndex::new(vec![good.clone()]).is_ok());
    let off_norm = EmbeddingRecord {
        vector: vec![0.6, 0.81],
        ..good.clone()
    };
    let no_scene = EmbeddingRecord {
        scene_id: None,
        ..good.clone()
    };
    let other_dim = EmbeddingRecord {
        id: "b".into(),
        vector: vec![1.0, 0.0, 0.0],
        ..good.clone()
    };
    assert!(EmbeddingIndex::new(vec![off_norm]).is_err());
    assert!(EmbeddingIndex::new(vec![no_scene]).is_err());
    assert!(EmbeddingIndex::new(vec![good.clone(), other_dim]).is_err());
    assert!(EmbeddingIndex::new(vec![good.clone(), good.clone()]).is_err());
    let index = EmbeddingIndex::new(vec![good]).unwrap();
    assert!(select_topk(&index, &spec(0.5, 1), &BalanceConfig::disabled()).is_err());
}
