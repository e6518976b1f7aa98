mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use trustkit_core::conformal::{crc_fit, crc_set, miscoverage, ConformalCalibrator, PredictionSet};
use trustkit_core::data::{Manifest, TileRecord};
use trustkit_core::trust::{
    aggregate, ambiguity_score, breakdown, fairness_gap, ood_score_probability, ood_score_uncertainty, FairnessMetric,
    GroupField, PatientRecord,
};

fn prob_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn record(id: usize, label: Option<usize>, set: Vec<usize>, sex: &str) -> PatientRecord {
    PatientRecord {
        patient_id: format!("p{id}"),
        label,
        sex: sex.into(),
        race_group: "A".into(),
        slide_probs: BTreeMap::new(),
        probs: vec![0.5, 0.5],
        score_probability: 0.0,
        score_uncertainty: 0.0,
        set: Some(PredictionSet::new(set)),
    }
}

fn cohort() -> impl Strategy<Value = Vec<(Vec<usize>, Option<usize>, bool)>> {
    let case = (
        prop::collection::btree_set(0usize..3, 0..=3).prop_map(|s| s.into_iter().collect::<Vec<_>>()),
        prop::option::weighted(0.8, 0usize..3),
        any::<bool>(),
    );
    prop::collection::vec(case, 1..40)
}

proptest! {
    #[test]
    fn ambiguity_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
        let a = ambiguity_score(&[p, 1.0 - p]).unwrap();
        let b = ambiguity_score(&[1.0 - p, p]).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ood_scores_ignore_tile_order(
        tiles in prop::collection::vec(prob_vec(3), 1..20),
        unc in prop::collection::vec(0.0f64..5.0, 1..30),
        delta in 1usize..40,
        seed in any::<u64>(),
    ) {
        let mut rng = trustkit_core::numerics::Rng::new(seed);
        let mut t2 = tiles.clone();
        rng.shuffle(&mut t2);
        let mut u2 = unc.clone();
        rng.shuffle(&mut u2);
        let sp = ood_score_probability(&tiles).unwrap();
        prop_assert!((sp - ood_score_probability(&t2).unwrap()).abs() < 1e-12);
        prop_assert!((sp - common::probability_score_oracle(&tiles)).abs() < 1e-12);
        let su = ood_score_uncertainty(&unc, delta).unwrap();
        prop_assert!((su - ood_score_uncertainty(&u2, delta).unwrap()).abs() < 1e-12);
        prop_assert!((su - common::uncertainty_score_oracle(&unc, delta)).abs() < 1e-12);
    }

    #[test]
    fn quantile_matches_counting_oracle(
        scores in prop::collection::vec((0u32..=20).prop_map(|v| v as f64 / 20.0), 1..60),
        alpha_milli in prop::sample::select(vec![10u64, 50, 100, 200, 500]),
    ) {
        let c = ConformalCalibrator::from_scores(scores.clone(), alpha_milli as f64 / 1000.0).unwrap();
        prop_assert_eq!(c.q_hat(), common::quantile_oracle(&scores, alpha_milli));
    }

    #[test]
    fn sets_match_oracle_and_grow_with_threshold(p in prob_vec(4), q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let small = ConformalCalibrator::from_scores(vec![lo], 0.5).unwrap().predict_set(&p);
        let large = ConformalCalibrator::from_scores(vec![hi], 0.5).unwrap().predict_set(&p);
        prop_assert_eq!(small.labels().to_vec(), common::set_oracle(&p, lo));
        prop_assert!(small.labels().iter().all(|y| large.labels().contains(y)));
    }

    #[test]
    fn prediction_sets_are_sorted_and_unique(labels in prop::collection::vec(0usize..10, 0..20)) {
        let s = PredictionSet::new(labels.clone());
        prop_assert!(s.labels().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(labels.iter().all(|y| s.labels().contains(y)));
    }

    #[test]
    fn breakdown_partitions_cohort(cases in cohort()) {
        let recs: Vec<PatientRecord> = cases
            .iter()
            .enumerate()
            .map(|(i, (set, label, _))| record(i, *label, set.clone(), "F"))
            .collect();
        let c = breakdown(&recs).unwrap();
        prop_assert_eq!(c.total(), recs.len());
        let pairs: Vec<(Vec<usize>, Option<usize>)> = cases.iter().map(|(s, l, _)| (s.clone(), *l)).collect();
        let o = common::breakdown_oracle(&pairs);
        prop_assert_eq!((c.single_correct, c.single_incorrect, c.abstention, c.empty), o);
        if let Some(rate) = c.da_error_rate() {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
    }

    #[test]
    fn set_size_gap_matches_oracle(cases in cohort(), min_group in 1usize..6) {
        let recs: Vec<PatientRecord> = cases
            .iter()
            .enumerate()
            .map(|(i, (set, label, f))| record(i, *label, set.clone(), if *f { "F" } else { "M" }))
            .collect();
        let values: Vec<(String, f64)> = recs.iter().map(|r| (r.sex.clone(), r.set.as_ref().unwrap().size() as f64)).collect();
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &recs {
            *sizes.entry(&r.sex).or_default() += 1;
        }
        let big = sizes.values().filter(|&&n| n >= min_group).count();
        let pooled = big + usize::from(big < sizes.len());
        match fairness_gap(&recs, FairnessMetric::AvgSetSize, GroupField::Sex, min_group) {
            Ok(g) => prop_assert!((g.gap - common::gap_oracle(&values, min_group)).abs() < 1e-12),
            Err(_) => prop_assert!(pooled < 2),
        }
    }

    #[test]
    fn crc_threshold_is_monotone_in_alpha(
        items in prop::collection::vec((prob_vec(3), prop::option::weighted(0.9, 0usize..3)), 5..60),
        a1 in 0.05f64..0.9,
        a2 in 0.05f64..0.9,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let probs: Vec<Vec<f64>> = items.iter().map(|(p, _)| p.clone()).collect();
        let labels: Vec<Option<usize>> = items.iter().map(|(_, y)| *y).collect();
        if let (Ok(strict), Ok(loose)) = (crc_fit(&probs, &labels, lo, 1e-3), crc_fit(&probs, &labels, hi, 1e-3)) {
            prop_assert!(strict.rho_hat >= loose.rho_hat);
            let risk = probs.iter().zip(&labels).map(|(p, y)| miscoverage(&crc_set(p, strict.rho_hat), *y)).sum::<f64>()
                / probs.len() as f64;
            prop_assert!(risk <= lo + 1e-12);
        }
    }

    #[test]
    fn aggregation_ignores_slide_names(
        layout in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = trustkit_core::numerics::Rng::new(seed);
        let mut tiles = Vec::new();
        let mut probs = Vec::new();
        let mut slide_no = 0;
        for (p, slides) in layout.iter().enumerate() {
            for &n in slides {
                for t in 0..n {
                    tiles.push((p, slide_no, t));
                    let x = rng.uniform();
                    probs.push(vec![x, 1.0 - x]);
                }
                slide_no += 1;
            }
        }
        let mut names: Vec<usize> = (0..slide_no).collect();
        rng.shuffle(&mut names);
        let build = |rename: &dyn Fn(usize) -> String| {
            Manifest::new(
                tiles
                    .iter()
                    .map(|&(p, s, t)| TileRecord {
                        tile_id: format!("{s}-{t}"),
                        slide_id: rename(s),
                        patient_id: format!("p{p}"),
                        label: Some(p % 2),
                        sex: "F".into(),
                        race_group: "A".into(),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let plain = aggregate(&probs, &build(&|s| format!("s{s}")), None).unwrap();
        let renamed = aggregate(&probs, &build(&|s| format!("z{}", names[s])), None).unwrap();
        prop_assert_eq!(plain.len(), layout.len());
        for (id, a) in &plain {
            let b = &renamed[id];
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
