use convbasis::rng::SeededRng;
use convbasis::sensitivity::{
    combine, dominates, enumerate_combinations, mask_to_subset, pareto_select, subset_to_mask, CombinationEstimate, LimitPolicy,
    SensitivityRecord,
};

fn records(l: usize, seed: u64) -> (SensitivityRecord, Vec<SensitivityRecord>) {
    let mut rng = SeededRng::new(seed);
    let base = SensitivityRecord { ordinal: 0, acc: 0.8, drop: 0.0, time_s: 100.0, params: 1000, diverged: false };
    let recs = (1..=l)
        .map(|o| {
            let drop = 0.1 * rng.uniform() - 0.02;
            SensitivityRecord {
                ordinal: o,
                acc: 0.8 - drop,
                drop,
                time_s: 90.0 + 15.0 * rng.uniform(),
                params: 800 + rng.below(400) as u64,
                diverged: false,
            }
        })
        .collect();
    (base, recs)
}

/// Definitional estimate: average over layers of member-or-baseline.
fn brute(recs: &[SensitivityRecord], base: &SensitivityRecord, subset: &[usize]) -> (f64, f64, f64) {
    let l = recs.len() as f64;
    let mut t = (0.0, 0.0, 0.0);
    for o in 1..=recs.len() {
        let r = recs.iter().find(|r| r.ordinal == o).unwrap();
        if subset.contains(&o) {
            t.0 += r.drop;
            t.1 += r.time_s;
            t.2 += r.params as f64;
        } else {
            t.1 += base.time_s;
            t.2 += base.params as f64;
        }
    }
    (t.0 / l, t.1 / l, t.2 / l)
}

#[test]
fn combine_matches_brute_force_and_is_linear() {
    let mut rng = SeededRng::new(9);
    for trial in 0..100 {
        let l = 1 + rng.below(20);
        let (base, mut recs) = records(l, trial);
        rng.shuffle(&mut recs);
        let pick = |rng: &mut SeededRng| -> Vec<usize> { (1..=l).filter(|_| rng.bernoulli(0.5)).collect() };
        let (s1, s2) = (pick(&mut rng), pick(&mut rng));
        let e = combine(&recs, &base, &s1).unwrap();
        let (d, t, p) = brute(&recs, &base, &s1);
        assert!((e.est_drop - d).abs() < 1e-12 && (e.est_time - t).abs() < 1e-9 && (e.est_size - p).abs() < 1e-9);
        let union: Vec<usize> = (1..=l).filter(|o| s1.contains(o) || s2.contains(o)).collect();
        let inter: Vec<usize> = (1..=l).filter(|o| s1.contains(o) && s2.contains(o)).collect();
        let c = |s: &[usize]| combine(&recs, &base, s).unwrap().est_drop;
        assert!((c(&s1) + c(&s2) - c(&inter) - c(&union)).abs() < 1e-12);
        let all: Vec<usize> = (1..=l).collect();
        let mean = recs.iter().map(|r| r.drop).sum::<f64>() / l as f64;
        assert!((c(&all) - mean).abs() < 1e-12);
    }
}

fn recursive_subsets(items: &[usize]) -> Vec<Vec<usize>> {
    match items.split_first() {
        None => vec![vec![]],
        Some((&head, rest)) => {
            let tail = recursive_subsets(rest);
            let mut out = tail.clone();
            out.extend(tail.into_iter().map(|mut s| {
                s.insert(0, head);
                s
            }));
            out
        }
    }
}

#[test]
fn exhaustive_enumeration_matches_recursive_generator() {
    let (base, recs) = records(10, 3);
    let mut got: Vec<(Vec<usize>, CombinationEstimate)> =
        enumerate_combinations(&recs, &base, LimitPolicy::Exhaustive).unwrap().into_iter().map(|e| (e.subset(), e)).collect();
    let mut want = recursive_subsets(&(1..=10).collect::<Vec<_>>());
    got.sort_by(|a, b| a.0.cmp(&b.0));
    want.sort();
    assert_eq!(got.len(), 1024);
    for ((subset, e), w) in got.iter().zip(&want) {
        assert_eq!(subset, w);
        let (d, t, _) = brute(&recs, &base, w);
        assert!((e.est_drop - d).abs() < 1e-12 && (e.est_time - t).abs() < 1e-9);
    }
}

#[test]
fn twenty_layers_give_every_subset() {
    let (base, recs) = records(20, 4);
    let all = enumerate_combinations(&recs, &base, LimitPolicy::Exhaustive).unwrap();
    assert_eq!(all.len(), 1 << 20);
}

fn random_estimates(n: usize, seed: u64) -> Vec<CombinationEstimate> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| CombinationEstimate {
            bitmask: rng.next_u64() & 0xfffff,
            est_drop: rng.uniform() * 0.1,
            est_time: 90.0 + 20.0 * rng.uniform(),
            est_size: 0.0,
        })
        .collect()
}

#[test]
fn selection_is_never_dominated() {
    for seed in 0..5 {
        let est = random_estimates(1000, seed);
        let base_time = 105.0;
        let sel = pareto_select(&est, base_time, 6).unwrap();
        assert!(!sel.points.is_empty());
        for p in &sel.points {
            assert!(p.est_time < base_time);
            // O(n^2) reference: no input below the baseline dominates p.
            for q in est.iter().filter(|q| q.est_time < base_time) {
                let dom = q.est_time <= p.est_time && q.est_drop <= p.est_drop && (q.est_time < p.est_time || q.est_drop < p.est_drop);
                assert!(!dom, "{q:?} dominates {p:?}");
                assert_eq!(dom, dominates(q, p));
            }
        }
    }
}

#[test]
fn selection_is_invariant_under_affine_time_rescaling() {
    let est = random_estimates(500, 11);
    let sel = pareto_select(&est, 105.0, 5).unwrap();
    let (a, b) = (4.0, -256.0);
    let scaled: Vec<_> = est.iter().map(|e| CombinationEstimate { est_time: a * e.est_time + b, ..*e }).collect();
    let sel2 = pareto_select(&scaled, a * 105.0 + b, 5).unwrap();
    let masks = |s: &[CombinationEstimate]| s.iter().map(|e| e.bitmask).collect::<Vec<_>>();
    assert_eq!(masks(&sel.points), masks(&sel2.points));
}

#[test]
fn reference_combinations_are_recovered_from_a_cloud() {
    let reference: [(&[usize], f64); 4] =
        [(&[6, 10, 12, 14, 15, 17, 19, 20], 191.5), (&[4, 6, 15, 19, 20], 192.0), (&[12, 15, 20], 192.5), (&[4, 15], 193.0)];
    let mut cloud = Vec::new();
    for (i, (s, t)) in reference.iter().enumerate() {
        let drop = 0.004 - 0.001 * i as f64;
        cloud.push(CombinationEstimate { bitmask: subset_to_mask(s).unwrap(), est_drop: drop, est_time: *t, est_size: 0.0 });
        // Worse neighbours in the same bucket.
        for k in 1..4u64 {
            cloud.push(CombinationEstimate { bitmask: (k << 20) | k, est_drop: drop + 0.01 * k as f64, est_time: t + 0.05 * k as f64, est_size: 0.0 });
        }
    }
    let sel = pareto_select(&cloud, 194.0, 4).unwrap();
    let got: Vec<Vec<usize>> = sel.points.iter().map(|e| mask_to_subset(e.bitmask)).collect();
    let want: Vec<Vec<usize>> = reference.iter().map(|(s, _)| s.to_vec()).collect();
    assert_eq!(got, want);
}
