#![allow(clippy::needless_range_loop)]

use moeits_core::checkpoint::resolve_expert_blocks;
use moeits_core::pruner::{compute_nmi_matrices, plan_from_matrices, NmiMatrix};
use moeits_core::sim::Directive;
use moeits_core::{
    build_nmi_matrix, expert_redundancy, gen_toy, load_tensor_f64, make_plan, open_checkpoint,
    prune_block, redundancy_limit, ToySpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Type-7 quantile in its 1-based textbook form.
fn oracle_quantile(values: &[f64], p: f64) -> f64 {
    let mut x = values.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (x.len() - 1) as f64 * p + 1.0;
    let f = h.floor();
    let lo = x[f as usize - 1];
    let hi = if (f as usize) < x.len() { x[f as usize] } else { lo };
    lo + (h - f) * (hi - lo)
}

struct OracleResult {
    kept: Vec<usize>,
    order: Vec<(usize, usize, f64)>,
}

/// Selection read literally: fixed limit from the initial matrix, then
/// repeatedly find the most similar pair, delete the row and column of
/// whichever member is more redundant with the rest.
fn oracle_prune(values: &[Vec<f64>], tau: f64, min_keep: usize) -> OracleResult {
    let e = values.len();
    let mut upper = Vec::new();
    for i in 0..e {
        for j in i + 1..e {
            upper.push(values[i][j]);
        }
    }
    let mean = upper.iter().sum::<f64>() / upper.len() as f64;
    let iqr = oracle_quantile(&upper, 0.75) - oracle_quantile(&upper, 0.25);
    let limit = mean + iqr * tau;

    let mut labels: Vec<usize> = (0..e).collect();
    let mut m: Vec<Vec<f64>> = values.to_vec();
    let mut order = Vec::new();
    while labels.len() > min_keep {
        let n = labels.len();
        // (value, row, col), best = largest value then smallest (row, col)
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let (r, c) = (a.min(b), a.max(b));
                let v = m[a][b];
                let better = match best {
                    None => true,
                    Some((bv, br, bc)) => v > bv || (v == bv && (r, c) < (br, bc)),
                };
                if better {
                    best = Some((v, r, c));
                }
            }
        }
        let (v, a, b) = best.unwrap();
        if v <= limit {
            break;
        }
        let row_mean = |r: usize| -> f64 {
            let s: f64 = (0..n).filter(|&k| k != r).map(|k| m[r][k]).sum();
            s / (n - 1) as f64
        };
        let (ma, mb) = (row_mean(a), row_mean(b));
        let (del, keep) = if ma > mb {
            (a, b)
        } else if mb > ma {
            (b, a)
        } else if labels[a] > labels[b] {
            (a, b)
        } else {
            (b, a)
        };
        order.push((labels[del], labels[keep], v));
        labels.remove(del);
        m.remove(del);
        for row in &mut m {
            row.remove(del);
        }
    }
    OracleResult { kept: labels, order }
}

fn random_symmetric(rng: &mut ChaCha8Rng, e: usize, dyadic: bool) -> Vec<Vec<f64>> {
    let mut v = vec![vec![1.0; e]; e];
    for i in 0..e {
        for j in i + 1..e {
            let x = if dyadic {
                rng.random_range(0..16) as f64 / 16.0
            } else {
                rng.random_range(0.0..1.0)
            };
            v[i][j] = x;
            v[j][i] = x;
        }
    }
    v
}

#[test]
fn prune_block_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut trials = 0;
    let mut with_removals = 0;
    for t in 0..160 {
        let e = rng.random_range(2..=8);
        let values = random_symmetric(&mut rng, e, t % 2 == 0);
        let m = NmiMatrix::from_values(0, values.clone()).unwrap();
        for tau in [0.0, 0.5, 1.25, 5.0] {
            let min_keep = rng.random_range(1..=e.min(3));
            let plan = prune_block(&m, tau, min_keep).unwrap();
            let oracle = oracle_prune(&values, tau, min_keep);
            assert_eq!(plan.kept, oracle.kept, "e={e} tau={tau} {values:?}");
            let order: Vec<(usize, usize, f64)> = plan
                .removal_order
                .iter()
                .map(|r| (r.removed, r.partner, r.nmi))
                .collect();
            assert_eq!(order, oracle.order, "e={e} tau={tau} {values:?}");
            let rho = plan.rho.unwrap();
            assert!(plan.removal_order.iter().all(|r| r.nmi > rho));
            assert!(plan.kept.len() >= min_keep);
            trials += 1;
            with_removals += usize::from(!order.is_empty());
        }
    }
    assert!(trials >= 500);
    assert!(with_removals > 100, "oracle comparison exercised too few removals");
}

#[test]
fn limit_matches_oracle_quantiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let e = rng.random_range(2..=10);
        let values = random_symmetric(&mut rng, e, false);
        let m = NmiMatrix::from_values(0, values.clone()).unwrap();
        let upper: Vec<f64> = (0..e)
            .flat_map(|i| (i + 1..e).map(move |j| (i, j)))
            .map(|(i, j)| values[i][j])
            .collect();
        let mean = upper.iter().sum::<f64>() / upper.len() as f64;
        let iqr = oracle_quantile(&upper, 0.75) - oracle_quantile(&upper, 0.25);
        let tau = rng.random_range(0.0..3.0);
        assert!((redundancy_limit(&m, tau).unwrap() - (mean + iqr * tau)).abs() < 1e-12);
    }
}

#[test]
fn hand_limit_example() {
    let v = vec![
        vec![1.0, 0.2, 0.4],
        vec![0.2, 1.0, 0.9],
        vec![0.4, 0.9, 1.0],
    ];
    assert!((oracle_quantile(&[0.2, 0.4, 0.9], 0.25) - 0.3).abs() < 1e-12);
    assert!((oracle_quantile(&[0.2, 0.4, 0.9], 0.75) - 0.65).abs() < 1e-12);
    let m = NmiMatrix::from_values(0, v).unwrap();
    assert!((redundancy_limit(&m, 1.0f64).unwrap() - 0.85).abs() < 1e-12);
}

fn toy(dir: &std::path::Path, seed: u64, layers: Vec<Vec<Directive>>, e: usize) -> moeits_core::ModelManifest {
    let mut spec = ToySpec::new(layers.len(), e, 2, 16, 32).with_seed(seed);
    spec.redundancy = layers;
    gen_toy(&spec, dir).unwrap()
}

#[test]
fn duplicated_expert_gives_exact_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 1, vec![vec![Directive::Duplicate { from: 0, to: 1 }]], 4);
    let block = &resolve_expert_blocks(&m).unwrap()[0];
    let nm = build_nmi_matrix::<f64>(block, &m, 64).unwrap();
    assert_eq!(nm.values[0][1], 1.0);
    assert_eq!(nm.values[1][0], 1.0);
    for i in 0..4 {
        for j in 0..4 {
            if i != j && (i, j) != (0, 1) && (i, j) != (1, 0) {
                assert!(nm.values[i][j] < 1.0);
            }
        }
    }
    assert_eq!(nm.pair_evaluations, 6);
}

#[test]
fn two_identical_experts() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 2, vec![vec![Directive::Duplicate { from: 1, to: 0 }]], 2);
    let block = &resolve_expert_blocks(&m).unwrap()[0];
    let nm = build_nmi_matrix::<f64>(block, &m, 64).unwrap();
    assert_eq!(nm.values, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    assert_eq!(nm.pair_evaluations, 1);
}

#[test]
fn matrix_entries_match_per_pair_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 3, vec![vec![]], 8);
    let block = &resolve_expert_blocks(&m).unwrap()[0];
    let nm = build_nmi_matrix::<f64>(block, &m, 64).unwrap();
    assert_eq!(nm.pair_evaluations, 28);
    let experts: Vec<Vec<Vec<f64>>> = block
        .expert_tensor_names
        .iter()
        .map(|row| row.iter().map(|n| load_tensor_f64(&m, n).unwrap()).collect())
        .collect();
    for i in 0..8 {
        assert_eq!(nm.values[i][i], 1.0);
        for j in 0..8 {
            assert_eq!(nm.values[i][j], nm.values[j][i]);
            assert!((0.0..=1.0).contains(&nm.values[i][j]));
            if i < j {
                let r = expert_redundancy::<f64, _>(&experts[i], &experts[j], 64).unwrap();
                assert_eq!(nm.values[i][j], r.mean);
            }
        }
    }
}

#[test]
fn f32_matrix_tracks_f64() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 4, vec![vec![Directive::Duplicate { from: 2, to: 3 }]], 4);
    let block = &resolve_expert_blocks(&m).unwrap()[0];
    let a = build_nmi_matrix::<f64>(block, &m, 64).unwrap();
    let b = build_nmi_matrix::<f32>(block, &m, 64).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((a.values[i][j] - b.values[i][j] as f64).abs() < 1e-3);
        }
    }
    assert_eq!(b.values[2][3], 1.0);
}

#[test]
fn tau_zero_drops_one_duplicate_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(
        dir.path(),
        5,
        vec![
            vec![Directive::Duplicate { from: 1, to: 4 }],
            vec![Directive::Duplicate { from: 0, to: 2 }],
        ],
        6,
    );
    let plan = make_plan(&m, 0.0, 64, None).unwrap();
    assert_eq!(plan.layers[0].removed, vec![4]);
    assert_eq!(plan.layers[1].removed, vec![2]);
    assert_eq!(plan.min_keep, 2);
}

#[test]
fn huge_tau_removes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(
        dir.path(),
        6,
        vec![vec![Directive::Duplicate { from: 1, to: 2 }], vec![]],
        4,
    );
    let plan = make_plan(&m, 1e6, 64, None).unwrap();
    assert_eq!(plan.total_removed(), 0);
}

#[test]
fn layers_are_planned_independently() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(
        dir.path(),
        7,
        vec![
            vec![Directive::Duplicate { from: 0, to: 1 }],
            vec![Directive::Duplicate { from: 2, to: 3 }],
        ],
        4,
    );
    let plan = make_plan(&m, 0.0, 64, Some(1)).unwrap();
    assert_eq!(plan.layers[0].removal_order[0].removed, 1);
    assert_eq!(plan.layers[1].removal_order[0].removed, 3);
    assert_ne!(plan.layers[0].kept, plan.layers[1].kept);
}

#[test]
fn tau_monotone_over_random_toys() {
    let taus = [0.0, 0.25, 0.5, 1.0, 1.25, 2.5, 5.0];
    for seed in 0..20u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..3)
            .map(|_| {
                let a = rng.random_range(0..6);
                let b = (a + rng.random_range(1..6)) % 6;
                vec![Directive::Interpolate {
                    source: a,
                    target: b,
                    lambda: rng.random_range(0.3..1.0),
                }]
            })
            .collect();
        let m = toy(dir.path(), seed, layers, 6);
        let blocks = resolve_expert_blocks(&m).unwrap();
        let matrices = compute_nmi_matrices(&m, &blocks, 64).unwrap();
        let kept: Vec<usize> = taus
            .iter()
            .map(|&t| {
                plan_from_matrices(&matrices, t, 64, 1, String::new())
                    .unwrap()
                    .total_kept()
            })
            .collect();
        assert!(kept.windows(2).all(|w| w[0] <= w[1]), "seed {seed}: {kept:?}");
        let floor_ok = matrices.iter().all(|mx| {
            let p = prune_block(mx, 0.0, 1).unwrap();
            p.removal_order.len() < mx.size()
        });
        assert!(floor_ok);
    }
}

#[test]
fn plan_bytes_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 9, vec![vec![Directive::Duplicate { from: 0, to: 3 }], vec![]], 6);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| make_plan(&m, 0.5, 64, None).unwrap().to_json_bytes())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
    let reopened = open_checkpoint(dir.path()).unwrap();
    assert_eq!(make_plan(&reopened, 0.5, 64, None).unwrap().to_json_bytes(), one);
}

#[test]
fn plan_json_roundtrip_is_exact() {
    for seed in 0..10 {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::new(3, 7, 2, 8, 16).with_seed(300 + seed).with_every_layer(vec![
            Directive::Interpolate { source: 0, target: 4, lambda: 0.7 },
        ]);
        let m = gen_toy(&spec, dir.path()).unwrap();
        let plan = make_plan(&m, 0.3, 64, None).unwrap();
        let back = moeits_core::PruningPlan::from_json_bytes(&plan.to_json_bytes()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_json_bytes(), plan.to_json_bytes());
    }
}
