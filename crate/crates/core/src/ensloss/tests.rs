use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_diff_check, log_softmax_rows};

fn random_cube(rng: &mut impl Rng, b: usize, m: usize, c: usize, spread: f64, source: Source) -> LogProbCube {
    let heads: Vec<Array> = (0..m)
        .map(|_| {
            let logits = Array::new(
                vec![b, c],
                (0..b * c).map(|_| rng.random_range(-spread..spread)).collect(),
            )
            .unwrap();
            log_softmax_rows(&logits, 1.0).unwrap()
        })
        .collect();
    LogProbCube::from_heads(&heads.iter().collect::<Vec<_>>(), source).unwrap()
}

fn cube_from_probs(rows: &[Vec<Vec<f64>>], source: Source) -> LogProbCube {
    // rows[x][j] is a probability vector
    let (b, m, c) = (rows.len(), rows[0].len(), rows[0][0].len());
    let data = rows
        .iter()
        .flat_map(|r| r.iter().flat_map(|p| p.iter().map(|v| v.ln())))
        .collect();
    LogProbCube::new(Array::new(vec![b, m, c], data).unwrap(), source).unwrap()
}

/// Loss and gradient w.r.t. student logits for the given loss builder.
fn loss_and_grad<F>(log_ps: &LogProbCube, build: F) -> (f64, Vec<Array>)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    let leaves: Vec<Var> = (0..log_ps.heads()).map(|j| t.leaf(log_ps.head(j))).collect();
    let lps: Vec<Var> = leaves
        .iter()
        .map(|&v| t.log_softmax_rows(v, 1.0).unwrap())
        .collect();
    let loss = build(&mut t, &lps).unwrap();
    let g = t.backward(loss).unwrap();
    let grads = leaves.iter().map(|&v| g.get(&t, v).unwrap()).collect();
    (t.value(loss).item(), grads)
}

fn max_rel(a: &[Array], b: &[Array]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| rel_error(*p, *q)))
        .fold(0.0, f64::max)
}

fn scheme(name: &str) -> WeightingScheme {
    name.parse().unwrap()
}

#[test]
fn unif_scores_mask_off_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_cube(&mut rng, 2, 2, 3, 1.0, Source::Teacher);
    let s = random_cube(&mut rng, 2, 2, 3, 1.0, Source::Student);
    let f = scheme_f(&scheme("Unif"), &t, &s).unwrap();
    for x in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                for y in 0..3 {
                    let v = f.data()[((x * 2 + i) * 2 + j) * 3 + y];
                    if i == j {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, f64::NEG_INFINITY);
                    }
                }
            }
        }
    }
}

#[test]
fn ent_scores_are_symmetric_for_uniform_teachers() {
    let u = vec![0.25; 4];
    let t = cube_from_probs(&[vec![u.clone(), u.clone(), u.clone()]], Source::Teacher);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_cube(&mut rng, 1, 3, 4, 1.0, Source::Student);
    let f = scheme_f(&scheme("Ent"), &t, &s).unwrap();
    let diag: Vec<f64> = (0..3).map(|i| f.data()[(i * 3 + i) * 4]).collect();
    assert!(diag.iter().all(|&v| v == diag[0]));
}

#[test]
fn disagree_score_vanishes_on_matching_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_cube(&mut rng, 2, 2, 3, 1.0, Source::Teacher);
    let s = LogProbCube::new(t.values().clone(), Source::Student).unwrap();
    let f = scheme_f(&scheme("Disagree"), &t, &s).unwrap();
    for x in 0..2 {
        for i in 0..2 {
            assert_eq!(f.data()[((x * 2 + i) * 2 + i) * 3], 0.0);
            assert!(f.data()[((x * 2 + i) * 2 + (1 - i)) * 3] > 0.0);
        }
    }
}

#[test]
fn unif_weights_are_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_cube(&mut rng, 3, 4, 5, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 3, 4, 5, 2.0, Source::Student);
    for gamma in [1e-3, 1.0, 50.0] {
        let w = scheme_weights(&scheme("Unif").with_gamma(gamma), &t, &s).unwrap();
        for x in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    for y in 0..5 {
                        let expect = if i == j { 0.25 } else { 0.0 };
                        assert_eq!(w.get(x, i, j, y), expect);
                    }
                }
            }
        }
    }
}

#[test]
fn prob_weights_follow_student_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_cube(&mut rng, 2, 3, 4, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 2, 3, 4, 2.0, Source::Student);
    let w = scheme_weights(&scheme("Prob"), &t, &s).unwrap();
    for x in 0..2 {
        for y in 0..4 {
            let total: f64 = (0..3).map(|j| s.row(x, j)[y].exp()).sum();
            for i in 0..3 {
                for j in 0..3 {
                    let expect = s.row(x, j)[y].exp() / total / 3.0;
                    assert!((w.get(x, i, j, y) - expect).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn ent_weights_hand_example() {
    let t = cube_from_probs(
        &[vec![vec![1.0, 1e-300, 1e-300, 1e-300], vec![0.25; 4]]],
        Source::Teacher,
    );
    let s = cube_from_probs(&[vec![vec![0.25; 4], vec![0.25; 4]]], Source::Student);
    let w = scheme_weights(&scheme("Ent"), &t, &s).unwrap();
    // 1 / (1 + e^{-ln 4})
    for y in 0..4 {
        assert!((w.get(0, 0, 0, y) - 0.8).abs() < 1e-12);
        assert!((w.get(0, 1, 1, y) - 0.2).abs() < 1e-12);
    }
}

#[test]
fn all_masked_slice_is_an_error() {
    let f = Array::full(&[1, 2, 2, 3], f64::NEG_INFINITY);
    assert!(matches!(
        compute_weights(&f, Temperature::Soft(1.0)),
        Err(Error::InvalidMask { .. })
    ));
    assert!(compute_weights(&Array::zeros(&[1, 2, 2, 3]), Temperature::Soft(0.0)).is_err());
}

#[test]
fn hard_weights_break_ties_lexicographically() {
    let mut f = Array::zeros(&[1, 2, 2, 2]);
    // y = 0: pairs (0,1) and (1,0) tie at the max
    f.data_mut()[2] = 3.0;
    f.data_mut()[4] = 3.0;
    let w = compute_weights(&f, Temperature::Hard).unwrap();
    assert_eq!(w.get(0, 0, 1, 0), 1.0);
    assert_eq!(w.get(0, 1, 0, 0), 0.0);
    // y = 1: all equal, so (0,0) wins
    assert_eq!(w.get(0, 0, 0, 1), 1.0);
    assert_eq!(w.max_normalization_error(), 0.0);
}

#[test]
fn single_head_reduces_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = random_cube(&mut rng, 4, 1, 5, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 4, 1, 5, 2.0, Source::Student);
    let ce: f64 = (0..4)
        .map(|x| crate::prob::cross_entropy_from_log(t.row(x, 0), s.row(x, 0)))
        .sum::<f64>()
        / 4.0;
    for sc in WeightingScheme::all_variants() {
        let v = ensemble_loss_value(&t, &s, &sc).unwrap();
        assert!((v - ce).abs() < 1e-12, "{sc}: {v} vs {ce}");
    }
}

#[test]
fn unif_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_cube(&mut rng, 2, 2, 3, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 2, 2, 3, 2.0, Source::Student);
    let mut oracle = 0.0;
    for x in 0..2 {
        for j in 0..2 {
            for y in 0..3 {
                oracle -= t.row(x, j)[y].exp() * s.row(x, j)[y];
            }
        }
    }
    oracle /= 2.0 * 2.0;
    let v = ensemble_loss_value(&t, &s, &scheme("Unif")).unwrap();
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn ent_at_infinite_temperature_is_unif() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = random_cube(&mut rng, 3, 3, 5, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 3, 3, 5, 2.0, Source::Student);
    let ent = ensemble_loss_value(&t, &s, &scheme("Ent").with_gamma(f64::INFINITY)).unwrap();
    let unif = ensemble_loss_value(&t, &s, &scheme("Unif")).unwrap();
    assert_eq!(ent, unif);
}

#[test]
fn ent_at_tiny_temperature_selects_one_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = random_cube(&mut rng, 6, 4, 5, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 6, 4, 5, 2.0, Source::Student);
    let w = scheme_weights(&scheme("Ent").with_gamma(1e-6), &t, &s).unwrap();
    for x in 0..6 {
        let best = (0..4).map(|i| w.get(x, i, i, 0)).fold(0.0, f64::max);
        assert!(best > 1.0 - 1e-9);
    }
}

#[test]
fn fast_paths_match_general_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let m = rng.random_range(1..5);
        let t = random_cube(&mut rng, 3, m, 5, 3.0, Source::Teacher);
        let s = random_cube(&mut rng, 3, m, 5, 3.0, Source::Student);
        let gamma = rng.random_range(0.05..2.0);

        let (fv, fg) = loss_and_grad(&s, |tp, v| loss_unif_fast(tp, &t, v));
        let (gv, gg) = loss_and_grad(&s, |tp, v| {
            ensemble_loss(tp, &t, v, &scheme("Unif")).map(|r| r.0)
        });
        assert!((fv - gv).abs() < 1e-12);
        assert!(max_rel(&fg, &gg) < 1e-10);

        let ent = scheme("Ent").with_gamma(gamma);
        let (fv, fg) = loss_and_grad(&s, |tp, v| loss_ent_fast(tp, &t, v, gamma));
        let (gv, gg) = loss_and_grad(&s, |tp, v| ensemble_loss(tp, &t, v, &ent).map(|r| r.0));
        assert!((fv - gv).abs() < 1e-12);
        assert!(max_rel(&fg, &gg) < 1e-10);

        assert!(verify_prob_identity(&t, &s).unwrap() < 1e-10);
    }
}

#[test]
fn prob_with_identical_heads_is_single_head_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t1 = random_cube(&mut rng, 4, 1, 6, 2.0, Source::Teacher);
    let s1 = random_cube(&mut rng, 4, 1, 6, 2.0, Source::Student);
    let rep = |c: &LogProbCube, src| {
        let h = c.head(0);
        LogProbCube::from_heads(&[&h, &h, &h], src).unwrap()
    };
    let (single, _) = loss_and_grad(&s1, |tp, v| loss_prob_fast(tp, &t1, v));
    let s3 = rep(&s1, Source::Student);
    let (triple, _) = loss_and_grad(&s3, |tp, v| loss_prob_fast(tp, &rep(&t1, Source::Teacher), v));
    assert!((single - triple).abs() < 1e-12);
    assert!(verify_prob_identity(&rep(&t1, Source::Teacher), &s3).unwrap() < 1e-10);
}

#[test]
fn prob_identity_single_head_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = random_cube(&mut rng, 4, 1, 6, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 4, 1, 6, 2.0, Source::Student);
    assert!(verify_prob_identity(&t, &s).unwrap() < 1e-14);
}

#[test]
fn bound_ordering_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t1 = random_cube(&mut rng, 3, 1, 4, 2.0, Source::Teacher);
    let s1 = random_cube(&mut rng, 3, 1, 4, 2.0, Source::Student);
    let t = LogProbCube::from_heads(&[&t1.head(0), &t1.head(0)], Source::Teacher).unwrap();
    let s = LogProbCube::from_heads(&[&s1.head(0), &s1.head(0)], Source::Student).unwrap();
    let (a, b) = verify_bound_ordering(&t, &s).unwrap();
    assert!(a.abs() < 1e-12 && b.abs() < 1e-12);

    let eps = 1e-12;
    let one_hot = vec![1.0 - 2.0 * eps, eps, eps];
    let uni = vec![1.0 / 3.0; 3];
    let t = cube_from_probs(&[vec![one_hot.clone(), uni.clone()]], Source::Teacher);
    let s = cube_from_probs(&[vec![uni, one_hot]], Source::Student);
    let (a, b) = verify_bound_ordering(&t, &s).unwrap();
    assert!(a > 0.1, "{a}");
    assert!(b > 0.1, "{b}");
}

fn runner(cases: u32, seed: u8) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]),
    )
}

#[test]
fn weights_are_normalized_for_every_scheme() {
    let schemes = WeightingScheme::all_variants();
    runner(200, 1)
        .run(
            &(any::<u64>(), 0..schemes.len(), 1usize..5, 2usize..7, -6.0f64..3.0),
            |(seed, k, m, c, log_gamma)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_cube(&mut rng, 2, m, c, 4.0, Source::Teacher);
                let s = random_cube(&mut rng, 2, m, c, 4.0, Source::Student);
                let sc = schemes[k].with_gamma(10f64.powf(log_gamma));
                let w = scheme_weights(&sc, &t, &s).unwrap();
                prop_assert!(w.max_normalization_error() < 1e-9);
                prop_assert!(w.values().data().iter().all(|&v| v >= 0.0));
                let mass: f64 = w.student_mass().iter().sum();
                prop_assert!((mass - 1.0).abs() < 1e-9);
                Ok(())
            },
        )
        .unwrap();
}

#[test]
fn bound_slacks_are_nonnegative() {
    runner(300, 2)
        .run(&(any::<u64>(), prop::sample::select(vec![2usize, 4, 8])), |(seed, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(2..10);
            let t = random_cube(&mut rng, 1, m, c, 5.0, Source::Teacher);
            let s = random_cube(&mut rng, 1, m, c, 5.0, Source::Student);
            let (a, b) = verify_bound_ordering(&t, &s).unwrap();
            prop_assert!(a >= -1e-10 && b >= -1e-10);
            Ok(())
        })
        .unwrap();
}

#[test]
fn ent_weights_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t = random_cube(&mut rng, 4, 3, 5, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 4, 3, 5, 2.0, Source::Student);
    let sc = scheme("Ent").with_gamma(0.3);
    let f = scheme_f(&sc, &t, &s).unwrap();
    let shifted = f.map(|v| v - 2.75);
    let a = compute_weights(&f, sc.temperature()).unwrap();
    let b = compute_weights(&shifted, sc.temperature()).unwrap();
    assert!(a.values().max_abs_diff(b.values()) < 1e-12);
}

#[test]
fn weights_carry_no_gradient() {
    // EntSt weights depend on the student; autodiff must match finite
    // differences of the frozen-weight loss, not of the recomputed one.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let t = random_cube(&mut rng, 3, 3, 4, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 3, 3, 4, 2.0, Source::Student);
    let sc = scheme("EntSt").with_gamma(0.2);
    let params: Vec<Array> = (0..3).map(|j| s.head(j)).collect();
    let frozen = finite_diff_check(&params, 1e-6, |tp, v| {
        let lps = v
            .iter()
            .map(|&x| tp.log_softmax_rows(x, 1.0))
            .collect::<Result<Vec<_>>>()?;
        ensemble_loss(tp, &t, &lps, &sc).map(|r| r.0)
    })
    .unwrap();
    assert!(frozen.passes(1e-5), "{frozen:?}");

    let (_, ad) = loss_and_grad(&s, |tp, v| ensemble_loss(tp, &t, v, &sc).map(|r| r.0));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        for k in 0..params[j].len() {
            let eval = |delta: f64| {
                let mut heads = params.clone();
                heads[j].data_mut()[k] += delta;
                let lp: Vec<Array> = heads.iter().map(|a| log_softmax_rows(a, 1.0).unwrap()).collect();
                let cube = LogProbCube::from_heads(&lp.iter().collect::<Vec<_>>(), Source::Student).unwrap();
                ensemble_loss_value(&t, &cube, &sc).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((fd - ad[j].data()[k]).abs());
        }
    }
    assert!(worst > 1e-4, "recomputed weights should change the derivative");
}

#[test]
fn scheme_names_round_trip() {
    for sc in WeightingScheme::all_variants() {
        assert_eq!(sc.name().parse::<WeightingScheme>().unwrap(), sc);
    }
    let err = "Bogus".parse::<WeightingScheme>().unwrap_err().to_string();
    assert!(err.contains("LowVarTeacher") && err.contains("Unif"));
    assert_eq!(scheme("Prob-aligned").name(), "Prob-aligned");
    assert!(scheme("ProbMax").temperature() == Temperature::Hard);
}

#[test]
fn loss_paths() {
    assert_eq!(loss_path(&scheme("Unif")), LossPath::UnifFast);
    assert_eq!(loss_path(&scheme("Prob")), LossPath::ProbFast);
    assert_eq!(loss_path(&scheme("Prob").with_gamma(0.5)), LossPath::General);
    assert_eq!(loss_path(&scheme("Prob-aligned")), LossPath::General);
    assert_eq!(loss_path(&scheme("Ent")), LossPath::EntFast);
    assert_eq!(loss_path(&scheme("Disagree")), LossPath::General);
}

#[test]
fn weight_mass_matches_cube() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let t = random_cube(&mut rng, 5, 3, 4, 2.0, Source::Teacher);
    let s = random_cube(&mut rng, 5, 3, 4, 2.0, Source::Student);
    for sc in WeightingScheme::all_variants() {
        let fast = weight_mass(&sc, &t, &s).unwrap();
        let full = scheme_weights(&sc, &t, &s).unwrap().student_mass();
        for (a, b) in fast.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12, "{sc}");
        }
    }
}

#[test]
fn divergence_guard() {
    assert!(check_divergence(3.0, DIVERGENCE_THRESHOLD, "Unif").is_ok());
    let e = check_divergence(2e4, DIVERGENCE_THRESHOLD, "ProbMax").unwrap_err();
    assert!(matches!(e, Error::Divergence(_)));
    assert!(e.to_string().contains("ProbMax"));
    assert!(check_divergence(f64::NAN, DIVERGENCE_THRESHOLD, "Ent").is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t = random_cube(&mut rng, 2, 2, 3, 1.0, Source::Teacher);
    let s = random_cube(&mut rng, 2, 3, 3, 1.0, Source::Student);
    assert!(matches!(scheme_f(&scheme("Unif"), &t, &s), Err(Error::Shape { .. })));
    let bad = Array::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
    assert!(LogProbCube::new(bad, Source::Teacher).is_err());
}
