use proptest::prelude::*;
use rand::Rng;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use super::checkpoint::{from_bytes, to_bytes};
use super::*;
use crate::prob::entropy_from_log;
use crate::tensor::finite_diff_check;

fn small_dims(m: usize) -> ModelDims {
    ModelDims {
        input_dim: 5,
        encoder_hidden: vec![7],
        repr_dim: 6,
        head_hidden: vec![4],
        embed_dim: 3,
        codes: 4,
        heads: m,
    }
}

fn batch(b: usize, dim: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(
        vec![b, dim],
        (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn student_values(params: &ModelParams, x: &Array, j: usize, tau: f64) -> Array {
    let mut t = Tape::new();
    let p = BoundParams::bind(&mut t, params, true);
    let xv = t.constant(x.clone());
    let lp = student_logprobs(&mut t, &p, xv, j, tau).unwrap();
    t.value(lp).clone()
}

/// Identity encoder and head over `R^2`, so the embedding equals the input.
fn identity_model(codebook: Array) -> ModelParams {
    let dims = ModelDims {
        input_dim: 2,
        encoder_hidden: vec![],
        repr_dim: 2,
        head_hidden: vec![],
        embed_dim: 2,
        codes: codebook.rows(),
        heads: 1,
    };
    let id = || Linear {
        weight: Array::identity(2),
        bias: Array::zeros(&[2]),
    };
    ModelParams {
        dims,
        encoder: Mlp { layers: vec![id()] },
        heads: vec![Mlp { layers: vec![id()] }],
        codebooks: vec![codebook],
    }
}

#[test]
fn identical_codes_give_uniform_predictions() {
    let mut params = init_params(3, &small_dims(2)).unwrap();
    params.codebooks[1] = Array::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap();
    let lp = student_values(&params, &batch(5, 5, 1), 1, 0.1);
    for &v in lp.data() {
        assert!((v + 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn high_temperature_approaches_uniform() {
    let params = init_params(4, &small_dims(1)).unwrap();
    let x = batch(6, 5, 2);
    let dev = |tau: f64| {
        student_values(&params, &x, 0, tau)
            .data()
            .iter()
            .map(|v| (v + 4f64.ln()).abs())
            .fold(0.0, f64::max)
    };
    assert!(dev(1e6) < 1e-5);
    assert!(dev(1e6) < dev(1.0));
}

#[test]
fn hand_built_model_matches_scalar_oracle() {
    let codebook = Array::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![-2.0, 0.5]]).unwrap();
    let params = identity_model(codebook.clone());
    let x = Array::from_rows(&[vec![3.0, 4.0], vec![-1.0, 0.25]]).unwrap();
    let tau = 0.1;
    let lp = student_values(&params, &x, 0, tau);
    for r in 0..2 {
        let (ex, ey) = (x.get2(r, 0), x.get2(r, 1));
        let en = (ex * ex + ey * ey).sqrt();
        let logits: Vec<f64> = (0..3)
            .map(|y| {
                let (mx, my) = (codebook.get2(y, 0), codebook.get2(y, 1));
                let mn = (mx * mx + my * my).sqrt();
                (ex * mx + ey * my) / (en * mn) / tau
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for y in 0..3 {
            assert!((lp.get2(r, y) - (logits[y] - z.ln())).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_embedding_is_degenerate() {
    let params = identity_model(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let mut t = Tape::new();
    let p = BoundParams::bind(&mut t, &params, true);
    let x = t.constant(Array::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let err = student_logprobs(&mut t, &p, x, 0, 0.1).unwrap_err();
    assert!(matches!(err, Error::Degenerate { .. }), "{err}");
}

#[test]
fn teacher_without_renorm_matches_student() {
    let params = init_params(5, &small_dims(3)).unwrap();
    let teacher = TeacherState::from_student(&params, 0.996, None).unwrap();
    let x = batch(4, 5, 3);
    let mut t = Tape::new();
    let tp = BoundParams::bind(&mut t, &teacher.params, false);
    let xv = t.constant(x.clone());
    for j in 0..3 {
        let lt = teacher_logprobs(&mut t, &tp, xv, j, 0.1, TeacherRenorm::default(), None).unwrap();
        assert_eq!(t.value(lt), &student_values(&params, &x, j, 0.1));
    }
}

#[test]
fn teacher_leaves_receive_zero_gradient() {
    let params = init_params(6, &small_dims(2)).unwrap();
    let x = batch(4, 5, 4);
    let mut t = Tape::new();
    let sp = BoundParams::bind(&mut t, &params, true);
    let tp = BoundParams::bind(&mut t, &params, true);
    let xv = t.constant(x);
    let ls = student_logprobs(&mut t, &sp, xv, 0, 0.1).unwrap();
    let lt = teacher_logprobs(&mut t, &tp, xv, 0, 0.05, TeacherRenorm::default(), None).unwrap();
    let pt = t.exp(lt).unwrap();
    let prod = t.mul(pt, ls).unwrap();
    let loss = t.sum(prod).unwrap();
    let g = t.backward(loss).unwrap();
    for v in tp.all() {
        assert!(g.get(&t, v).unwrap().data().iter().all(|&x| x == 0.0));
    }
    let student_grad: f64 = sp
        .all()
        .iter()
        .map(|&v| g.get(&t, v).unwrap().data().iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    assert!(student_grad > 0.0);
}

#[test]
fn sinkhorn_teacher_keeps_uniform_predictions() {
    let mut params = init_params(7, &small_dims(1)).unwrap();
    params.codebooks[0] = Array::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
    let mut t = Tape::new();
    let tp = BoundParams::bind(&mut t, &params, false);
    let xv = t.constant(batch(6, 5, 5));
    let renorm = TeacherRenorm {
        mode: Renorm::Sinkhorn,
        sinkhorn_iters: 3,
    };
    let lt = teacher_logprobs(&mut t, &tp, xv, 0, 0.05, renorm, None).unwrap();
    for &v in t.value(lt).data() {
        assert!((v + 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn centering_requires_centers() {
    let cos = Array::from_rows(&[vec![0.1, 0.2]]).unwrap();
    let renorm = TeacherRenorm {
        mode: Renorm::Center,
        sinkhorn_iters: 3,
    };
    assert!(matches!(
        renormalize_teacher(&cos, 0, 0.1, renorm, None),
        Err(Error::Config(_))
    ));
    let c = CenterState::new(2, 0.9).unwrap();
    let lp = renormalize_teacher(&cos, 0, 0.1, renorm, Some(&[c])).unwrap();
    assert_eq!(lp, log_softmax_rows(&cos, 0.1).unwrap());
}

#[test]
fn ema_endpoints_are_bit_exact() {
    let student = init_params(1, &small_dims(2)).unwrap();
    let other = init_params(2, &small_dims(2)).unwrap();
    let mut teacher = TeacherState::from_student(&other, 0.996, None).unwrap();
    ema_update(&mut teacher, &student, 1.0).unwrap();
    assert_eq!(teacher.params, other);
    ema_update(&mut teacher, &student, 0.0).unwrap();
    assert_eq!(teacher.params, student);
}

#[test]
fn ema_scalar_example() {
    let eta = 0.996;
    let mut teacher_val = 1.0;
    teacher_val = eta * teacher_val + (1.0 - eta) * 0.0;
    assert_eq!(teacher_val, 0.996);

    let dims = small_dims(1);
    let mut student = init_params(1, &dims).unwrap();
    let mut teacher = TeacherState::from_student(&student, eta, None).unwrap();
    for t in teacher.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 1.0);
    }
    for t in student.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    ema_update(&mut teacher, &student, eta).unwrap();
    for (_, t) in teacher.params.tensors() {
        assert!(t.data().iter().all(|&x| x == 0.996));
    }
}

#[test]
fn ema_rejects_bad_inputs() {
    let a = init_params(1, &small_dims(1)).unwrap();
    let b = init_params(1, &small_dims(2)).unwrap();
    let mut teacher = TeacherState::from_student(&a, 0.9, None).unwrap();
    assert!(ema_update(&mut teacher, &b, 0.5).is_err());
    assert!(ema_update(&mut teacher, &a, 1.5).is_err());
}

#[test]
fn ema_is_a_contraction() {
    let student = init_params(1, &small_dims(2)).unwrap();
    let mut teacher = TeacherState::from_student(&init_params(9, &small_dims(2)).unwrap(), 0.9, None)
        .unwrap();
    let dist = |t: &TeacherState| {
        t.params
            .tensors()
            .iter()
            .zip(student.tensors())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    };
    let mut prev = dist(&teacher);
    for eta in [0.99, 0.9, 0.5, 0.999, 0.1] {
        ema_update(&mut teacher, &student, eta).unwrap();
        let d = dist(&teacher);
        assert!(d <= prev);
        prev = d;
    }
}

#[test]
fn init_is_deterministic_and_heads_differ() {
    let dims = small_dims(3);
    assert_eq!(init_params(11, &dims).unwrap(), init_params(11, &dims).unwrap());
    assert_ne!(init_params(11, &dims).unwrap(), init_params(12, &dims).unwrap());
    let p = init_params(11, &dims).unwrap();
    let w1 = &p.heads[0].layers[0].weight;
    let w2 = &p.heads[1].layers[0].weight;
    assert!(w1.max_abs_diff(w2) > 0.0);
    // a head does not depend on how many heads there are
    let p1 = init_params(11, &small_dims(1)).unwrap();
    assert_eq!(p1.heads[0], p.heads[0]);
    assert_eq!(p1.encoder, p.encoder);
}

#[test]
fn init_allocates_paper_scale_heads() {
    let dims = ModelDims {
        input_dim: 32,
        encoder_hidden: vec![64],
        repr_dim: 32,
        head_hidden: vec![64, 64],
        embed_dim: 256,
        codes: 1024,
        heads: 16,
    };
    let p = init_params(0, &dims).unwrap();
    assert_eq!(p.codebooks.len(), 16);
    assert_eq!(p.codebooks[15].shape(), &[1024, 256]);
}

#[test]
fn invalid_dims_are_rejected() {
    let mut d = small_dims(1);
    d.codes = 1;
    assert!(init_params(0, &d).is_err());
    let mut d = small_dims(1);
    d.heads = 0;
    assert!(init_params(0, &d).is_err());
}

#[test]
fn encoder_gradient_collects_every_head() {
    let params = init_params(13, &small_dims(3)).unwrap();
    let x = batch(4, 5, 6);
    let encoder_grad = |active: &[usize]| {
        let mut t = Tape::new();
        let p = BoundParams::bind(&mut t, &params, true);
        let xv = t.constant(x.clone());
        let z = encode(&mut t, &p, xv).unwrap();
        let mut total = None;
        for &j in active {
            let lp = head_logprobs(&mut t, &p, z, j, 0.1).unwrap();
            let s = t.sum(lp).unwrap();
            total = Some(match total {
                None => s,
                Some(acc) => t.add(acc, s).unwrap(),
            });
        }
        let g = t.backward(total.unwrap()).unwrap();
        g.get(&t, p.encoder[0].0).unwrap()
    };
    let all = encoder_grad(&[0, 1, 2]);
    let partial = encoder_grad(&[0, 1]);
    assert!(all.max_abs_diff(&partial) > 1e-8);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let params = init_params(14, &small_dims(2)).unwrap();
    let x = batch(3, 5, 7);
    let tensors: Vec<Array> = params.tensors().into_iter().map(|(_, a)| a.clone()).collect();
    let check = finite_diff_check(&tensors, 1e-6, |t, leaves| {
        let mut p = params.clone();
        for (slot, &v) in p.tensors_mut().into_iter().zip(leaves) {
            *slot = t.value(v).clone();
        }
        let bound = BoundParams::from_leaves(&p, leaves);
        let xv = t.constant(x.clone());
        let z = encode(t, &bound, xv)?;
        let a = head_logprobs(t, &bound, z, 0, 0.5)?;
        let b = head_logprobs(t, &bound, z, 1, 0.5)?;
        let e = t.exp(b)?;
        let prod = t.mul(e, a)?;
        t.sum(prod)
    })
    .unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

fn sample_ckpt(center: bool) -> Checkpoint {
    let student = init_params(21, &small_dims(2)).unwrap();
    let mut teacher = TeacherState::from_student(&init_params(22, &small_dims(2)).unwrap(), 0.998, center.then_some(0.9))
        .unwrap();
    if let Some(cs) = teacher.centers.as_mut() {
        cs[1].center[2] = 0.125;
    }
    Checkpoint {
        student,
        teacher,
        meta: CheckpointMeta {
            step: 42,
            scheme: "Ent".into(),
            seeds: Seeds {
                init: 21,
                data: 3,
                views: 4,
            },
        },
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for center in [false, true] {
        let ckpt = sample_ckpt(center);
        let path = dir.path().join("a.ensd");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.student.dims, ckpt.student.dims);
        assert_eq!(back.teacher.momentum, 0.998);
        assert_eq!(back.teacher.centers.is_some(), center);
        for ((_, a), (_, b)) in back.student.tensors().iter().zip(ckpt.student.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1e-30));
            }
        }
        // save -> load -> save is byte-identical
        let path2 = dir.path().join("b.ensd");
        save_checkpoint(&back, &path2).unwrap();
        let reloaded = load_checkpoint(&path2).unwrap();
        save_checkpoint(&reloaded, dir.path().join("c.ensd")).unwrap();
        assert_eq!(
            std::fs::read(&path2).unwrap(),
            std::fs::read(dir.path().join("c.ensd")).unwrap()
        );
    }
}

#[test]
fn checkpoint_third_rounds_to_f32() {
    let mut ckpt = sample_ckpt(false);
    ckpt.student.codebooks[0].data_mut()[0] = 1.0 / 3.0;
    let back = from_bytes(&to_bytes(&ckpt).unwrap()).unwrap();
    let v = back.student.codebooks[0].data()[0];
    assert_eq!(v, (1.0f64 / 3.0) as f32 as f64);
    assert!(((v - 1.0 / 3.0) / (1.0 / 3.0)).abs() < 1e-7);
}

#[test]
fn checkpoint_corruption_is_reported() {
    let bytes = to_bytes(&sample_ckpt(true)).unwrap();
    let fmt = |b: &[u8]| match from_bytes(b) {
        Err(Error::Format { reason, .. }) => reason,
        other => panic!("expected format error, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(fmt(&bad).contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(fmt(&bad).contains("version"));
    assert!(fmt(&bytes[..bytes.len() - 3]).contains("truncated"));
    assert!(fmt(&bytes[..10]).contains("short"));
    let mut long = bytes.clone();
    long.push(0);
    assert!(fmt(&long).contains("trailing"));
    let mut bad = bytes.clone();
    bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(fmt(&bad).contains("header length"));
}

#[test]
fn load_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ensd");
    std::fs::write(&path, b"NOPE0000000000000000").unwrap();
    match load_checkpoint(&path) {
        Err(Error::Format { path: p, .. }) => assert!(p.ends_with("bad.ensd")),
        other => panic!("{other:?}"),
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]),
    )
}

#[test]
fn student_rows_are_log_distributions() {
    runner(32)
        .run(&(any::<u64>(), 0.01f64..10.0), |(seed, tau)| {
            let params = init_params(seed, &small_dims(2)).unwrap();
            let lp = student_values(&params, &batch(3, 5, seed ^ 1), 1, tau);
            for r in 0..lp.rows() {
                let lse = crate::tensor::kernels::logsumexp(lp.row(r).iter().copied());
                prop_assert!(lse.abs() < 1e-12);
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn lower_temperature_lowers_entropy() {
    runner(64)
        .run(
            &(prop::collection::vec(-1.0f64..1.0, 2..12), 0.05f64..5.0, 0.1f64..0.95),
            |(logits, tau, shrink)| {
                let spread = logits.iter().cloned().fold(f64::MIN, f64::max)
                    - logits.iter().cloned().fold(f64::MAX, f64::min);
                prop_assume!(spread > 1e-3);
                let row = Array::from_rows(&[logits]).unwrap();
                let h = |t: f64| entropy_from_log(log_softmax_rows(&row, t).unwrap().row(0));
                prop_assert!(h(tau * shrink) < h(tau));
                Ok(())
            },
        )
        .unwrap();
}
