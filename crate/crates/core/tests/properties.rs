use mvfuse::autodiff::{self, Tape};
use mvfuse::branch::{sample_branch, Branch, Stage, StageSchedule, Thresholds};
use mvfuse::config::RunConfig;
use mvfuse::datagen::{length_align, noise_replace, quantize, Codebook, MultiViewExample};
use mvfuse::gradprobe::{
    corrected_gradient, cosine, deconflict, dot, gate_target, norm, GradSnapshot,
};
use mvfuse::gsgn::{self, GateConfig};
use mvfuse::model::ModelConfig;
use mvfuse::params::ParamSet;
use mvfuse::trainer::{average_checkpoints, Checkpoint, CheckpointMeta};
use mvfuse::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_pair(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_dim).prop_flat_map(|d| {
        (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )
    })
}

fn nonzero(v: &[f64]) -> bool {
    norm(v) > 1e-6
}

proptest! {
    #[test]
    fn sigmoid_strictly_inside_unit_interval(x in prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL) {
        let s = autodiff::sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
    }

    #[test]
    fn gates_with_unit_scale_stay_open(seed in 0u64..1000, spread in 0.1f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { hidden_dim: 4, fbank_dim: 3, unit_dim: 2, ..ModelConfig::default() };
        let mut params = ParamSet::new();
        gsgn::init_fusion(&cfg, &mut rng, &mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xf = tape.input(Tensor::randn(&[5, 3], spread, &mut rng));
        let xu = tape.input(Tensor::randn(&[5, 2], spread, &mut rng));
        let gc = GateConfig { scale: 1.0, ..GateConfig::default() };
        let g = gsgn::compute_gates(&mut tape, &bound, xf, xu, &gc).unwrap();
        for v in tape.value(g.g_fbank).data().iter().chain(tape.value(g.g_unit).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn fuse_is_linear_in_each_view(seed in 0u64..1000, alpha in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [3, 4];
        let gf = Tensor::uniform(&shape, 0.0, 2.0, &mut rng);
        let gu = Tensor::uniform(&shape, 0.0, 2.0, &mut rng);
        let x = Tensor::randn(&shape, 1.0, &mut rng);
        let y = Tensor::randn(&shape, 1.0, &mut rng);
        let run = |xs: &Tensor, ys: &Tensor| {
            let mut tape = Tape::new();
            let g = gsgn::GateOutput {
                g_fbank: tape.input(gf.clone()),
                g_unit: tape.input(gu.clone()),
                scale: 2.0,
                hard_unit: false,
            };
            let a = tape.input(xs.clone());
            let b = tape.input(ys.clone());
            let out = gsgn::fuse(&mut tape, &g, a, b).unwrap();
            tape.value(out).clone()
        };
        let zero = Tensor::zeros(&shape);
        let scaled = run(&x.map(|v| alpha * v), &y);
        let x_part = run(&x, &zero);
        let y_part = run(&zero, &y);
        for i in 0..scaled.len() {
            let expect = alpha * x_part.data()[i] + y_part.data()[i];
            prop_assert!((scaled.data()[i] - expect).abs() <= 1e-15 * (1.0 + expect.abs()) * 8.0);
        }
    }

    #[test]
    fn gate_loss_nonnegative_and_zero_only_on_target(seed in 0u64..1000, target in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3];
        let gf = Tensor::uniform(&shape, 0.0, 2.0, &mut rng);
        let gu = Tensor::uniform(&shape, 0.0, 2.0, &mut rng);
        let loss = |gf: &Tensor, gu: &Tensor| {
            let mut tape = Tape::new();
            let g = gsgn::GateOutput {
                g_fbank: tape.input(gf.clone()),
                g_unit: tape.input(gu.clone()),
                scale: 2.0,
                hard_unit: false,
            };
            let l = gsgn::gate_loss(&mut tape, &g, target).unwrap();
            tape.scalar(l)
        };
        prop_assert!(loss(&gf, &gu) > 0.0);
        prop_assert_eq!(loss(&Tensor::full(&shape, target), &Tensor::ones(&shape)), 0.0);
    }

    #[test]
    fn deconflict_is_orthogonal_and_idempotent((a, b) in vec_pair(64)) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let d = deconflict(&a, &b).unwrap();
        prop_assert!(dot(&a, &d).abs() <= 1e-10 * norm(&a) * norm(&b));
        let d2 = deconflict(&a, &d).unwrap();
        let gap: f64 = d.iter().zip(&d2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(gap <= 1e-10 * norm(&b).max(1e-300));
    }

    #[test]
    fn correction_never_shrinks_main_direction((a, b) in vec_pair(32)) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let c = cosine(&a, &b).unwrap();
        prop_assume!(c < 0.0);
        let g = corrected_gradient(&a, &b).unwrap();
        let along = dot(&g, &a) / norm(&a);
        prop_assert!(along >= norm(&a) * (1.0 - 1e-12));
    }

    #[test]
    fn cosine_is_bounded((a, b) in vec_pair(16)) {
        if let Some(c) = cosine(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&c));
        } else {
            prop_assert!(norm(&a) == 0.0 || norm(&b) == 0.0);
        }
    }

    #[test]
    fn gate_target_within_scale((a, b) in vec_pair(16), scale in 0.5f64..4.0) {
        let snap = GradSnapshot::from_flat(a.clone(), b, &[("w".into(), a.len())], 0, 0).unwrap();
        let t = gate_target(&snap, scale);
        prop_assert!((0.0..=scale).contains(&t));
    }

    #[test]
    fn branch_intervals_are_half_open(f in 0.0f64..1.0, u_frac in 0.0f64..1.0, p in 0.0f64..1.0) {
        let u = (1.0 - f) * u_frac;
        let t = Thresholds::new(f, u).unwrap();
        let b = sample_branch(p, t).unwrap();
        let expect = if p < f { Branch::Fbank } else if p < f + u { Branch::Unit } else { Branch::Fusion };
        prop_assert_eq!(b, expect);
    }

    #[test]
    fn schedule_lookup_is_total(cuts in prop::collection::btree_set(1usize..60, 0..5), epoch in 0usize..200) {
        let mut stages = Vec::new();
        let mut lo = 0;
        for &hi in &cuts {
            stages.push(Stage { lo, hi: Some(hi), fbank: 0.1, unit: hi as f64 / 100.0 });
            lo = hi;
        }
        stages.push(Stage { lo, hi: None, fbank: 0.2, unit: 0.0 });
        let s = StageSchedule::new(stages.clone()).unwrap();
        let t = s.stage_for_epoch(epoch);
        let owner = stages.iter().find(|st| epoch >= st.lo && st.hi.is_none_or(|h| epoch < h)).unwrap();
        prop_assert_eq!(t, owner.thresholds());
    }

    #[test]
    fn requantizing_centroids_is_identity(seed in 0u64..500, k in 1usize..10, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(Tensor::randn(&[k, d], 1.0, &mut rng)).unwrap();
        let pts = Tensor::randn(&[20, d], 1.0, &mut rng);
        let (ids, emb) = quantize(&pts, &cb).unwrap();
        let (again, _) = quantize(&emb, &cb).unwrap();
        prop_assert_eq!(ids, again);
    }

    #[test]
    fn length_align_picks_floor_rows(src in 1usize..20, t in 1usize..20) {
        let x = Tensor::new(vec![src, 1], (0..src).map(|i| i as f64).collect()).unwrap();
        let y = length_align(&x, t).unwrap();
        prop_assert_eq!(y.shape(), &[t, 1]);
        for i in 0..t {
            prop_assert_eq!(y.data()[i], (i * src / t) as f64);
        }
    }

    #[test]
    fn replace_noise_stays_in_range(seed in 0u64..500, lo in -5.0f64..0.0, width in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = MultiViewExample {
            x_fbank: Tensor::randn(&[4, 3], 1.0, &mut rng),
            x_unit: Tensor::randn(&[4, 2], 1.0, &mut rng),
            targets: vec![0; 4],
        };
        let out = noise_replace(&e, (lo, lo + width), &mut rng).unwrap();
        prop_assert_eq!(&out.x_fbank, &e.x_fbank);
        prop_assert!(out.x_unit.data().iter().all(|&v| v >= lo && v <= lo + width));
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in 0u64..500, rows in 1usize..5, cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("a", Tensor::randn(&[rows, cols], 1e3, &mut rng));
        params.push("b", Tensor::randn(&[cols], 1e-3, &mut rng));
        let config = RunConfig::default();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                config_hash: config.hash(),
                model: ModelConfig::default(),
                config,
                epoch: rows,
                step: seed as usize,
                valid_loss: 1.0 / (seed as f64 + 3.0),
                valid_accuracy: 0.1 * cols as f64,
                source_epochs: vec![],
            },
            params,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("p")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let avg = average_checkpoints(&vec![back; 1 + rows]).unwrap();
        prop_assert_eq!(avg.params, ck.params);
    }

    #[test]
    fn config_text_roundtrip(epochs in 0usize..100, lr in 1e-5f64..1e-1, seed in any::<u64>(), scale in 0.5f64..3.0) {
        let mut cfg = RunConfig::default();
        cfg.train.max_epochs = epochs;
        cfg.train.peak_lr = lr;
        cfg.train.seed = seed;
        cfg.gsgn.scale = scale;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
