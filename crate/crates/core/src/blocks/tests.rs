use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{finite_diff_check, GradCheckConfig};
use crate::ops::{conv2d, deform_conv2d, Padding};
use crate::routes::{flatten_route, Direction, RouteKind};
use crate::ssm::{s6_forward, ScanMode};
use crate::tensor::Tensor;

fn toy_config() -> ModelConfig {
    ModelConfig {
        in_channels: 6,
        channels: 16,
        state: 8,
        frames: 3,
        height: 8,
        width: 6,
        keypoints: 3,
        gsm_blocks: 1,
        lrm_blocks: 1,
        window: WindowSpec::new(4, 3).unwrap(),
        ..ModelConfig::default()
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `f` on a fresh f64 tape with every parameter bound.
fn run<T>(store: &ParamStore<f64>, f: impl FnOnce(&mut Tape<f64>, &Bound) -> T) -> T {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    f(&mut tape, &p)
}

fn zero_param(store: &mut ParamStore<f64>, id: crate::params::ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn model_f64(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let (m, s) = Model::new(cfg, seed).unwrap();
    (m, s.cast())
}

#[test]
fn zero_input_gives_the_embeddings_exactly() {
    let cfg = toy_config();
    let (m, store) = model_f64(&cfg, 1);
    let out = run(&store, |t, p| {
        let x = t.constant(Tensor::zeros(&[3, 8, 6, 6]));
        let y = m.embed.apply(t, p, x).unwrap();
        t.value(y).clone()
    });
    let tem = store.get(m.embed.temporal);
    for f in 0..3 {
        for y in 0..8 {
            for x in 0..6 {
                for c in 0..16 {
                    let want = m.embed.spatial.at(&[y, x, c]) as f64 + tem.at(&[f, c]);
                    assert_eq!(out.at(&[f, y, x, c]), want);
                }
            }
        }
    }
}

#[test]
fn spatial_table_is_injective() {
    let e = sincos_2d(32, 24, 64).unwrap();
    let rows: Vec<&[f32]> = e.data().chunks(64).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f32 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-3, "cells {i} and {j} share an embedding");
        }
    }
}

#[test]
fn channel_attention_weights_lie_in_the_open_unit_interval() {
    let cfg = toy_config();
    let (m, store) = model_f64(&cfg, 2);
    let w = run(&store, |t, p| {
        let x = t.constant(randn(&[3, 8, 6, 16], 3.0, 4));
        let w = m.gsm[0].attention.weights(t, p, x).unwrap();
        t.value(w).clone()
    });
    assert_eq!(w.shape(), &[3, 16]);
    assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zeroed_attention_halves_the_input() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 3);
    let a = m.gsm[0].attention;
    for l in [a.squeeze, a.excite, a.temporal] {
        zero_param(&mut store, l.w);
        zero_param(&mut store, l.b.unwrap());
    }
    let x = randn(&[3, 8, 6, 16], 1.0, 5);
    let y = run(&store, |t, p| {
        let v = t.constant(x.clone());
        let y = a.apply(t, p, v).unwrap();
        t.value(y).clone()
    });
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn attention_keeps_spatially_constant_frames_constant() {
    let cfg = toy_config();
    let (m, store) = model_f64(&cfg, 4);
    let frame = randn(&[3, 1, 1, 16], 1.0, 6);
    let mut x = Tensor::zeros(&[3, 8, 6, 16]);
    for f in 0..3 {
        for y in 0..8 {
            for xx in 0..6 {
                for c in 0..16 {
                    x.set(&[f, y, xx, c], frame.at(&[f, 0, 0, c]));
                }
            }
        }
    }
    let y = run(&store, |t, p| {
        let v = t.constant(x);
        let y = m.gsm[0].attention.apply(t, p, v).unwrap();
        t.value(y).clone()
    });
    for f in 0..3 {
        for c in 0..16 {
            let first = y.at(&[f, 0, 0, c]);
            for yy in 0..8 {
                for xx in 0..6 {
                    assert_eq!(y.at(&[f, yy, xx, c]), first);
                }
            }
        }
    }
}

#[test]
fn centered_delta_kernel_makes_the_gate_a_normalized_silu() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 5);
    let g = m.gsm[0].gate;
    let mut k = Tensor::zeros(&[3, 3, 1, 16]);
    for c in 0..16 {
        k.set(&[1, 1, 0, c], 1.0);
    }
    *store.get_mut(g.kernel) = k;
    let x = randn(&[3, 8, 6, 16], 1.0, 7);
    let (gate, direct) = run(&store, |t, p| {
        let v = t.constant(x.clone());
        let a = g.apply(t, p, v).unwrap();
        let b = g.norm.apply_silu(t, p, v).unwrap();
        (t.value(a).clone(), t.value(b).clone())
    });
    assert!(gate.max_abs_diff(&direct) < 1e-12);
}

#[test]
fn deformable_conv_degenerates_to_plain_conv() {
    let x = randn(&[2, 7, 5, 4], 1.0, 8);
    let k = randn(&[3, 3, 4, 6], 0.3, 9);
    let plain = conv2d(&x, &k, None, Padding::Same, false).unwrap();
    let dcn = deform_conv2d(&x, &Tensor::zeros(&[2, 7, 5, 18]), &Tensor::ones(&[2, 7, 5, 9]), &k).unwrap();
    assert!(plain.max_abs_diff(&dcn) <= 1e-6);
}

#[test]
fn zero_deformable_kernel_leaves_the_base() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 6);
    let stage = m.gsm[0].stmm.unwrap().spatial.unwrap();
    zero_param(&mut store, stage.kernel);
    // nonzero generators so the offsets actually move
    *store.get_mut(stage.offset_kernel) = randn(&[3, 3, 32, 18], 0.1, 10);
    let base = randn(&[3, 8, 6, 16], 1.0, 11);
    let y = run(&store, |t, p| {
        let b = t.constant(base.clone());
        let g = t.constant(randn(&[3, 8, 6, 16], 1.0, 12));
        let y = stage.apply(t, p, b, g).unwrap();
        t.value(y).clone()
    });
    assert_eq!(y.data(), base.data());
}

#[test]
fn row_and_column_routes_are_transposes_on_symmetric_input() {
    let cfg = ModelConfig { frames: 1, height: 6, width: 6, ..toy_config() };
    let (m, mut store) = model_f64(&cfg, 7);
    let b = &m.gsm[0];
    let shared = b.ssm[0].resolve(&store);
    let col = m.routes.iter().position(|r| r.layout.id.kind == RouteKind::SpaceV && r.layout.id.dir == Direction::Forward);
    let col = col.unwrap();
    let h = b.ssm[col];
    for (id, v) in [
        (h.a_log, &shared.a_log),
        (h.w_b, &shared.w_b),
        (h.w_c, &shared.w_c),
        (h.w_delta, &shared.w_delta),
        (h.b_delta, &shared.b_delta),
    ] {
        *store.get_mut(id) = v.clone();
    }
    let raw = randn(&[1, 6, 6, 16], 1.0, 13);
    let mut x = raw.clone();
    for y in 0..6 {
        for xx in 0..6 {
            for c in 0..16 {
                x.set(&[0, y, xx, c], raw.at(&[0, y, xx, c]) + raw.at(&[0, xx, y, c]));
            }
        }
    }
    let (rows, cols) = run(&store, |t, p| {
        let v = t.constant(x);
        let vars: Vec<_> = b.ssm.iter().map(|h| h.vars(p)).collect();
        let outs = sts6d_apply(t, v, &m.routes, &vars).unwrap();
        let grid = |t: &mut Tape<f64>, i: usize| {
            let r = &m.routes[i];
            let g = t.invert_route(outs[i], &r.layout, r.inverse.clone()).unwrap();
            t.value(g).clone()
        };
        (grid(t, 0), grid(t, col))
    });
    for y in 0..6 {
        for xx in 0..6 {
            for c in 0..16 {
                assert!((rows.at(&[0, y, xx, c]) - cols.at(&[0, xx, y, c])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_route_scan_matches_the_parallel_oracle() {
    let cfg = toy_config();
    let (m, store) = model_f64(&cfg, 8);
    let z = randn(&[3, 8, 6, 16], 1.0, 14);
    let outs = run(&store, |t, p| {
        let v = t.constant(z.clone());
        let vars: Vec<_> = m.gsm[0].ssm.iter().map(|h| h.vars(p)).collect();
        let outs = sts6d_apply(t, v, &m.routes, &vars).unwrap();
        outs.iter().map(|&o| t.value(o).clone()).collect::<Vec<_>>()
    });
    for (i, r) in m.routes.iter().enumerate() {
        let (tokens, _) = flatten_route(&z, r.layout.id, cfg.route_options).unwrap();
        let want = s6_forward(&tokens, &m.gsm[0].ssm[i].resolve(&store), ScanMode::Parallel).unwrap();
        assert!(outs[i].max_abs_diff(&want) < 1e-10, "route {}", r.layout.id.name());
    }
}

#[test]
fn the_block_output_depends_on_all_six_routes() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 9);
    // the guides only enter through the generators, which start at zero
    let s = m.gsm[0].stmm.unwrap();
    for (i, stage) in [s.spatial.unwrap(), s.temporal.unwrap()].into_iter().enumerate() {
        *store.get_mut(stage.offset_kernel) = randn(&[3, 3, 32, 18], 0.05, 40 + i as u64);
        *store.get_mut(stage.mask_kernel) = randn(&[3, 3, 32, 9], 0.05, 50 + i as u64);
    }
    let x = randn(&[3, 8, 6, 16], 1.0, 15);
    let out = |store: &ParamStore<f64>| {
        run(store, |t, p| {
            let v = t.constant(x.clone());
            let y = m.gsm[0].apply(t, p, v, &m.routes, true).unwrap();
            t.value(y).clone()
        })
    };
    let base = out(&store);
    assert_eq!(m.gsm[0].ssm.len(), 6);
    for (i, h) in m.gsm[0].ssm.iter().enumerate() {
        let mut s = store.clone();
        s.get_mut(h.w_c).data_mut().iter_mut().for_each(|v| *v *= 1.5);
        assert!(out(&s).max_abs_diff(&base) > 1e-6, "route {} has no effect", i + 1);
    }
}

#[test]
fn zeroed_ffn_output_makes_each_block_an_identity() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 10);
    for ffn in [m.gsm[0].ffn, m.lrm[0].ffn] {
        zero_param(&mut store, ffn.down.w);
        zero_param(&mut store, ffn.down.b.unwrap());
    }
    let x = randn(&[3, 8, 6, 16], 1.0, 16);
    let (g, l) = run(&store, |t, p| {
        let v = t.constant(x.clone());
        let g = m.gsm[0].apply(t, p, v, &m.routes, true).unwrap();
        let l = m.lrm[0].apply(t, p, v, &m.windows, true).unwrap();
        (t.value(g).clone(), t.value(l).clone())
    });
    assert_eq!(g.data(), x.data());
    assert_eq!(l.data(), x.data());
}

#[test]
fn full_frame_window_is_a_bidirectional_unified_scan() {
    let cfg = ModelConfig { window: WindowSpec::new(8, 6).unwrap(), ..toy_config() };
    let (m, store) = model_f64(&cfg, 11);
    let b = &m.lrm[0];
    let z = randn(&[3, 8, 6, 16], 1.0, 17);
    let got = run(&store, |t, p| {
        let v = t.constant(z.clone());
        let y = wsts_apply(t, v, &m.windows, &b.forward.vars(p), &b.reverse.vars(p)).unwrap();
        t.value(y).clone()
    });
    // frame after frame, row-major within each frame
    let tokens = z.clone().reshape(&[3 * 8 * 6, 16]).unwrap();
    let fwd = s6_forward(&tokens, &b.forward.resolve(&store), ScanMode::Recurrent).unwrap();
    let rows: Vec<&[f64]> = tokens.data().chunks(16).rev().collect();
    let rev_tokens = Tensor::new(&[144, 16], rows.concat()).unwrap();
    let rev = s6_forward(&rev_tokens, &b.reverse.resolve(&store), ScanMode::Recurrent).unwrap();
    for i in 0..144 {
        for c in 0..16 {
            let want = fwd.at(&[i, c]) + rev.at(&[143 - i, c]);
            assert!((got.data()[i * 16 + c] - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn stacked_blocks_stay_finite_and_bounded() {
    let cfg = ModelConfig { gsm_blocks: 4, lrm_blocks: 0, height: 8, width: 8, ..toy_config() };
    for seed in 0..10 {
        let (m, store) = Model::new(&cfg, seed).unwrap();
        let input = Tensor::<f32>::randn(&[3, 8, 8, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(100 + seed));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input);
        let y = m.features(&mut tape, &p, x).unwrap();
        let v = tape.value(y);
        assert!(v.is_finite() && v.max_abs() < 1e3, "seed {seed}: max {}", v.max_abs());
    }
}

#[test]
fn cascaded_refinement_blocks_stay_finite_and_bounded() {
    let cfg = ModelConfig { gsm_blocks: 0, lrm_blocks: 2, ..toy_config() };
    for seed in 0..10 {
        let (m, store) = Model::new(&cfg, seed).unwrap();
        let input = Tensor::<f32>::randn(&[3, 8, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(200 + seed));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input);
        let y = m.features(&mut tape, &p, x).unwrap();
        let v = tape.value(y);
        assert!(v.is_finite() && v.max_abs() < 1e3, "seed {seed}: max {}", v.max_abs());
    }
}

#[test]
fn route_sets_and_ablations_shape_the_model() {
    let mut cfg = toy_config();
    Ablation::UnifiedSpaceRoutes.apply(&mut cfg);
    let (m, _) = Model::new(&cfg, 0).unwrap();
    assert_eq!(m.routes.len(), 4);
    let stmm = m.gsm[0].stmm.unwrap();
    assert!(stmm.spatial.is_some() && stmm.temporal.is_none());

    let mut cfg = toy_config();
    Ablation::NoStmm.apply(&mut cfg);
    assert!(Model::new(&cfg, 0).unwrap().0.gsm[0].stmm.is_none());

    let mut cfg = toy_config();
    Ablation::BackboneOnly.apply(&mut cfg);
    let (m, _) = Model::new(&cfg, 0).unwrap();
    assert!(m.gsm.is_empty() && m.lrm.is_empty());

    let bad = ModelConfig { channels: 18, ..toy_config() };
    assert!(matches!(Model::new(&bad, 0), Err(Error::Config(_))));
}

/// Gradient check of `f(params)` with every registry entry as an input.
fn check_params(store: &ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>) -> f64 {
    let inputs = store.values().to_vec();
    let cfg = GradCheckConfig { directions: 2, ..GradCheckConfig::default() };
    let report = finite_diff_check(|t, v| f(t, &Bound::from_vars(v.to_vec())), &inputs, &cfg).unwrap();
    report.max_rel_error()
}

/// Weighted sum so the check is not blind to sign-symmetric errors.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(randn(t.shape(y), 1.0, seed));
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

#[test]
fn gated_stream_gradients_match_finite_differences() {
    let (m, store) = model_f64(&toy_config(), 12);
    let x = randn(&[3, 8, 6, 16], 1.0, 18);
    let err = check_params(&store, |t, p| {
        let v = t.constant(x.clone());
        let y = m.gsm[0].gate.apply(t, p, v)?;
        probe(t, y, 19)
    });
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn modulation_gradients_match_finite_differences() {
    let (m, mut store) = model_f64(&toy_config(), 13);
    let stage = m.gsm[0].stmm.unwrap().temporal.unwrap();
    // away from the zero init so offsets are fractional
    *store.get_mut(stage.offset_kernel) = randn(&[3, 3, 32, 18], 0.05, 20);
    *store.get_mut(stage.mask_kernel) = randn(&[3, 3, 32, 9], 0.05, 21);
    let base = randn(&[3, 8, 6, 16], 1.0, 22);
    let guide = randn(&[3, 8, 6, 16], 1.0, 23);
    let err = check_params(&store, |t, p| {
        let b = t.constant(base.clone());
        let g = t.constant(guide.clone());
        let y = stage.apply(t, p, b, g)?;
        probe(t, y, 24)
    });
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn head_gradients_match_finite_differences() {
    let (m, store) = model_f64(&toy_config(), 14);
    let x = randn(&[3, 8, 6, 16], 1.0, 25);
    let err = check_params(&store, |t, p| {
        let v = t.constant(x.clone());
        let y = m.head.apply(t, p, v)?;
        probe(t, y, 26)
    });
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn toy_model_gradients_match_finite_differences() {
    let cfg = toy_config();
    let (m, mut store) = model_f64(&cfg, 15);
    for b in &m.gsm {
        let s = b.stmm.unwrap();
        for stage in [s.spatial.unwrap(), s.temporal.unwrap()] {
            *store.get_mut(stage.offset_kernel) = randn(&[3, 3, 32, 18], 0.05, 27);
        }
    }
    let x = randn(&[3, 8, 6, 6], 1.0, 28);
    let err = check_params(&store, |t, p| {
        let v = t.constant(x.clone());
        let y = m.forward(t, p, v)?;
        probe(t, y, 29)
    });
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn parameter_counts_follow_the_configuration() {
    let cfg = ModelConfig::default();
    let (m, store) = Model::new(&cfg, 0).unwrap();
    assert_eq!(m.gsm.len(), 4);
    assert_eq!(m.lrm.len(), 2);
    assert!(store.find("gsm3.ssm.time-depth-rev.a_log").is_some());
    assert!(store.find("lrm1.ssm.reverse.w_b").is_some());
    let per_ssm = 64 * 16 * 3 + 64 + 64 + 64;
    assert!(store.numel() > 28 * per_ssm);
}
