use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use speechnet::config::ExperimentConfig;
use speechnet::evaluation::metrics::sisdr_uncapped;
use speechnet::evaluation::{greedy_ctc_decode, wer};
use speechnet::features::audio::Waveform;
use speechnet::features::mel::{cmvn, FEATURE_DIM};
use speechnet::graph::{Graph, Mat};
use speechnet::modules::{init_parameters, length_regulate_mat, Model, ModelConfig, UnitEmbedding};
use speechnet::mtl::{balance_losses, pcgrad, sum_gradients, LossBalanceState, Strategy};
use speechnet::nn::Ctx;
use speechnet::params::{GradientSet, ParameterSet};
use speechnet::tasks::Task;

const BPE: usize = 11;
const PHONES: usize = 9;

fn tiny() -> (ModelConfig, ParameterSet) {
    let mut cfg = ModelConfig::toy(BPE, PHONES, 3);
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.heads = 2;
    cfg.unit_heads = 2;
    cfg.conv_kernel = 3;
    let l = &mut cfg.layers;
    for c in [
        &mut l.content_enc,
        &mut l.speaker_enc,
        &mut l.content_dec,
        &mut l.merge_dec,
        &mut l.unit_enc,
        &mut l.s2s_dec,
        &mut l.prosody_enc,
        &mut l.prosody_pred,
    ] {
        *c = 1;
    }
    cfg.validate().unwrap();
    let p = init_parameters(&cfg, 5).unwrap();
    (cfg, p)
}

fn mat(rows: usize, cols: usize, values: &[f64]) -> Mat {
    Array2::from_shape_fn((rows, cols), |(i, j)| values[(i * cols + j) % values.len()] + 0.01 * (i as f64) - 0.02 * (j as f64))
}

fn feats(t: usize, seed: &[f64]) -> Mat {
    mat(t, FEATURE_DIM, seed)
}

struct Shapes {
    prosody: (usize, usize),
    speaker: (usize, usize),
    content: (usize, usize),
    decoded: (usize, usize),
    ctc: (usize, usize),
    units: (usize, usize),
    text_content: usize,
    predicted_prosody: usize,
}

fn shapes(cfg: &ModelConfig, p: &ParameterSet, x: &Mat, tokens: &[usize], d: &[usize]) -> Shapes {
    let g = Graph::new();
    let ctx = Ctx::eval();
    let m = Model::new(&g, p, &ctx, cfg);
    let vp = m.prosody_encode(m.input(x));
    let vs = m.speaker_encode(vp);
    let vc = m.content_encode(m.input(x)).unwrap();
    let out = m.audio_decode(vp, vc).unwrap();
    let dec = m.text_decode(vc, None).unwrap();
    let enc = m.text_encode(tokens, vs, Some(d)).unwrap();
    let pred = m.prosody_predict(enc.content, vs);
    Shapes {
        prosody: vp.vectors.value().dim(),
        speaker: vs.vector.value().dim(),
        content: vc.vectors.value().dim(),
        decoded: out.value().dim(),
        ctc: dec.ctc_log_probs.value().dim(),
        units: enc.units.vectors.value().dim(),
        text_content: enc.content.vectors.rows(),
        predicted_prosody: pred.vectors.rows(),
    }
}

fn gset(task: &str, tensors: &[(&str, Vec<f64>)]) -> GradientSet {
    let mut g = GradientSet::new(task);
    for (k, v) in tensors {
        g.grads.insert(k.to_string(), Array2::from_shape_vec((1, v.len()), v.clone()).unwrap());
    }
    g
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    (a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn module_shapes_follow_contracts(
        t in 4usize..=512,
        l in 1usize..=64,
        seed in prop::collection::vec(-2.0f64..2.0, 7),
        token_seed in 0usize..1000,
    ) {
        let (cfg, p) = tiny();
        let x = feats(t, &seed);
        let tokens: Vec<usize> = (0..l).map(|i| 1 + (token_seed + 7 * i) % (PHONES - 1)).collect();
        let d: Vec<usize> = (0..l).map(|i| 1 + (token_seed + i) % 5).collect();
        let s = shapes(&cfg, &p, &x, &tokens, &d);
        let dm = cfg.d_model;
        let tc = t.div_ceil(4);
        prop_assert_eq!(s.prosody, (t, dm));
        prop_assert_eq!(s.speaker, (1, dm));
        prop_assert_eq!(s.content, (tc, dm));
        prop_assert_eq!(s.decoded, (t, FEATURE_DIM));
        prop_assert_eq!(s.ctc, (tc, BPE + 1));
        prop_assert_eq!(s.units, (l, dm));
        let frames: usize = d.iter().sum();
        prop_assert_eq!(s.text_content, frames.div_ceil(4));
        prop_assert_eq!(s.predicted_prosody, 4 * frames.div_ceil(4));
    }

    #[test]
    fn text_decode_rows_are_distributions(
        t in 4usize..=96,
        seed in prop::collection::vec(-3.0f64..3.0, 5),
        prefix in prop::collection::vec(0usize..BPE, 0..8),
    ) {
        let (cfg, p) = tiny();
        let g = Graph::new();
        let ctx = Ctx::eval();
        let m = Model::new(&g, &p, &ctx, &cfg);
        let vc = m.content_encode(m.input(&feats(t, &seed))).unwrap();
        let dec = m.text_decode(vc, Some(&prefix)).unwrap();
        let s2s = dec.s2s_log_probs.unwrap().value();
        for lp in [dec.ctc_log_probs.value(), s2s] {
            for row in lp.rows() {
                let probs: Array1<f64> = row.mapv(f64::exp);
                prop_assert!(probs.iter().all(|&q| q >= 0.0));
                prop_assert!((probs.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic(t in 4usize..=64, seed in prop::collection::vec(-2.0f64..2.0, 3)) {
        let (cfg, p) = tiny();
        let x = feats(t, &seed);
        let run = || {
            let g = Graph::new();
            let ctx = Ctx::eval();
            let m = Model::new(&g, &p, &ctx, &cfg);
            let vp = m.prosody_encode(m.input(&x));
            let vc = m.content_encode(m.input(&x)).unwrap();
            m.audio_decode(vp, vc).unwrap().value()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn length_regulation_repeats_rows(d in prop::collection::vec(1usize..=6, 1..=16), seed in prop::collection::vec(-5.0f64..5.0, 3)) {
        let (cfg, p) = tiny();
        let vu = mat(d.len(), 4, &seed);
        let plain = length_regulate_mat(&vu, &d).unwrap();
        let g = Graph::new();
        let ctx = Ctx::eval();
        let m = Model::new(&g, &p, &ctx, &cfg);
        let graph = m.length_regulate(UnitEmbedding { vectors: g.constant(vu.clone()) }, &d).unwrap().value();
        prop_assert_eq!(&graph, &plain);
        let bits = |r: ndarray::ArrayView1<'_, f64>| r.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mut want: Vec<Vec<u64>> = Vec::new();
        for (j, &k) in d.iter().enumerate() {
            want.extend(std::iter::repeat_n(bits(vu.row(j)), k));
        }
        let got: Vec<Vec<u64>> = plain.rows().into_iter().map(bits).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn unit_sigmas_give_the_plain_sum(losses in prop::collection::vec(0.0f64..50.0, 1..=6)) {
        let map: BTreeMap<String, f64> = losses.iter().enumerate().map(|(i, &l)| (format!("t{i}"), l)).collect();
        let s = LossBalanceState::new(map.keys().cloned());
        let total: f64 = map.values().sum();
        prop_assert!((balance_losses(&map, &s).unwrap() - total).abs() <= 1e-9 * total.max(1.0));
        prop_assert!(s.sigmas().values().all(|&v| v == 1.0));
    }

    #[test]
    fn pcgrad_removes_conflicts(
        tasks in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 1..=5),
        seed in any::<u64>(),
    ) {
        let gs: Vec<GradientSet> = tasks
            .iter()
            .enumerate()
            .map(|(i, v)| gset(&format!("t{i}"), &[("a", v[..4].to_vec()), ("b", v[4..].to_vec())]))
            .collect();
        let s = pcgrad(&gs, seed).unwrap();
        if gs.len() == 1 {
            prop_assert_eq!(&s.combined.grads, &gs[0].grads);
        }
        for name in ["a", "b"] {
            for (i, pi) in s.projected.iter().enumerate() {
                for (j, gj) in gs.iter().enumerate() {
                    if i != j {
                        // only the last projection is guaranteed for three or more tasks
                        if gs.len() == 2 {
                            prop_assert!(dot(&pi.grads[name], &gj.grads[name]) >= -1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pcgrad_without_conflict_is_the_sum(
        tasks in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 5), 1..=5),
        seed in any::<u64>(),
    ) {
        let gs: Vec<GradientSet> = tasks.iter().enumerate().map(|(i, v)| gset(&format!("t{i}"), &[("w", v.clone())])).collect();
        let s = pcgrad(&gs, seed).unwrap();
        prop_assert_eq!(s.projected_pairs, 0);
        prop_assert_eq!(s.combined.grads, sum_gradients(&gs).grads);
    }

    #[test]
    fn wer_counts_are_triangle_consistent(
        a in prop::collection::vec(0u8..3, 0..=5),
        b in prop::collection::vec(0u8..3, 0..=5),
        c in prop::collection::vec(0u8..3, 1..=5),
    ) {
        let ed = speechnet::evaluation::edit_distance::<u8>;
        prop_assert_eq!(ed(&a, &b), ed(&b, &a));
        prop_assert!(ed(&a, &b) <= ed(&a, &c) + ed(&c, &b));
        prop_assert!(ed(&a, &b) <= a.len().max(b.len()));
        let w = wer(&a, &c).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!((w - ed(&a, &c) as f64 / c.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn sisdr_ignores_positive_scale(
        x in prop::collection::vec(-1.0f64..1.0, 64..256),
        noise in prop::collection::vec(-0.3f64..0.3, 256),
        scale in 0.01f64..100.0,
    ) {
        let reference = Waveform::new(x.clone());
        let est: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + n).collect();
        let a = sisdr_uncapped(&Waveform::new(est.clone()), &reference).unwrap();
        let b = sisdr_uncapped(&Waveform::new(est.iter().map(|v| v * scale).collect()), &reference).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn greedy_ctc_recovers_collapsed_alignment(alignment in prop::collection::vec(0usize..4, 1..=6)) {
        let blank = 3;
        let mut post = Mat::zeros((alignment.len(), 4));
        for (i, &k) in alignment.iter().enumerate() {
            post[[i, k]] = 1.0;
        }
        let mut want: Vec<usize> = Vec::new();
        let mut prev = None;
        for &k in &alignment {
            if Some(k) != prev && k != blank {
                want.push(k);
            }
            prev = Some(k);
        }
        prop_assert_eq!(greedy_ctc_decode(&post), want);
    }

    #[test]
    fn cmvn_normalizes_and_is_idempotent(t in 2usize..=60, seed in prop::collection::vec(-20.0f64..20.0, 11)) {
        let f = Array2::from_shape_fn((t, FEATURE_DIM), |(i, j)| seed[(i * 7 + j * 3) % seed.len()] * (1.0 + j as f64 / 100.0) + i as f64);
        let once = cmvn(&f).unwrap();
        for col in once.frames.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            prop_assert!(mean.abs() < 1e-6);
            if var > 0.0 {
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
        let twice = cmvn(&once.frames).unwrap();
        for (a, b) in once.frames.iter().zip(twice.frames.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_survives_toml_round_trip(seed in any::<u32>(), steps in 1u64..100_000, pick in 0usize..4) {
        let strategy = [Strategy::None, Strategy::AutoLoss, Strategy::PcGrad, Strategy::AutoLossPcGrad][pick];
        let mut cfg = ExperimentConfig::toy(&Task::ALL, strategy, u64::from(seed));
        cfg.max_steps = steps;
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
