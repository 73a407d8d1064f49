use std::collections::BTreeSet;

use epalm_core::adapt::*;
use epalm_core::autodiff::Graph;
use epalm_core::nn::{ClsTrace, DecoderConfig, EncoderConfig, Layout};
use epalm_core::rng::RngState;
use epalm_core::Tensor;

fn tiny_enc() -> EncoderConfig {
    EncoderConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        n_patches: 4,
        patch_feature_dim: 6,
    }
}

fn tiny_dec(n_layers: usize) -> DecoderConfig {
    DecoderConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 11,
        max_positions: 40,
    }
}

fn patches(seed: u64) -> Tensor<f64> {
    let mut r = RngState::new(seed);
    Tensor::new(vec![4, 6], r.normal_vec(1.0, 24)).unwrap()
}

fn variant(name: VariantName) -> VariantSpec {
    VariantSpec::preset(name).with_levels(2, 2)
}

fn model(name: VariantName, n_l: usize) -> EpalmModel<f64> {
    EpalmModel::new(&tiny_enc(), &tiny_dec(n_l), &variant(name), &RngState::new(7)).unwrap()
}

fn logits(m: &EpalmModel<f64>, p: Perception<'_, f64>, ids: &[usize]) -> Vec<f64> {
    let mut g = Graph::new(&m.params);
    let out = m.forward_multimodal(&mut g, p, ids).unwrap();
    g.value(out.decoder.logits).to_vec()
}

fn reference_budget(enc: &str, dec: &str, v: VariantSpec) -> ParamBudget {
    let (_, layout) = EpalmArch::declare(&encoder_preset(enc).unwrap(), &decoder_preset(dec).unwrap(), &v).unwrap();
    count_params(&layout)
}

#[test]
fn shared_connection_size() {
    let b = reference_budget("vit_b", "opt2b7", VariantSpec::preset(VariantName::EpalmLin));
    assert_eq!(b.trainable_count, 768 * 2560 + 2560);
    assert_eq!(b.per_group["connection"].trainable, 1_968_640);
}

#[test]
fn reference_fractions() {
    let pt = reference_budget("vit_b", "opt2b7", VariantSpec::preset(VariantName::EpalmPt));
    assert!((pt.percent() - 0.54).abs() <= 0.05, "{}", pt.percent());
    let ep = reference_budget("vit_b", "opt2b7", VariantSpec::preset(VariantName::Epalm));
    assert!((ep.percent() - 0.89).abs() <= 0.05, "{}", ep.percent());
    let light = VariantSpec::preset(VariantName::EpalmPt).with_prompt_mlp(false);
    let l = reference_budget("vit_l", "opt6b7", light);
    assert_eq!(l.trainable_count, 4_239_360);
    assert!((l.percent() - 0.06).abs() <= 0.02, "{}", l.percent());
}

#[test]
fn budget_monotone_over_variants() {
    let c = |n| reference_budget("vit_b", "opt2b7", VariantSpec::preset(n)).trainable_count;
    use VariantName::*;
    assert!(c(EpalmLin) < c(EpalmPt));
    assert!(c(EpalmPt) < c(Epalm));
    assert!(c(Epalm) < c(EpalmAda));
}

#[test]
fn adapter_size_matches_shape_arithmetic() {
    let mut layout = Layout::new();
    Adapter::declare(&mut layout, "a", 2560, 8).unwrap();
    assert_eq!(layout.total_params(), 2 * (2560 * 320) + 320 + 2560);
    assert!(Adapter::declare(&mut layout, "b", 30, 8).is_err());
}

#[test]
fn deep_prompt_adds_layers_times_length_times_width() {
    let enc = encoder_preset("vit_b").unwrap();
    let dec = decoder_preset("opt2b7").unwrap();
    let (_, l) = EpalmArch::declare(&enc, &dec, &VariantSpec::preset(VariantName::DeepPt)).unwrap();
    let b = count_params(&l);
    assert_eq!(b.per_group["prompt"].trainable, 32 * 10 * 2560);
}

#[test]
fn unknown_presets_rejected() {
    assert!(encoder_preset("vit_h").is_err());
    assert!(decoder_preset("opt13b").is_err());
}

#[test]
fn trainable_sets_match_declarations() {
    use VariantName::*;
    let expect: &[(VariantName, &[&str])] = &[
        (EpalmLin, &["connection"]),
        (EpalmPt, &["connection", "prompt"]),
        (Epalm, &["connection", "prompt"]),
        (EpalmAda, &["adapters", "connection"]),
        (DeepPt, &["connection", "prompt"]),
        (BPromptfuse, &["connection", "prompt"]),
        (BLimber, &["connection"]),
        (BMagma, &["adapters", "connection"]),
        (TextOnly, &["prompt"]),
        (FullFt, &["connection", "decoder", "encoder", "prompt"]),
    ];
    for (name, groups) in expect {
        let (_, layout) = EpalmArch::declare(&tiny_enc(), &tiny_dec(6), &variant(*name)).unwrap();
        let got: BTreeSet<&str> = layout
            .decls()
            .iter()
            .filter(|d| d.trainable)
            .map(|d| budget::group_of(&d.name))
            .collect();
        let want: BTreeSet<&str> = groups.iter().copied().collect();
        assert_eq!(got, want, "{name}");
        // Backbones are fully frozen unless released. The encoder's final norm
        // never sees a gradient when only the [CLS] trace is consumed.
        for d in layout.decls() {
            let g = budget::group_of(&d.name);
            if want.contains(g) && !d.name.starts_with("encoder.ln_f.") {
                assert!(d.trainable, "{name}: {} should train", d.name);
            }
        }
    }
}

#[test]
fn limber_trains_one_projection() {
    let (arch, layout) = EpalmArch::declare(&tiny_enc(), &tiny_dec(6), &variant(VariantName::BLimber)).unwrap();
    let names: Vec<&str> = layout.decls().iter().filter(|d| d.trainable).map(|d| d.name.as_str()).collect();
    assert_eq!(names, vec!["connection.shared.weight", "connection.shared.bias"]);
    assert_eq!(arch.schedule.unwrap().pairs(), &[(3, 0)]);
}

#[test]
fn shared_connection_reuses_weights() {
    let m = model(VariantName::EpalmLin, 6);
    let c = m.arch.connection.as_ref().unwrap();
    assert_eq!(c.projection(0).unwrap().weight, c.projection(1).unwrap().weight);
    let m = model(VariantName::Epalm, 6);
    let c = m.arch.connection.as_ref().unwrap();
    assert_ne!(c.projection(0).unwrap().weight, c.projection(1).unwrap().weight);
}

#[test]
fn zero_cls_projects_to_bias() {
    let mut m = model(VariantName::Epalm, 6);
    let conn = m.arch.connection.clone().unwrap();
    let bias = conn.projection(1).unwrap().bias.unwrap();
    let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    m.params.set_data(bias, &vals).unwrap();
    let sched = m.arch.schedule.clone().unwrap();
    let mut g = Graph::new(&m.params);
    let trace: Vec<_> = (0..4).map(|_| g.input(1, 16, vec![0.0; 16]).unwrap()).collect();
    let out = conn.project_cls(&mut g, &trace, &sched, 1).unwrap();
    assert_eq!(g.value(out), &vals[..]);
    assert!(conn.project_cls(&mut g, &trace, &sched, 2).is_err());
}

#[test]
fn per_level_projections_are_isolated() {
    let mut m = model(VariantName::Epalm, 6);
    let conn = m.arch.connection.clone().unwrap();
    let sched = m.arch.schedule.clone().unwrap();
    let run = |m: &EpalmModel<f64>| {
        let mut g = Graph::new(&m.params);
        let trace: Vec<_> = (0..4).map(|i| g.input(1, 16, vec![0.3 * i as f64 - 0.5; 16]).unwrap()).collect();
        let out = conn.project_cls(&mut g, &trace, &sched, 0).unwrap();
        g.value(out).to_vec()
    };
    let before = run(&m);
    let w1 = conn.projection(1).unwrap().weight;
    m.params.set_data(w1, &vec![9.0; 256]).unwrap();
    assert_eq!(run(&m), before);
}

#[test]
fn perception_reaches_logits() {
    let enc = tiny_enc();
    let dec = tiny_dec(4);
    let rng = RngState::new(3);
    let v = VariantSpec::preset(VariantName::Epalm).with_levels(1, 2);
    let m: EpalmModel<f64> = EpalmModel::new(&enc, &dec, &v, &rng).unwrap();
    let t: EpalmModel<f64> = EpalmModel::new(&enc, &dec, &VariantSpec::preset(VariantName::TextOnly), &rng).unwrap();
    let ids = [1, 5, 6, 3];
    let a = logits(&m, Perception::Patches(&patches(1)), &ids);
    let b = logits(&t, Perception::Absent, &ids);
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    let c = logits(&m, Perception::Patches(&patches(2)), &ids);
    assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn cached_encoding_matches_live_encoder() {
    let m = model(VariantName::Epalm, 6);
    let p = patches(4);
    let enc = m.encode(Perception::Patches(&p)).unwrap();
    let ids = [1, 2, 3];
    assert_eq!(
        logits(&m, Perception::Patches(&p), &ids),
        logits(&m, Perception::Encoded(&enc), &ids)
    );
}

#[test]
fn identical_frames_average_to_single_frame() {
    let mut v = variant(VariantName::Epalm);
    v.frame_mode = FrameMode::AverageCls;
    let m: EpalmModel<f64> = EpalmModel::new(&tiny_enc(), &tiny_dec(6), &v, &RngState::new(7)).unwrap();
    let p = patches(9);
    let frames = vec![p.clone(), p.clone(), p.clone()];
    let single = logits(&m, Perception::Patches(&p), &[1, 4]);
    let multi = logits(&m, Perception::Frames(&frames), &[1, 4]);
    for (a, b) in single.iter().zip(&multi) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn average_frame_cls_properties() {
    let t = |v: f64| ClsTrace {
        per_layer_cls: vec![vec![v, -v], vec![2.0 * v, 0.5]],
    };
    assert_eq!(average_frame_cls(&[t(1.0)]).unwrap(), t(1.0));
    let z = average_frame_cls(&[t(1.5), t(-1.5)]).unwrap();
    assert_eq!(z.per_layer_cls[0], vec![0.0, 0.0]);
    let a = average_frame_cls(&[t(1.0), t(2.0), t(4.0)]).unwrap();
    let b = average_frame_cls(&[t(4.0), t(1.0), t(2.0)]).unwrap();
    assert_eq!(a, b);
    assert!(average_frame_cls::<f64>(&[]).is_err());
}

#[test]
fn slot_is_replaced_not_accumulated() {
    let m = model(VariantName::Epalm, 6);
    let mut g = Graph::new(&m.params);
    let out = m.forward_multimodal(&mut g, Perception::Patches(&patches(5)), &[1, 5, 7, 3, 8]).unwrap();
    let p = m.arch.prompt_len();
    let dec = &out.decoder;
    // Schedule (2..=3 → 2, 4): no slot before layer 2, one row after.
    for (j, l) in dec.layouts.iter().enumerate() {
        assert_eq!(l.slot_rows, usize::from(j >= 2), "layer {j}");
        assert_eq!(l.prompt_len, p);
    }
    assert_eq!(out.injected.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 4]);
    for &(layer, node) in &out.injected {
        let slot = dec.slot_inputs[layer].unwrap();
        assert_eq!(g.value(slot), g.value(node));
    }
    assert_eq!(dec.max_len(), p + 1 + 5);
}

#[test]
fn connection_receives_gradient_through_frozen_stack() {
    let m = model(VariantName::EpalmLin, 6);
    let mut g = Graph::new(&m.params);
    let ids = [1, 5, 7, 3];
    let out = m.forward_multimodal(&mut g, Perception::Patches(&patches(6)), &ids).unwrap();
    let loss = g.cross_entropy(out.decoder.logits, &[5, 7, 3, 2], &[true; 4]).unwrap();
    let grads = g.backward(loss).unwrap().into_params();
    let w = m.arch.connection.as_ref().unwrap().projection(0).unwrap().weight;
    let gw = grads.get(w).unwrap();
    assert!(gw.iter().any(|v| v.abs() > 0.0));
    for (id, _) in grads.iter() {
        assert!(m.params.get(id).trainable());
    }
}

#[test]
fn magma_all_tokens_prepends_every_token() {
    let mut v = variant(VariantName::BMagma);
    v.all_tokens = true;
    let m: EpalmModel<f64> = EpalmModel::new(&tiny_enc(), &tiny_dec(6), &v, &RngState::new(1)).unwrap();
    let mut g = Graph::new(&m.params);
    let out = m.forward_multimodal(&mut g, Perception::Patches(&patches(2)), &[1, 2]).unwrap();
    assert_eq!(out.decoder.layouts[0].slot_rows, 5);
    let mut bad = VariantSpec::preset(VariantName::Epalm);
    bad.all_tokens = true;
    assert!(bad.validate().is_err());
}

#[test]
fn text_only_ignores_perception() {
    let m = model(VariantName::TextOnly, 6);
    let a = logits(&m, Perception::Absent, &[1, 2, 3]);
    let b = logits(&m, Perception::Patches(&patches(3)), &[1, 2, 3]);
    assert_eq!(a, b);
}

#[test]
fn perception_required_when_connected() {
    let m = model(VariantName::EpalmLin, 6);
    let mut g = Graph::new(&m.params);
    assert!(m.forward_multimodal(&mut g, Perception::Absent, &[1]).is_err());
}

mod token_count {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The perception pathway adds exactly one row, whatever the schedule.
        #[test]
        fn one_extra_token_for_any_schedule(
            n_e in 2usize..7,
            n_l in 2usize..9,
            k_seed in 0usize..100,
            stride_seed in 0usize..100,
            t in 1usize..8,
            which in 0usize..4,
            seed in 0u64..1000,
        ) {
            let k = 1 + k_seed % n_e.min(n_l);
            let stride = 1 + stride_seed % (n_l / k);
            let name = [VariantName::EpalmLin, VariantName::EpalmPt, VariantName::Epalm, VariantName::EpalmAda][which];
            let enc = EncoderConfig { n_layers: n_e, ..tiny_enc() };
            let v = VariantSpec::preset(name).with_levels(k, stride);
            let m: EpalmModel<f64> = EpalmModel::new(&enc, &tiny_dec(n_l), &v, &RngState::new(seed)).unwrap();
            let ids: Vec<usize> = (0..t).map(|i| (i * 3 + 1) % 11).collect();
            let mut g = Graph::new(&m.params);
            let out = m.forward_multimodal(&mut g, Perception::Patches(&patches(seed)), &ids).unwrap();
            let p = m.arch.prompt_len();
            let first = m.arch.schedule.as_ref().unwrap().decoder_layers()[0];
            prop_assert_eq!(out.decoder.max_len(), p + 1 + t);
            for (j, l) in out.decoder.layouts.iter().enumerate() {
                prop_assert_eq!(l.len(), if j < first { p + t } else { p + 1 + t });
            }
            prop_assert_eq!(out.injected.len(), k);
        }
    }
}
