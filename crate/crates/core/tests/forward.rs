#[path = "support/oracle.rs"]
mod oracle;

use retap_core::backend::{all_taps, TokenPosition};
use retap_core::probes::sublayer_shift_profile;
use retap_core::{
    Backend, EmbedConfig, Embedder, ModalityInput, PromptFlags, PromptTemplates, SubLayer, SubLayerTap, TapSelector,
    ToyBackend, ToyConfig,
};

const PROMPTS: [&str; 5] = [
    "a",
    "the quick brown fox",
    "A photo of a red bus\nSummary above content in one word:",
    "caf\u{e9} \u{1f600} mixed bytes",
    "Query: q\nCandidate: c\nAnswer:",
];

fn toy() -> ToyBackend {
    ToyBackend::new(ToyConfig::default()).unwrap()
}

#[test]
fn every_tap_matches_reference_forward() {
    let b = toy();
    let cfg = b.config().clone();
    for text in PROMPTS {
        let seq = b.tokenize(text).unwrap();
        assert_eq!(seq.ids, oracle::byte_tokens(text));
        let reference = oracle::forward(&cfg, b.weights(), &seq.ids);
        let mut taps = all_taps(cfg.layers);
        for pos in [0, seq.len() / 2] {
            taps.push(SubLayerTap { layer: 2, sublayer: SubLayer::AttnOut, position: TokenPosition::Index(pos) });
            taps.push(SubLayerTap { layer: 0, sublayer: SubLayer::MlpOut, position: TokenPosition::Index(pos) });
        }
        let bundle = b.forward_with_taps(&seq, &taps).unwrap();
        for tap in &taps {
            let pos = tap.position.resolve(seq.len()).unwrap();
            let expected = reference.state(tap.layer, tap.sublayer == SubLayer::AttnOut, pos);
            let diff = oracle::max_abs_diff(bundle.state(tap).unwrap(), &expected);
            assert!(diff <= 1e-6, "{text:?} {tap}: {diff}");
        }
        let logits: Vec<f64> = reference.logits.iter().copied().collect();
        assert!(oracle::max_abs_diff(&bundle.final_logits, &logits) <= 1e-6);
        assert_eq!(bundle.predicted_token as usize, reference.argmax());
    }
}

#[test]
fn zero_mlp_makes_mlp_shift_exactly_one() {
    let b = toy().zero_mlp();
    let inputs: Vec<_> = PROMPTS.iter().map(|t| b.tokenize(t).unwrap()).collect();
    let report = sublayer_shift_profile(&b, &inputs, 1..=4).unwrap();
    for l in 1..=4 {
        let s = report.stat(l, SubLayer::MlpOut).unwrap();
        assert_eq!(s.mean, 1.0, "layer {l}");
        assert_eq!(s.std, 0.0);
    }
    let seq = &inputs[2];
    let bundle = b.forward_with_taps(seq, &all_taps(4)).unwrap();
    for l in 1..=4 {
        assert_eq!(
            bundle.state(&SubLayerTap::last(l, SubLayer::AttnOut)).unwrap(),
            bundle.state(&SubLayerTap::last(l, SubLayer::MlpOut)).unwrap()
        );
    }
}

#[test]
fn final_mlp_branch_moves_the_state() {
    let b = toy();
    let seq = b.tokenize(PROMPTS[2]).unwrap();
    let bundle = b.forward_with_taps(&seq, &all_taps(4)).unwrap();
    let attn = bundle.state(&SubLayerTap::last(4, SubLayer::AttnOut)).unwrap();
    let mlp = bundle.state(&SubLayerTap::last(4, SubLayer::MlpOut)).unwrap();
    assert!(oracle::max_abs_diff(attn, mlp) > 1e-3);
}

#[test]
fn lm_head_columns_and_option_logits() {
    let b = toy();
    let lm = oracle::to_dmatrix(&b.weights().lm_head);
    for v in [0u32, 7, 65, 127] {
        let col: Vec<f64> = lm.row(v as usize).iter().copied().collect();
        assert_eq!(b.lm_head_column(v).unwrap(), col);
    }
    assert!(b.lm_head_column(128).is_err());

    let seq = b.tokenize(PROMPTS[4]).unwrap();
    let reference = oracle::forward(b.config(), b.weights(), &seq.ids);
    let z = b.option_logits(&seq, &[65, 66]).unwrap();
    assert!((z[0] - reference.logits[65]).abs() <= 1e-6);
    assert!((z[1] - reference.logits[66]).abs() <= 1e-6);
    let (token, _) = b.generate_greedy_token(&seq).unwrap();
    assert_eq!(token as usize, reference.argmax());
}

#[test]
fn embeddings_match_reference_state() {
    let b = toy();
    let t = PromptTemplates::default();
    let e = Embedder::new(&b, &t);
    let input = ModalityInput::text("two dogs playing in the snow");
    for (tap, layer, attn) in [
        (TapSelector::FinalAttn, 4, true),
        (TapSelector::FinalMlp, 4, false),
        (TapSelector::MlpFromEnd(1), 3, false),
        (TapSelector::MlpFromEnd(2), 2, false),
    ] {
        for flags in PromptFlags::LADDER {
            let config = EmbedConfig { tap, flags, task_hint: None };
            let prompt = e.prompt(&input, &config).unwrap();
            let record = e.embed("x", &input, &config).unwrap();
            let reference = oracle::forward(b.config(), b.weights(), &oracle::byte_tokens(&prompt.rendered_text));
            let h = reference.last(layer, attn);
            let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected: Vec<f64> = h.iter().map(|x| x / norm).collect();
            let got: Vec<f64> = record.vector.iter().map(|&x| f64::from(x)).collect();
            assert!(oracle::max_abs_diff(&got, &expected) <= 1e-6, "{tap} {flags}");
            assert_eq!(record.predicted_token as usize, reference.argmax());
        }
    }
}

#[test]
fn default_prompt_text() {
    let b = toy();
    let t = PromptTemplates::default();
    let e = Embedder::new(&b, &t);
    let input = ModalityInput::text("a red bus");
    let bare = e.prompt(&input, &EmbedConfig::baseline()).unwrap();
    assert_eq!(bare.rendered_text, "a red bus\nSummary above content in one word:");
    let full = e.prompt(&input, &EmbedConfig::default()).unwrap();
    assert_eq!(
        full.rendered_text,
        "a red bus\n\
         You are reqired to assess if the above text is related to the target.\n\
         Capture the semantics of the above text.\n\
         Do not use function words, prepositions, or symbols.\n\
         Summary above content in one word:"
    );
}

#[test]
fn batch_of_64_matches_single_calls() {
    let b = toy();
    let t = PromptTemplates::default();
    let e = Embedder::new(&b, &t);
    let inputs: Vec<(String, ModalityInput)> = (0..64)
        .map(|i| (format!("d{i}"), ModalityInput::text(format!("document number {i} about topic {}", i % 5))))
        .collect();
    let out = e.embed_batch(&inputs, &EmbedConfig::default());
    assert!(out.errors.is_empty());
    assert_eq!(out.records.len(), 64);
    for ((id, input), record) in inputs.iter().zip(&out.records) {
        assert_eq!(&record.input_id, id);
        assert_eq!(record, &e.embed(id, input, &EmbedConfig::default()).unwrap());
        let n: f64 = record.vector.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
