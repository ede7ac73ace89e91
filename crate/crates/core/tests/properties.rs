use proptest::prelude::*;
use retap_core::linalg::{cosine, softmax};
use retap_core::pipeline::{precision_at_1, EvalConfig};
use retap_core::rerank::{rerank_with, two_way_softmax, RelevanceScorer, RerankCandidate, RerankOptions, TieBreak};
use retap_core::{
    CandidateScore, FramingConfig, ModalityInput, PromptFlags, PromptTemplates, Result, SubLayer, SubLayerTap,
    TapSelector,
};
use std::collections::{BTreeMap, BTreeSet};

struct Table(Vec<(String, Option<f64>)>);

impl RelevanceScorer for Table {
    fn relevance(&self, _: &ModalityInput, id: &str, _: &ModalityInput, _: f64) -> Result<f64> {
        match self.0.iter().find(|(k, _)| k == id).and_then(|(_, v)| *v) {
            Some(v) => Ok(v),
            None => Err(retap_core::Error::Backend("no score".into())),
        }
    }
}

fn scores() -> impl Strategy<Value = Vec<(Option<f64>, f64)>> {
    prop::collection::vec(
        (prop::option::weighted(0.85, prop_oneof![Just(0.5), 0.0..=1.0f64]), prop_oneof![Just(0.25), -1.0..=1.0f64]),
        1..24,
    )
}

proptest! {
    #[test]
    fn rerank_is_a_permutation_independent_of_input_order(
        rows in scores(),
        shift in 0usize..24,
        fusion in prop_oneof![Just(0.0), 0.0..=1.0f64],
        id_only in any::<bool>(),
    ) {
        let table = Table(rows.iter().enumerate().map(|(i, (r, _))| (format!("c{i:02}"), *r)).collect());
        let x = ModalityInput::text("x");
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("c{i:02}")).collect();
        let cands: Vec<RerankCandidate<'_>> = rows
            .iter()
            .enumerate()
            .map(|(i, (_, e))| RerankCandidate { id: &ids[i], input: Some(&x), embed_score: *e })
            .collect();
        let options = RerankOptions { tie_break: if id_only { TieBreak::IdOnly } else { TieBreak::EmbedThenId }, fusion_weight: fusion };
        let out = rerank_with(&table, &x, &cands, options);

        let mut rotated = cands.clone();
        rotated.rotate_left(shift % cands.len());
        prop_assert_eq!(&rerank_with(&table, &x, &rotated, options), &out);

        prop_assert_eq!(out.iter().map(|s| s.rank).collect::<Vec<_>>(), (1..=cands.len()).collect::<Vec<_>>());
        let mut seen: Vec<&str> = out.iter().map(|s| s.candidate_id.as_str()).collect();
        seen.sort();
        prop_assert_eq!(seen, ids.iter().map(String::as_str).collect::<Vec<_>>());
        let first_error = out.iter().position(|s| s.error.is_some()).unwrap_or(out.len());
        prop_assert!(out[first_error..].iter().all(|s| s.error.is_some() && s.relevance == Some(0.0)));
        if fusion == 0.0 {
            for w in out[..first_error].windows(2) {
                prop_assert!(w[0].relevance >= w[1].relevance);
            }
        }
    }

    #[test]
    fn two_way_softmax_is_symmetric(a in -50.0..50.0f64, b in -50.0..50.0f64) {
        let p = two_way_softmax(a, b);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + two_way_softmax(b, a) - 1.0).abs() <= 1e-12);
        let s = softmax(&[a, b]);
        prop_assert!((s[0] - p).abs() <= 1e-12);
    }

    #[test]
    fn cosine_is_bounded(v in prop::collection::vec(-10.0..10.0f64, 1..16), scale in 0.001..100.0f64) {
        let w: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let c = cosine(&v, &w);
        prop_assert!((-1.0..=1.0).contains(&c));
        if v.iter().any(|x| *x != 0.0) {
            prop_assert!((c - 1.0).abs() <= 1e-12);
            prop_assert_eq!(cosine(&v, &v), 1.0);
        }
    }

    #[test]
    fn tap_strings_round_trip(layer in 0usize..64, attn in any::<bool>(), pos in prop::option::of(0usize..512), k in 1usize..8) {
        let sublayer = if attn { SubLayer::AttnOut } else { SubLayer::MlpOut };
        let position = pos.map_or(retap_core::TokenPosition::LastToken, retap_core::TokenPosition::Index);
        for sel in [TapSelector::Explicit(SubLayerTap { layer, sublayer, position }), TapSelector::MlpFromEnd(k)] {
            prop_assert_eq!(sel.to_string().parse::<TapSelector>().unwrap(), sel);
            let json = serde_json::to_string(&sel).unwrap();
            prop_assert_eq!(serde_json::from_str::<TapSelector>(&json).unwrap(), sel);
        }
    }

    #[test]
    fn flag_strings_round_trip(t in any::<bool>(), g in any::<bool>(), n in any::<bool>()) {
        let f = PromptFlags { task_align: t, semantic_ground: g, noise_suppress: n };
        prop_assert_eq!(f.to_string().parse::<PromptFlags>().unwrap(), f);
    }

    #[test]
    fn embed_prompt_keeps_input_and_instruction(text in "[a-zA-Z0-9 ,.]{1,40}", t in any::<bool>(), g in any::<bool>(), n in any::<bool>()) {
        let templates = PromptTemplates::default();
        let flags = PromptFlags { task_align: t, semantic_ground: g, noise_suppress: n };
        let p = retap_core::prompt::build_embed_prompt(&templates, &ModalityInput::text(text.clone()), flags, None).unwrap();
        prop_assert!(p.rendered_text.starts_with(&text));
        prop_assert!(p.rendered_text.ends_with("Summary above content in one word:"));
        let lines = p.rendered_text.lines().count() - text.lines().count();
        prop_assert_eq!(lines, 1 + usize::from(t) + usize::from(g) + usize::from(n));
    }

    #[test]
    fn precision_counts_hits(hits in prop::collection::vec(prop::option::of(any::<bool>()), 0..40)) {
        let mut gold = BTreeMap::new();
        let mut results = Vec::new();
        for (i, h) in hits.iter().enumerate() {
            let q = format!("q{i}");
            if let Some(hit) = h {
                gold.insert(q.clone(), BTreeSet::from([String::from("gold")]));
                let id = if *hit { "gold" } else { "other" };
                results.push((q, vec![CandidateScore { candidate_id: id.into(), relevance: None, embed_score: 0.0, rank: 1, error: None }]));
            } else {
                results.push((q, Vec::new()));
            }
        }
        let cfg = EvalConfig { backend_id: "b".into(), tap: "attn".into(), flags: PromptFlags::ALL, framing: FramingConfig::mcq().id, k: 1, m: 1, fusion_weight: 0.0 };
        let r = precision_at_1(&results, &gold, cfg);
        let evaluated = hits.iter().filter(|h| h.is_some()).count();
        let good = hits.iter().filter(|h| **h == Some(true)).count();
        prop_assert_eq!(r.evaluated, evaluated);
        prop_assert_eq!(r.excluded.len(), hits.len() - evaluated);
        prop_assert_eq!(r.hits, good);
        prop_assert_eq!(r.precision_at_1, r.recomputed());
        prop_assert!((0.0..=1.0).contains(&r.precision_at_1));
    }
}
