use proptest::prelude::*;

use super::*;
use crate::datagen::{encode_document, prompt_text};
use crate::grft::GrftMode;
use crate::model::{pretrain_base, KnownProbe, ModelConfig, PretrainHyper};

#[test]
fn marker_examples() {
    let m = detect_marker("This context is CONTRADICTORY with my own knowledge, Based on what I know, X.").unwrap();
    assert_eq!(m.kind, MarkerKind::Contradictory);
    assert_eq!(m.position, 16);
    let m = detect_marker("The context is NOT HELPFUL to the question. Based on what I know, X.").unwrap();
    assert_eq!((m.kind, m.matched.as_str()), (MarkerKind::Unhelpful, "NOT HELPFUL"));
    assert_eq!(detect_marker("this is UNHELPFUL").unwrap().matched, "UNHELPFUL");
    assert_eq!(detect_marker("Sacramento is the capital of California."), None);
    assert_eq!(detect_marker("not helpful, contradictory"), None);
    // contradictory wins even when it comes later
    assert_eq!(detect_marker("NOT HELPFUL then CONTRADICTORY").unwrap().kind, MarkerKind::Contradictory);
}

#[test]
fn slot_boundaries() {
    let t = "The context is NOT HELPFUL to the question. Based on what I know, Aba lives in Rom.";
    assert_eq!(&t[internal_slot(t).unwrap().0..], "Aba lives in Rom.");
    let t = "X, Based on what I know, Aba lives in Rom. However, based on the context, Aba lives in Kel.";
    let (a, b) = internal_slot(t).unwrap();
    assert_eq!(&t[a..b], "Aba lives in Rom.");
    let t = "X, Based on what I know, Aba lives in Rom However, based on the context, Aba lives in Kel.";
    let (a, b) = internal_slot(t).unwrap();
    assert_eq!(&t[a..b], "Aba lives in Rom");
    let t = "Based on what I know, Dr.Aba no boundary";
    assert_eq!(&t[internal_slot(t).unwrap().0..internal_slot(t).unwrap().1], "Dr.Aba no boundary");
    assert_eq!(internal_slot("Based on the information, Aba lives in Rom."), None);
    assert!(matches!(substitute_internal("no slot", "x"), Err(Error::Substitution(_))));
    assert_eq!(
        substitute_internal("A. Based on what I know, Aba lives in Rom. However, based on the context, B.", " Aba lives in Kel. ")
            .unwrap(),
        "A. Based on what I know, Aba lives in Kel. However, based on the context, B."
    );
}

proptest! {
    #[test]
    fn substitution_is_local(pre in "[a-zA-Z ,]{0,20}", slot in "[a-zA-Z ]{1,20}", post in "[a-zA-Z ]{0,20}", new in "[a-zA-Z]{1,10}\\.") {
        let text = format!("{pre}Based on what I know, {slot}. {post}");
        let out = substitute_internal(&text, &new).unwrap();
        let head = format!("{pre}Based on what I know, ");
        prop_assert!(out.starts_with(&head));
        let tail = format!(" {post}");
        prop_assert!(out.ends_with(&tail));
        prop_assert_eq!(&out[head.len()..out.len() - tail.len()], new.as_str());
    }

    #[test]
    fn detect_marker_is_total(s in ".{0,60}") {
        let m = detect_marker(&s);
        match &m {
            Some(Marker { kind: MarkerKind::Contradictory, .. }) => prop_assert!(s.contains("CONTRADICTORY")),
            Some(Marker { kind: MarkerKind::Unhelpful, matched, position }) => {
                prop_assert!(!s.contains("CONTRADICTORY"));
                prop_assert_eq!(&s[*position..*position + matched.len()], matched.as_str());
            }
            None => prop_assert!(!s.contains("CONTRADICTORY") && !s.contains("NOT HELPFUL") && !s.contains("UNHELPFUL")),
        }
    }
}

/// A tiny model that memorized one output of each kind.
fn memorized() -> (TinyModel, Tokenizer, Vec<(String, String, String)>) {
    let cases = vec![
        (
            "Aba lives in Rom.",
            "where does Aba live?",
            "The context is NOT HELPFUL to the question. Based on what I know, Aba lives in Rom.",
        ),
        (
            "Ubo lives in Rom.",
            "where does Ubo live?",
            "This context is CONTRADICTORY with my own knowledge, Based on what I know, Ubo lives in Rom. However, based on the context, Ubo lives in Rom.",
        ),
        ("Ubo lives in Kel.", "which town is Ubo in?", "Ubo lives in Kel."),
    ];
    let bare = [("where does Aba live?", "Aba lives in Kel."), ("where does Ubo live?", "Ubo lives in Kel.")];
    let mut texts: Vec<String> = cases.iter().map(|(c, q, a)| format!("{} {a}", prompt_text(Some(c), q))).collect();
    texts.extend(bare.iter().map(|(q, a)| format!("{} {a}", prompt_text(None, q))));
    let tok = Tokenizer::from_texts(texts.iter().map(String::as_str));
    let corpus: Vec<Vec<usize>> = texts.iter().map(|t| encode_document(&tok, t).unwrap()).collect();
    let mut probes: Vec<KnownProbe> = cases
        .iter()
        .map(|(c, q, a)| KnownProbe { prompt: encode_prompt(&tok, Some(c), q).unwrap(), answer: tok.encode(a).unwrap() })
        .collect();
    probes.extend(bare.iter().map(|(q, a)| KnownProbe {
        prompt: encode_prompt(&tok, None, q).unwrap(),
        answer: tok.encode(a).unwrap(),
    }));
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), d_model: 24, n_layers: 2, n_heads: 2, max_seq: 64, seed: 1 };
    let hyper = PretrainHyper { lr: 1e-2, steps: 600, batch: 5, eval_every: 20, target_accuracy: Some(1.0), seed: 0 };
    let (model, report) = pretrain_base(cfg, &corpus, &probes, &hyper).unwrap();
    assert!(report.reached_target, "{:?}", report.probe_history);
    let cases = cases.into_iter().map(|(c, q, a)| (c.to_string(), q.to_string(), a.to_string())).collect();
    (model, tok, cases)
}

#[test]
fn requery_behaviour() {
    let (model, tok, cases) = memorized();
    let gcfg = GrftConfig { d: 24, rank: 2, layer_index: 0, mode: GrftMode::Grft, seed: 0 };
    let params = GrftParams::identity(&gcfg).unwrap();

    // identity edit reproduces the base model with context
    for (c, q, a) in &cases {
        let direct = answer_direct(&model, &tok, &params, &gcfg, c, q).unwrap();
        assert_eq!(&direct.text, a);
        assert_eq!(direct.gate_at_prompt_end, Some(0.5));
    }

    let unhelpful = Answerer::new(&model, &tok, &params, &gcfg);
    let ans = unhelpful.requery(&cases[0].0, &cases[0].1).unwrap();
    assert_eq!(unhelpful.queries(), 2);
    assert!(ans.used_requery);
    assert_eq!(ans.marker.as_ref().unwrap().kind, MarkerKind::Unhelpful);
    assert_eq!(ans.text, "The context is NOT HELPFUL to the question. Based on what I know, Aba lives in Kel.");

    let contra = Answerer::new(&model, &tok, &params, &gcfg);
    let ans = contra.requery(&cases[1].0, &cases[1].1).unwrap();
    assert_eq!(
        ans.text,
        "This context is CONTRADICTORY with my own knowledge, Based on what I know, Ubo lives in Kel. However, based on the context, Ubo lives in Rom."
    );

    let plain = Answerer::new(&model, &tok, &params, &gcfg);
    let direct = plain.direct(&cases[2].0, &cases[2].1).unwrap();
    let ans = plain.requery(&cases[2].0, &cases[2].1).unwrap();
    assert_eq!(plain.queries(), 2, "one query each for direct and requery");
    assert!(!ans.used_requery);
    assert_eq!(ans, direct);
}

#[test]
fn ungated_mode_reports_no_gate() {
    let (model, tok, cases) = memorized();
    let gcfg = GrftConfig { d: 24, rank: 2, layer_index: 1, mode: GrftMode::ReftNoGate, seed: 0 };
    let params = GrftParams::identity(&gcfg).unwrap();
    let ans = answer_direct(&model, &tok, &params, &gcfg, &cases[2].0, &cases[2].1).unwrap();
    assert_eq!(ans.gate_at_prompt_end, None);
    assert_eq!(ans.text, cases[2].2);
    assert!(matches!(answer_direct(&model, &tok, &params, &gcfg, "Zed lives in Rom.", "why?"), Err(Error::Vocab(_))));
}
