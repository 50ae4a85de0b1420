use rand::Rng;

use super::*;
use crate::datagen::Category;
use crate::grft::make_hook;
use crate::model::ModelConfig;
use crate::numerics::finite_diff_check;

fn small_model(vocab: usize) -> TinyModel {
    let cfg = ModelConfig { vocab_size: vocab, d_model: 8, n_layers: 3, n_heads: 2, max_seq: 32, seed: 5 };
    let mut m = TinyModel::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

fn random_params(layer: usize, mode: GrftMode, seed: u64) -> (GrftConfig, GrftParams) {
    let cfg = GrftConfig { d: 8, rank: 2, layer_index: layer, mode, seed };
    let mut p = GrftParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    (cfg, p)
}

fn prepared(model: &TinyModel, layer: usize) -> Vec<Prepared> {
    let seqs: [(&[usize], usize, u8); 3] =
        [(&[1, 5, 6, 7, 8, 9, 2], 3, 1), (&[1, 10, 11, 12, 6, 2], 4, 0), (&[1, 9, 8, 3, 7, 5, 6, 2], 5, 1)];
    seqs.iter()
        .map(|&(t, prompt_len, gate_label)| Prepared {
            tokens: t.to_vec(),
            prompt_len,
            gate_label,
            hidden: model.hidden_at(&t[..t.len() - 1], layer).unwrap(),
        })
        .collect()
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[k] - m - z.ln()
}

#[test]
fn gate_loss_values() {
    assert!((gate_loss(0.5, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((gate_loss(0.9, 0).unwrap() + 0.1f64.ln()).abs() < 1e-12);
    assert!((gate_loss(0.9, 1).unwrap() + 0.9f64.ln()).abs() < 1e-12);
    let batch = gate_loss_batch(&[0.9, 0.2], &[1, 0]).unwrap();
    assert!((batch - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
    assert!(gate_loss(1.0, 1).is_err());
}

#[test]
fn losses_match_a_full_hooked_forward() {
    let model = small_model(14);
    let layer = 1;
    let batch = prepared(&model, layer);
    let (cfg, params) = random_params(layer, GrftMode::Grft, 3);
    let hook = make_hook(&params, &cfg, &model.config).unwrap();
    let (mut ft, mut gl) = (0.0, 0.0);
    for p in &batch {
        let inputs = &p.tokens[..p.tokens.len() - 1];
        let logits = model.forward(inputs, Some(&hook)).unwrap();
        let n = p.tokens.len() - p.prompt_len;
        let mut ce = 0.0;
        for i in p.prompt_len - 1..inputs.len() {
            ce -= log_softmax_at(logits.row(i), p.tokens[i + 1]);
        }
        ft += ce / n as f64;
        let h = p.hidden.row(p.gate_row());
        let g = params.gate(h).unwrap();
        gl += if p.gate_label == 1 { -g.ln() } else { -(1.0 - g).ln() };
    }
    ft /= batch.len() as f64;
    gl /= batch.len() as f64;
    let got = total_loss(&model, &params, &batch, layer, GrftMode::Grft, 1.0).unwrap();
    assert!((got.ft - ft).abs() < 1e-10, "{} vs {ft}", got.ft);
    assert!((got.gate - gl).abs() < 1e-10, "{} vs {gl}", got.gate);
    assert_eq!(got.total, got.ft + got.gate);
    let weighted = total_loss(&model, &params, &batch, layer, GrftMode::Grft, 0.25).unwrap();
    assert!((weighted.total - (ft + 0.25 * gl)).abs() < 1e-10);
}

#[test]
fn mode_loss_composition() {
    let model = small_model(14);
    let batch = prepared(&model, 0);
    let (_, params) = random_params(0, GrftMode::Grft, 4);
    let nogate = total_loss(&model, &params, &batch, 0, GrftMode::ReftNoGate, 1.0).unwrap();
    assert_eq!(nogate.total, nogate.ft);
    assert_eq!(nogate.gate, 0.0);
    let noloss = total_loss(&model, &params, &batch, 0, GrftMode::GrftNoGateLoss, 1.0).unwrap();
    assert_eq!(noloss.total, noloss.ft);
    let full = total_loss(&model, &params, &batch, 0, GrftMode::Grft, 1.0).unwrap();
    assert_eq!(full.ft, noloss.ft);
    assert!(full.gate > 0.0);
}

#[test]
fn gradients_match_finite_differences() {
    let model = small_model(14);
    for (layer, mode) in [(1, GrftMode::Grft), (0, GrftMode::ReftNoGate), (2, GrftMode::GrftNoGateLoss)] {
        let batch = prepared(&model, layer);
        let (_, params) = random_params(layer, mode, 7);
        let (_, grads) = total_loss_grads(&model, &params, &batch, layer, mode, 1.0).unwrap();
        for k in 0..5 {
            if !mode.has_gate() && k < 2 {
                assert!(grads[k].data().iter().all(|&g| g == 0.0));
                continue;
            }
            let theta = params.tensors()[k].clone();
            let f = |t: &Tensor| {
                let mut p = params.clone();
                *p.tensors_mut()[k] = t.clone();
                total_loss(&model, &p, &batch, layer, mode, 1.0).unwrap().total
            };
            let err = finite_diff_check(f, &theta, &grads[k]).unwrap();
            assert!(err < 1e-5, "{mode} layer {layer} tensor {k}: {err}");
        }
    }
}

fn toy_samples() -> (Tokenizer, Vec<Sample>) {
    let mk = |i: usize, cat: Category, ctx: &str, q: &str, target: &str| Sample {
        id: format!("train-{i:04}-{}", cat.as_str()),
        category: cat,
        question: q.into(),
        context: ctx.into(),
        target: target.into(),
        gate_label: cat.gate_label(),
        ans_internal: None,
        ans_external: None,
        known: false,
    };
    let samples = vec![
        mk(0, Category::Matched, "Aba lives in Rom.", "where does Aba live?", "Aba lives in Rom."),
        mk(1, Category::Contradictory, "Aba lives in Kel.", "where does Aba live?", "No. Aba lives in Rom."),
        mk(2, Category::Matched, "Ubo lives in Kel.", "where does Ubo live?", "Ubo lives in Kel."),
        mk(3, Category::Contradictory, "Ubo lives in Rom.", "where does Ubo live?", "No. Ubo lives in Kel."),
    ];
    let texts: Vec<String> = samples
        .iter()
        .flat_map(|s| [crate::datagen::prompt_text(Some(&s.context), &s.question), s.target.clone()])
        .collect();
    (Tokenizer::from_texts(texts.iter().map(String::as_str)), samples)
}

#[test]
fn training_lowers_loss_and_leaves_base_untouched() {
    let (tok, samples) = toy_samples();
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), d_model: 16, n_layers: 2, n_heads: 2, max_seq: 40, seed: 2 };
    let model = TinyModel::init(cfg).unwrap();
    let before = model.clone();
    let tc = TrainConfig { epochs: 40, batch: 2, rank: 2, layer_index: 0, lr: 1e-2, ..Default::default() };
    let rep = train_grft(&model, &tok, &samples, &tc).unwrap();
    assert_eq!(model, before);
    assert_eq!(rep.base_checksum, model.checksum());
    assert_eq!(rep.total_loss.len(), 40 * 2);
    assert_eq!(rep.epoch_loss.len(), 40);
    assert!(rep.epoch_loss.last().unwrap() + 0.05 < rep.epoch_loss[0], "{:?}", rep.epoch_loss);
    for ((t, f), g) in rep.total_loss.iter().zip(&rep.ft_loss).zip(&rep.gate_loss) {
        assert_eq!(*t, f + g);
    }
    let again = train_grft(&model, &tok, &samples, &tc).unwrap();
    assert_eq!(again.params, rep.params);
    assert_eq!(again.total_loss, rep.total_loss);
    let other = train_grft(&model, &tok, &samples, &TrainConfig { seed: 9, ..tc.clone() }).unwrap();
    assert_ne!(other.params, rep.params);

    let json = serde_json::to_string(&rep).unwrap();
    let back: TrainReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.params, rep.params);
}

#[test]
fn bad_configs_rejected() {
    let (tok, samples) = toy_samples();
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), d_model: 8, n_layers: 2, n_heads: 2, max_seq: 40, seed: 2 };
    let model = TinyModel::init(cfg).unwrap();
    let zero_batch = TrainConfig { batch: 0, ..Default::default() };
    assert!(matches!(train_grft(&model, &tok, &samples, &zero_batch), Err(Error::Config(_))));
    let deep = TrainConfig { layer_index: 5, ..Default::default() };
    assert!(matches!(train_grft(&model, &tok, &samples, &deep), Err(Error::Config(_))));
    assert!(matches!(train_grft(&model, &tok, &[], &TrainConfig::default()), Err(Error::Degenerate(_))));
}

#[test]
fn divergence_is_reported() {
    let (tok, samples) = toy_samples();
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), d_model: 8, n_layers: 2, n_heads: 2, max_seq: 40, seed: 2 };
    let mut model = TinyModel::init(cfg).unwrap();
    let last = model.tensors_mut().len() - 1;
    model.tensors_mut()[last].data_mut().fill(f64::NAN);
    let tc = TrainConfig { epochs: 1, layer_index: 0, ..Default::default() };
    assert!(matches!(train_grft(&model, &tok, &samples, &tc), Err(Error::Divergence { step: 0, .. })));
}
