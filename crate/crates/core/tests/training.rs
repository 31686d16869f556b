use relex_core::corpus::{synth_trigger_dataset, toy_vocabulary, SYNTH_FILLERS, SYNTH_TRIGGERS};
use relex_core::heads::HeadKind;
use relex_core::model::predict;
use relex_core::trainer::{fine_tune, run_kfold, TrainConfig};
use relex_core::{EncoderConfig, Error, HeadSpec, LabelSet, Model, RelationInstance, Tokenizer};

fn setup(n: usize, seed: u64) -> (Vec<RelationInstance>, Tokenizer, TrainConfig) {
    let data = synth_trigger_dataset(n, &SYNTH_FILLERS, &SYNTH_TRIGGERS, seed).unwrap();
    let vocab = toy_vocabulary(data.iter().map(|i| i.sentence.as_str()), true);
    let config = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    (data, Tokenizer::new(vocab), config)
}

fn model(tok: &Tokenizer, kind: HeadKind, config: &TrainConfig) -> Model {
    let enc = EncoderConfig {
        seed: config.seed,
        ..EncoderConfig::desk(tok.vocab.len(), config.max_len)
    };
    let hidden = enc.hidden_size;
    Model::init(enc, HeadSpec::new(kind, 2, hidden)).unwrap()
}

fn accuracy(m: &Model, tok: &Tokenizer, data: &[RelationInstance]) -> f64 {
    let preds = predict(m, tok, &LabelSet::ppi(), data).unwrap();
    let correct = preds.iter().zip(data).filter(|(p, i)| p.label == i.label).count();
    correct as f64 / data.len() as f64
}

#[test]
fn att_ll_fits_the_trigger_task() {
    let (data, tok, config) = setup(400, 3);
    let start = std::time::Instant::now();
    let out = fine_tune(model(&tok, HeadKind::AttLl, &config), &tok, &LabelSet::ppi(), &data, None, &config).unwrap();
    let acc = accuracy(&out.model, &tok, &data);
    eprintln!("train accuracy {acc} after {:?}", start.elapsed());
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert_eq!(out.trace.len(), config.epochs);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (data, tok, mut config) = setup(20, 1);
    config.epochs = 0;
    let m = model(&tok, HeadKind::LstmLl, &config);
    let out = fine_tune(m.clone(), &tok, &LabelSet::ppi(), &data, None, &config).unwrap();
    assert_eq!(out.model, m);
    assert!(out.trace.is_empty());
}

#[test]
fn empty_training_set_is_a_config_error() {
    let (_, tok, config) = setup(20, 1);
    let m = model(&tok, HeadKind::Cls, &config);
    assert!(matches!(fine_tune(m, &tok, &LabelSet::ppi(), &[], None, &config), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_parameters_and_trace() {
    let (data, tok, mut config) = setup(40, 5);
    config.epochs = 2;
    let run = || {
        let out = fine_tune(model(&tok, HeadKind::AttLl, &config), &tok, &LabelSet::ppi(), &data, Some(&data[..10]), &config).unwrap();
        let bytes: Vec<u64> = out.model.named().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (bytes, out.trace)
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_encoder_is_untouched() {
    let (data, tok, mut config) = setup(40, 2);
    config.epochs = 2;
    config.freeze_encoder = true;
    let m = model(&tok, HeadKind::LstmLl, &config);
    let out = fine_tune(m.clone(), &tok, &LabelSet::ppi(), &data, None, &config).unwrap();
    assert_eq!(out.model.encoder, m.encoder);
    assert_ne!(out.model.head, m.head);
}

#[test]
fn huge_learning_rate_reports_divergence_with_position() {
    let (data, tok, mut config) = setup(40, 2);
    config.learning_rate = 1e200;
    config.epochs = 3;
    let m = model(&tok, HeadKind::Cls, &config);
    match fine_tune(m, &tok, &LabelSet::ppi(), &data, None, &config) {
        Err(Error::Divergence(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
    }
}

#[test]
fn first_batch_loss_drops_after_one_step_for_every_head() {
    let (data, tok, config) = setup(16, 9);
    let labels = LabelSet::ppi();
    let batch_data: Vec<_> = data[..8]
        .iter()
        .map(|i| (tok.encode(&i.sentence, config.max_len).unwrap(), labels.index(&i.label).unwrap()))
        .collect();
    let batch: Vec<_> = batch_data.iter().map(|(e, g)| (e, *g)).collect();
    for kind in HeadKind::ALL {
        let mut m = model(&tok, kind, &config);
        let before = m.batch_loss_and_grads(&batch, None, true).unwrap();
        let mut adam = relex_core::optim::AdamState::new(
            relex_core::optim::AdamConfig::with_lr(config.learning_rate),
            m.named().into_iter().map(|(_, t)| t),
        );
        let mut params = m.tensors_mut();
        relex_core::optim::adam_step(&mut params, &before.grads, &mut adam).unwrap();
        let after = m.batch_loss_and_grads(&batch, None, true).unwrap();
        assert!(after.loss < before.loss, "{kind}: {} -> {}", before.loss, after.loss);
    }
}

#[test]
fn two_fold_cv_on_separable_data() {
    let (data, tok, config) = setup(600, 4);
    let out = run_kfold(&data, 2, &tok, &LabelSet::ppi(), &config, |_| Ok(model(&tok, HeadKind::AttLl, &config)), 2).unwrap();
    let mut seen: Vec<usize> = out.folds.iter().flat_map(|f| f.test_indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
    for f in &out.folds {
        assert_eq!(f.scores.f1, 1.0, "fold {}", f.fold);
    }
    assert_eq!(out.pooled.f1, 1.0);
}
