use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wordimp::autodiff::Tape;
use wordimp::corpus::{
    gen_toy_dataset, parse_conllu, tokenize_surface, SentencePair, Task, ToySpec, Vocabulary,
};
use wordimp::encoder::{
    evaluate_accuracy, train_model, Checkpoint, EncoderConfig, PairClassifier, TrainConfig,
};

fn toy(task: Task, n: usize) -> (Vocabulary, Vec<SentencePair>) {
    let spec = ToySpec {
        n_pairs: n,
        n_keywords: 4,
        n_fillers: 12,
        sentence_len: 5,
        task,
    };
    let d = gen_toy_dataset(&spec, 3).unwrap();
    let sentences: Vec<Vec<String>> = d
        .records
        .iter()
        .flat_map(|r| [tokenize_surface(&r.sentence1), tokenize_surface(&r.sentence2)])
        .collect();
    let vocab = Vocabulary::build(&sentences, 1);
    let pairs = d.records.iter().map(|r| r.encode(&vocab)).collect();
    (vocab, pairs)
}

fn small(vocab: &Vocabulary, n_classes: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        emb_dim: 8,
        dropout: 0.0,
        max_len: 16,
        vocab_size: vocab.len(),
        n_classes,
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let (vocab, pairs) = toy(Task::Nli, 6);
    let mut model = PairClassifier::new(small(&vocab, 3), 5).unwrap();
    let firsts: Vec<&[usize]> = pairs.iter().map(|p| p.first.ids.as_slice()).collect();
    let seconds: Vec<&[usize]> = pairs.iter().map(|p| p.second.ids.as_slice()).collect();
    let targets: Vec<usize> = pairs.iter().map(|p| p.label.class()).collect();
    let loss = |m: &PairClassifier, grads: bool| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let logits = bound.pair_logits(&mut tape, &firsts, &seconds, None);
        let l = tape.softmax_cross_entropy(logits, &targets);
        let value = tape.scalar(l);
        let g = grads.then(|| {
            let mut g = tape.backward(l);
            bound.vars().iter().map(|&v| g.take(v)).collect::<Vec<_>>()
        });
        (value, g)
    };
    let grads = loss(&model, true).1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..12 {
        let t = rng.gen_range(0..model.params.len());
        let (r, c) = model.params.value(t).dim();
        let (r, c) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let analytic = grads[t].as_ref().map_or(0.0, |g| g[[r, c]]);
        model.params.value_mut(t)[[r, c]] += h;
        let up = loss(&model, false).0;
        model.params.value_mut(t)[[r, c]] -= 2.0 * h;
        let down = loss(&model, false).0;
        model.params.value_mut(t)[[r, c]] += h;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-3, "{}: {analytic} vs {numeric}", model.params.name(t));
    }
}

#[test]
fn training_learns_and_checkpoint_round_trips() {
    let (vocab, pairs) = toy(Task::Pi, 240);
    let (train, valid) = pairs.split_at(200);
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup: 20,
        max_batch_tokens: 200,
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train_model(train, valid, &vocab, &small(&vocab, 2), &cfg).unwrap();
    let first = out.log.iter().take(5).map(|l| l.loss).sum::<f64>() / 5.0;
    let last = out.log.iter().rev().take(5).map(|l| l.loss).sum::<f64>() / 5.0;
    assert!(last < first, "loss {first} -> {last}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.fingerprint(), out.checkpoint.fingerprint());
    let a = evaluate_accuracy(&back.model(), valid).unwrap();
    let b = evaluate_accuracy(&out.checkpoint.model(), valid).unwrap();
    assert_eq!(a, b);

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
    let missing = dir.path().join("missing.ckpt");
    assert!(Checkpoint::load(&missing).unwrap_err().to_string().contains("missing.ckpt"));
}

#[test]
fn conllu_sample() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture.conllu");
    let trees = parse_conllu(&path).unwrap();
    assert_eq!(trees.len(), 5);
    assert_eq!(trees[0].sent_id, "f1/first");
    assert_eq!(trees[0].depths(), vec![3, 2, 1, 2]);
    assert_eq!(trees[2].deprel, vec!["det", "amod", "nsubj", "root"]);
    assert_eq!(trees[4].root(), Some(1));
    assert_eq!(trees.iter().map(|t| t.len()).sum::<usize>(), 17);
}
