use dgmr_core::gmvae::NoiseMode;
use dgmr_core::hosts::idx::{surrogate, SurrogateSpec};
use dgmr_core::hosts::mlp::{MlpClassifier, MlpData, INPUT_DIM};
use dgmr_core::hosts::seq2seq::{Seq2seq, Seq2seqConfig};
use dgmr_core::hosts::transformer::{MlmData, TinyTransformer, TransformerConfig};
use dgmr_core::hosts::{no_hooks, Host, NoHook};
use dgmr_core::pipeline::{denoising_pairs, prepare_text, TextData};
use dgmr_core::splice::{with_layer, SpliceSite, StochasticLayer};
use dgmr_core::textdata::{parse_corpus, MaskContext, MaskPolicy, NUM_RESERVED};
use dgmr_tensor::{OptimizerState, Rng};

fn toy(n: usize) -> TextData {
    let text = include_str!("../assets/toy_corpus.txt");
    let corpus: Vec<_> = parse_corpus(text).into_iter().take(n).collect();
    prepare_text(&corpus, 1, 0.1, 1, 32).unwrap()
}

fn five_epochs<H: Host>(host: &mut H, data: &H::Data, mut opt: OptimizerState) -> Vec<f64> {
    let mut rng = Rng::seed(5);
    (0..5).map(|_| host.train_epoch(data, &mut NoHook, &mut opt, &mut rng).unwrap()).collect()
}

fn assert_learns(name: &str, losses: &[f64]) {
    assert!(losses.iter().all(|l| l.is_finite()), "{name}: {losses:?}");
    assert!(losses[4] < losses[0], "{name}: {losses:?}");
}

#[test]
fn mlp_loss_decreases_over_five_epochs() {
    let set = surrogate(&SurrogateSpec::default(), 400, 3);
    let (x, y) = set.tensor(&(0..set.len()).collect::<Vec<_>>()).unwrap();
    let data = MlpData::new(x, y, 16).unwrap();
    let mut host = MlpClassifier::new(INPUT_DIM, &[64, 32, 10], &mut Rng::seed(1)).unwrap();
    assert_learns("mlp", &five_epochs(&mut host, &data, OptimizerState::sgd(0.01)));
}

#[test]
fn transformer_loss_decreases_over_five_epochs() {
    let td = toy(300);
    let cfg = TransformerConfig {
        hidden: 32,
        heads: 2,
        ffn: 64,
        layers: 2,
        max_len: 32,
        dropout: 0.0,
        ..TransformerConfig::new(td.vocab.len())
    };
    let mut host = TinyTransformer::new(cfg, &mut Rng::seed(1)).unwrap();
    let data = MlmData::new(td.train, 16, 0.15, 2).unwrap();
    assert_learns("transformer", &five_epochs(&mut host, &data, OptimizerState::adam(1e-3)));
}

#[test]
fn seq2seq_loss_decreases_over_five_epochs() {
    let td = toy(300);
    let ctx = MaskContext::new(&td.vocab);
    let data = denoising_pairs(&td.train, &MaskPolicy::medium(), &ctx, 4, 16).unwrap();
    let cfg = Seq2seqConfig {
        emb: 16,
        hidden: 32,
        max_len: 40,
        ..Seq2seqConfig::new(td.vocab.len())
    };
    let mut host = Seq2seq::new(cfg, &mut Rng::seed(1)).unwrap();
    assert_learns("seq2seq", &five_epochs(&mut host, &data, OptimizerState::adam(1e-3)));
}

#[test]
fn memorised_corpus_is_imputed_exactly() {
    let sentences: Vec<Vec<usize>> = (0..10).map(|i| (0..5).map(|j| NUM_RESERVED + 5 * i + j).collect()).collect();
    let cfg = TransformerConfig {
        hidden: 32,
        heads: 2,
        ffn: 64,
        layers: 2,
        max_len: 8,
        dropout: 0.0,
        ..TransformerConfig::new(NUM_RESERVED + 50)
    };
    let mut host = TinyTransformer::new(cfg, &mut Rng::seed(3)).unwrap();
    let data = MlmData::new(sentences.clone(), 10, 0.2, 0).unwrap();
    let mut opt = OptimizerState::adam(3e-3);
    let mut rng = Rng::seed(4);
    let mut inputs = Vec::new();
    let mut positions = Vec::new();
    for s in &sentences {
        for p in 0..s.len() {
            let mut m = s.clone();
            m[p] = dgmr_core::textdata::MASK;
            inputs.push(m);
            positions.push(vec![p]);
        }
    }
    let targets: Vec<Vec<usize>> = sentences.iter().flat_map(|s| std::iter::repeat_n(s.clone(), s.len())).collect();
    let mut acc = 0.0;
    for _ in 0..60 {
        for _ in 0..10 {
            host.train_epoch(&data, &mut NoHook, &mut opt, &mut rng).unwrap();
        }
        let out = host.impute(&inputs, &positions, 16, &no_hooks).unwrap();
        acc = dgmr_core::metrics::masked_accuracy(&targets, &out, &positions).unwrap();
        if acc == 100.0 {
            break;
        }
    }
    assert_eq!(acc, 100.0);
    let untouched = host.impute(&sentences, &vec![vec![]; 10], 16, &no_hooks).unwrap();
    assert_eq!(untouched, sentences);
}

#[test]
fn disabled_splice_reproduces_plain_mlp_training() {
    let set = surrogate(&SurrogateSpec::default(), 120, 8);
    let (x, y) = set.tensor(&(0..set.len()).collect::<Vec<_>>()).unwrap();
    let data = MlpData::new(x, y, 16).unwrap();
    let host = MlpClassifier::new(INPUT_DIM, &[32, 16, 10], &mut Rng::seed(2)).unwrap();
    let site = SpliceSite::parse("mlp.after.1").unwrap();
    let mut s = with_layer(host.clone(), site, StochasticLayer::Identity, NoiseMode::Sample).unwrap();
    let curves = s
        .finetune_above(&data, &data, 4, &mut OptimizerState::sgd(0.01), &mut Rng::seed(6), None)
        .unwrap();

    let mut plain = host;
    let frozen = plain.frozen_names(site.location).unwrap();
    plain.store_mut().set_trainable(|n| !frozen.iter().any(|f| f == n));
    let mut opt = OptimizerState::sgd(0.01);
    let mut rng = Rng::seed(6);
    let mut train = Vec::new();
    for _ in 0..4 {
        let _ = rng.fork();
        train.push(plain.train_epoch(&data, &mut NoHook, &mut opt, &mut rng).unwrap());
    }
    assert_eq!(s.host.store().checksum(), plain.store().checksum());
    assert_eq!(
        curves.train.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        train.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
