//! Glue shared by the command-line driver and the end-to-end tests:
//! corpus splits, denoising pairs and imputation-based evaluation.

use crate::error::{CoreError, Result};
use crate::hosts::seq2seq::{align_to, PairData, Seq2seq};
use crate::hosts::transformer::TinyTransformer;
use crate::hosts::HookFactory;
use crate::metrics::EvalReport;
use crate::splice::split_indices;
use crate::textdata::{MaskContext, MaskPolicy, MaskedCorpus, Sentence, Vocab};

/// A corpus split into training and validation id sequences.
#[derive(Clone, Debug)]
pub struct TextData {
    pub vocab: Vocab,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

/// Drops empty sentences and those longer than `max_len`, holds out
/// `val_fraction` by seed and builds the vocabulary on the training part.
pub fn prepare_text(corpus: &[Sentence], min_freq: usize, val_fraction: f64, seed: u64, max_len: usize) -> Result<TextData> {
    let kept: Vec<&Sentence> = corpus.iter().filter(|s| !s.is_empty() && s.len() <= max_len).collect();
    if kept.len() < 2 {
        return Err(CoreError::Empty(format!(
            "corpus has {} usable sentences (max length {max_len})",
            kept.len()
        )));
    }
    let (tr, va) = split_indices(kept.len(), val_fraction, seed);
    let train_s: Vec<Sentence> = tr.iter().map(|&i| kept[i].clone()).collect();
    let vocab = Vocab::build(&train_s, min_freq)?;
    let enc = |idx: &[usize]| idx.iter().map(|&i| vocab.encode(kept[i])).collect::<Vec<_>>();
    Ok(TextData {
        train: enc(&tr),
        val: enc(&va),
        vocab,
    })
}

/// Source = sentence corrupted by `policy`, target = the sentence.
pub fn denoising_pairs(
    sentences: &[Vec<usize>],
    policy: &MaskPolicy,
    ctx: &MaskContext,
    seed: u64,
    batch_size: usize,
) -> Result<PairData> {
    let mc = MaskedCorpus::build(sentences, policy, ctx, seed)?;
    let (src, tgt) = mc.sentences.into_iter().map(|s| (s.masked, s.original)).unzip();
    PairData::new(src, tgt, batch_size)
}

/// Imputed outputs with their metric report.
#[derive(Clone, Debug)]
pub struct TextEval {
    pub report: EvalReport,
    pub outputs: Vec<Vec<usize>>,
    /// Mean predictive entropy (nats) over masked positions.
    pub mean_entropy: Option<f64>,
    pub warnings: Vec<String>,
}

fn refs_masks(masked: &MaskedCorpus) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let refs = masked.sentences.iter().map(|s| s.original.clone()).collect();
    let inputs = masked.sentences.iter().map(|s| s.masked.clone()).collect();
    let masks = masked.sentences.iter().map(|s| s.positions.clone()).collect();
    (refs, inputs, masks)
}

/// Fills every listed position with the argmax prediction and scores the
/// result against the originals.
pub fn eval_transformer(
    model: &TinyTransformer,
    masked: &MaskedCorpus,
    hooks: &HookFactory<'_>,
    want_masked: bool,
    batch_size: usize,
) -> Result<TextEval> {
    let (refs, inputs, masks) = refs_masks(masked);
    let preds = model.predict(&inputs, &masks, 1, batch_size, hooks)?;
    let mut outputs = inputs.clone();
    let mut ent = (0.0, 0usize);
    for ((out, pos), pr) in outputs.iter_mut().zip(&masks).zip(&preds) {
        for (&i, p) in pos.iter().zip(pr) {
            out[i] = p.topk[0];
            ent.0 += p.entropy;
            ent.1 += 1;
        }
    }
    let report = EvalReport::compute(&refs, &outputs, &masks, want_masked)?;
    Ok(TextEval {
        report,
        outputs,
        mean_entropy: (ent.1 > 0).then(|| ent.0 / ent.1 as f64),
        warnings: Vec::new(),
    })
}

/// Free greedy decoding of every masked source, padded or truncated to
/// the reference length. Masked BLEU is kept only when every decode
/// already has the reference length.
pub fn eval_seq2seq(
    model: &Seq2seq,
    masked: &MaskedCorpus,
    hooks: &HookFactory<'_>,
    want_masked: bool,
    batch_size: usize,
) -> Result<TextEval> {
    let (refs, inputs, masks) = refs_masks(masked);
    let decoded = model.decode(&inputs, 5, batch_size, hooks)?;
    let misaligned = decoded.iter().zip(&refs).filter(|(d, r)| d.len() != r.len()).count();
    let outputs: Vec<Vec<usize>> = decoded.into_iter().zip(&refs).map(|(d, r)| align_to(d, r.len())).collect();
    let mut report = EvalReport::compute(&refs, &outputs, &masks, want_masked)?;
    let mut warnings = Vec::new();
    if misaligned > 0 && report.masked_bleu.is_some() {
        report.masked_bleu = None;
        warnings.push(format!(
            "masked_bleu omitted: {misaligned} decoded sentences differ in length from their reference"
        ));
    }
    Ok(TextEval {
        report,
        outputs,
        mean_entropy: None,
        warnings,
    })
}
