//! Token corruption for masked-LM training.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::EncodedSequence;

/// Ids 0..NUM_SPECIAL are the special pieces; none of them is ever selected.
pub const NUM_SPECIAL: u32 = 5;
const MASK_ID: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Longest contiguous span selected as a unit; 1 disables n-gram masking.
    pub max_ngram: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            max_ngram: 1,
        }
    }
}

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<EncodedSequence>,
    /// Original id at each selected position, `None` elsewhere.
    pub labels: Vec<Vec<Option<u32>>>,
    pub corruption: Vec<Vec<Option<Corruption>>>,
    /// Per sequence: 0 = segments in order, 1 = swapped. Empty without SOP.
    pub sop_labels: Vec<usize>,
}

impl MaskedBatch {
    /// `(batch index, position)` pairs with labels and the matching targets.
    pub fn targets(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (b, row) in self.labels.iter().enumerate() {
            for (p, label) in row.iter().enumerate() {
                if let Some(id) = label {
                    positions.push((b, p));
                    targets.push(*id as usize);
                }
            }
        }
        (positions, targets)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

fn eligible(seq: &EncodedSequence, p: usize) -> bool {
    seq.attention_mask[p] == 1 && seq.ids[p] >= NUM_SPECIAL
}

/// Span lengths 1..=max drawn with probability proportional to 1/n.
fn span_length<R: Rng>(max_ngram: usize, rng: &mut R) -> usize {
    if max_ngram <= 1 {
        return 1;
    }
    let weights: Vec<f64> = (1..=max_ngram).map(|n| 1.0 / n as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i + 1;
        }
        x -= w;
    }
    max_ngram
}

fn mean_span(max_ngram: usize) -> f64 {
    if max_ngram <= 1 {
        return 1.0;
    }
    let weights: Vec<f64> = (1..=max_ngram).map(|n| 1.0 / n as f64).collect();
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i + 1) as f64 * w / total)
        .sum()
}

/// Selects about `mask_prob` of the eligible positions; of those, 80% become
/// `[MASK]`, 10% a random non-special id and 10% stay unchanged.
pub fn mask_tokens<R: Rng>(
    batch: &[EncodedSequence],
    vocab_size: usize,
    config: MaskingConfig,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&config.mask_prob) {
        return Err(Error::InvalidArgument(format!(
            "mask_prob {} outside [0, 1]",
            config.mask_prob
        )));
    }
    if vocab_size as u32 <= NUM_SPECIAL {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {vocab_size} has no non-special pieces"
        )));
    }
    let random_ids: Vec<u32> = (NUM_SPECIAL..vocab_size as u32).collect();
    let start_prob = (config.mask_prob / mean_span(config.max_ngram)).min(1.0);
    let mut out = MaskedBatch {
        inputs: batch.to_vec(),
        labels: Vec::with_capacity(batch.len()),
        corruption: Vec::with_capacity(batch.len()),
        sop_labels: Vec::new(),
    };
    for (b, seq) in batch.iter().enumerate() {
        let n = seq.len();
        let mut labels = vec![None; n];
        let mut kinds = vec![None; n];
        let mut p = 0;
        while p < n {
            if !eligible(seq, p) || rng.random::<f64>() >= start_prob {
                p += 1;
                continue;
            }
            let len = span_length(config.max_ngram, rng);
            let mut q = p;
            while q < n && q < p + len && eligible(seq, q) {
                labels[q] = Some(seq.ids[q]);
                let roll = rng.random::<f64>();
                let (id, kind) = if roll < 0.8 {
                    (MASK_ID, Corruption::Masked)
                } else if roll < 0.9 {
                    (*random_ids.choose(rng).expect("non-empty"), Corruption::Random)
                } else {
                    (seq.ids[q], Corruption::Kept)
                };
                out.inputs[b].ids[q] = id;
                kinds[q] = Some(kind);
                q += 1;
            }
            p = q.max(p + 1);
        }
        out.labels.push(labels);
        out.corruption.push(kinds);
    }
    Ok(out)
}
