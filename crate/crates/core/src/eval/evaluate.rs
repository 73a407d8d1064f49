//! Split-level evaluation and the predictions audit file.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::EpalmModel;
use crate::error::Result;
use crate::eval::decode::{generate, ConditionedModel, DecodeConfig};
use crate::eval::metrics::{bleu4, cider, exact_match};
use crate::parallel;
use crate::synth::Vocabulary;
use crate::tensor::Float;
use crate::train::data::PreparedExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub exact_match: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub n_examples: usize,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub pred: String,
    pub gold: String,
    #[serde(rename = "match")]
    pub matched: u8,
}

/// Scores `(id, pred, gold)` triples.
pub fn score_predictions(rows: Vec<(usize, String, String)>, decode: DecodeConfig) -> Result<(MetricReport, Vec<Prediction>)> {
    let preds: Vec<Prediction> = rows
        .into_iter()
        .map(|(id, pred, gold)| Prediction {
            matched: exact_match(&pred, &gold),
            id,
            pred,
            gold,
        })
        .collect();
    let n = preds.len();
    let cands: Vec<String> = preds.iter().map(|p| p.pred.clone()).collect();
    let refs: Vec<Vec<String>> = preds.iter().map(|p| vec![p.gold.clone()]).collect();
    let report = MetricReport {
        exact_match: preds.iter().map(|p| p.matched as f64).sum::<f64>() / n.max(1) as f64,
        bleu4: if n > 0 { bleu4(&cands, &refs)? } else { 0.0 },
        cider: if n > 0 { cider(&cands, &refs)? } else { 0.0 },
        n_examples: n,
        decode,
    };
    Ok((report, preds))
}

/// Generates for every example (in parallel, results in example order) and scores.
pub fn evaluate_split<T: Float>(
    model: &EpalmModel<T>,
    examples: &[PreparedExample<T>],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(MetricReport, Vec<Prediction>)> {
    cfg.validate()?;
    let rows = parallel::map(examples, |ex| -> Result<(usize, String, String)> {
        let lm = ConditionedModel {
            model,
            perception: ex.perception(),
        };
        let out = generate(&lm, &ex.prefix, cfg)?;
        Ok((ex.id, vocab.render_generation(&out)?, ex.gold.clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    score_predictions(rows, *cfg)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
