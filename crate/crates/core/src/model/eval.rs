use rayon::prelude::*;
use serde::Serialize;

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{nn, no_grad};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_nll: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub tokens: usize,
}

impl EvalReport {
    pub fn from_mean_nll(mean_nll: f64, tokens: usize) -> Self {
        EvalReport { mean_nll, ppl: mean_nll.exp(), bpc: mean_nll / std::f64::consts::LN_2, tokens }
    }
}

/// Start offsets and lengths of the non-overlapping evaluation segments of a
/// split: every byte after the first is predicted exactly once, the final
/// segment may be shorter.
pub fn segments(len: usize, seq_len: usize) -> Vec<(usize, usize)> {
    let predicted = len.saturating_sub(1);
    (0..predicted).step_by(seq_len.max(1)).map(|s| (s, seq_len.min(predicted - s))).collect()
}

/// Mean next-byte NLL over `data`. Segments are grouped `batch` at a time
/// and the groups are evaluated in parallel; per-segment NLL sums are then
/// added in segment order, so the result does not depend on `batch` or the
/// thread count.
pub fn evaluate(model: &Model, data: &[u8], seq_len: usize, batch: usize) -> Result<EvalReport> {
    if seq_len == 0 || batch == 0 {
        return Err(Error::config(&["seq_len", "batch_size"], "must be positive"));
    }
    let segs = segments(data.len(), seq_len);
    if segs.is_empty() {
        return Err(Error::Data(format!("split of {} bytes has nothing to predict", data.len())));
    }
    // equal-length groups only; a short tail segment runs on its own
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for seg in segs {
        match groups.last_mut() {
            Some(g) if g.len() < batch && g[0].1 == seg.1 => g.push(seg),
            _ => groups.push(vec![seg]),
        }
    }
    let vocab = model.config().vocab;
    let sums: Vec<Vec<f64>> = groups
        .par_iter()
        .map(|group| {
            let len = group[0].1;
            let mut inputs = Vec::with_capacity(group.len() * len);
            let mut targets = Vec::with_capacity(group.len() * len);
            for &(s, _) in group {
                inputs.extend(data[s..s + len].iter().map(|&b| b as usize));
                targets.extend(data[s + 1..s + 1 + len].iter().map(|&b| b as usize));
            }
            let logits =
                no_grad(|| model.forward_packed(&inputs, group.len(), crate::attention::Execution::Grouped))?.logits;
            let nll = nn::token_nll(logits.data(), vocab, &targets);
            Ok(nll.chunks(len).map(|c| c.iter().sum()).collect())
        })
        .collect::<Result<_>>()?;
    let tokens = data.len() - 1;
    let total: f64 = sums.iter().flatten().sum();
    Ok(EvalReport::from_mean_nll(total / tokens as f64, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::plan::Strategy;

    #[test]
    fn segments_predict_each_byte_once() {
        assert_eq!(segments(10, 4), vec![(0, 4), (4, 4), (8, 1)]);
        assert_eq!(segments(9, 4), vec![(0, 4), (4, 4)]);
        assert!(segments(1, 4).is_empty());
    }

    #[test]
    fn uniform_logits_give_256_and_8() {
        let mut model = Model::new(ModelConfig::local(4, 2, 4, Strategy::Uniform, 8)).unwrap();
        let n = model.param("lm_head").unwrap().numel();
        model.set_param("lm_head", vec![0.0; n]).unwrap();
        let data: Vec<u8> = (0..300).map(|i| (i * 7) as u8).collect();
        let r = evaluate(&model, &data, 64, 2).unwrap();
        assert!((r.ppl - 256.0).abs() < 1e-9 && (r.bpc - 8.0).abs() < 1e-12, "{r:?}");
        assert!((r.bpc - r.ppl.log2()).abs() < 1e-12);
        assert!(matches!(evaluate(&model, &data[..1], 64, 2), Err(Error::Data(_))));
    }
}
