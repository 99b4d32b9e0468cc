//! Budget-matched comparison of two local-attention configurations.
//!
//! The candidate's total window budget is checked to be no larger than the
//! baseline's before either model is trained, so a candidate that wins does
//! so at verified lower or equal cost.

use std::fmt::Write as _;

use super::corpus::{Corpus, Split};
use super::eval::evaluate;
use super::train::{TrainConfig, Trainer};
use super::{Model, ModelConfig};
use crate::cost::{self, ratio_to_f64};
use crate::error::{Error, Result};
use crate::plan::Rational;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRun {
    pub label: String,
    pub config: ModelConfig,
    pub window_budget: u64,
    pub final_train_bpc: f64,
    pub valid_bpc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: CompareRun,
    pub candidate: CompareRun,
    /// Candidate budget over baseline budget.
    pub budget_ratio: Rational,
}

/// Checks the pair is comparable and returns candidate/baseline budget.
pub fn verify_budgets(baseline: &ModelConfig, candidate: &ModelConfig, seq_len: usize) -> Result<Rational> {
    if (baseline.layers, baseline.heads) != (candidate.layers, candidate.heads) {
        return Err(Error::Comparability {
            lhs_layers: baseline.layers,
            lhs_heads: baseline.heads,
            rhs_layers: candidate.layers,
            rhs_heads: candidate.heads,
        });
    }
    if baseline.layer_pattern != candidate.layer_pattern {
        return Err(Error::config(&["layer_pattern"], "compared models must share a layer pattern"));
    }
    let ratio = cost::report(candidate, seq_len)?.relative_cost(&cost::report(baseline, seq_len)?)?;
    if ratio > Rational::from_integer(1) {
        return Err(Error::config(
            &["base_window", "strategy"],
            format!("candidate budget exceeds the baseline's by a factor of {ratio}"),
        ));
    }
    Ok(ratio)
}

/// Trains both configurations with the same training settings and seed,
/// then scores each on the validation split.
pub fn compare(
    baseline: &ModelConfig,
    candidate: &ModelConfig,
    train: TrainConfig,
    corpus: &Corpus,
) -> Result<Comparison> {
    let budget_ratio = verify_budgets(baseline, candidate, train.seq_len)?;
    let run = |label: &str, config: &ModelConfig| -> Result<CompareRun> {
        let mut trainer = Trainer::new(Model::new(config.clone())?, train)?;
        let history = trainer.run(corpus.split(Split::Train), None, |_| {})?;
        let valid = evaluate(&trainer.model, corpus.split(Split::Valid), train.seq_len, train.batch_size)?;
        Ok(CompareRun {
            label: label.to_string(),
            config: config.clone(),
            window_budget: cost::report(config, train.seq_len)?.window_budget(),
            final_train_bpc: history.last().map_or(f64::NAN, |m| m.loss_bpc),
            valid_bpc: valid.bpc,
        })
    };
    Ok(Comparison { baseline: run("baseline", baseline)?, candidate: run("candidate", candidate)?, budget_ratio })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,strategy,base_window,window_budget,budget_ratio,budget_ratio_value,final_train_bpc,valid_bpc\n",
        );
        for (run, ratio) in [(&self.baseline, Rational::from_integer(1)), (&self.candidate, self.budget_ratio)] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6}",
                run.label,
                run.config.strategy,
                run.config.base_window,
                run.window_budget,
                ratio,
                ratio_to_f64(ratio),
                run.final_train_bpc,
                run.valid_bpc
            );
        }
        out
    }
}
