//! Loss-threshold membership inference against a personalized model.
//!
//! The attacker only evaluates the audited model's loss on candidate
//! examples. Lower loss means more member-like, so the membership score is
//! the negated loss and the attack's strength is the AUC of member scores
//! against non-member scores.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::adapter::EffectiveParams;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Example, TaskModel};

#[derive(Debug, Clone)]
pub struct MiaDataset {
    members: Vec<(String, Example)>,
    nonmembers: Vec<(String, Example)>,
}

impl MiaDataset {
    pub fn new(members: Vec<(String, Example)>, nonmembers: Vec<(String, Example)>) -> Result<Self> {
        if members.is_empty() || nonmembers.is_empty() {
            return Err(Error::data("membership dataset needs members and non-members"));
        }
        let member_set: HashSet<&Example> = members.iter().map(|(_, e)| e).collect();
        if nonmembers.iter().any(|(_, e)| member_set.contains(e)) {
            return Err(Error::data("an example appears on both sides of the membership split"));
        }
        Ok(Self { members, nonmembers })
    }

    /// Members are the training data of `selected` sharers, non-members that of
    /// every other pool sharer. Non-member examples that duplicate a member
    /// example are dropped.
    pub fn from_pool<'a, I>(pool: I, selected: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [Example])>,
    {
        let mut members = Vec::new();
        let mut nonmembers = Vec::new();
        for (id, history) in pool {
            let side = if selected.iter().any(|s| s == id) {
                &mut members
            } else {
                &mut nonmembers
            };
            side.extend(history.iter().map(|e| (id.to_string(), e.clone())));
        }
        let member_set: HashSet<Example> = members.iter().map(|(_, e)| e.clone()).collect();
        nonmembers.retain(|(_, e)| !member_set.contains(e));
        Self::new(members, nonmembers)
    }

    pub fn members(&self) -> &[(String, Example)] {
        &self.members
    }

    pub fn nonmembers(&self) -> &[(String, Example)] {
        &self.nonmembers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaResult {
    pub auc: f64,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
}

impl MiaResult {
    pub fn n_members(&self) -> usize {
        self.member_scores.len()
    }

    pub fn n_nonmembers(&self) -> usize {
        self.nonmember_scores.len()
    }
}

/// Per-example sequence NLL under `model`, in input order.
pub fn loss_scores(task: &TaskModel, model: &EffectiveParams, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::data("no examples to score"));
    }
    examples
        .par_iter()
        .map(|e| task.sequence_nll(model, e))
        .collect()
}

pub fn run_mia(task: &TaskModel, model: &EffectiveParams, dataset: &MiaDataset) -> Result<MiaResult> {
    let score = |side: &[(String, Example)]| -> Result<Vec<f64>> {
        let examples: Vec<Example> = side.iter().map(|(_, e)| e.clone()).collect();
        Ok(loss_scores(task, model, &examples)?.into_iter().map(|l| -l).collect())
    };
    let member_scores = score(&dataset.members)?;
    let nonmember_scores = score(&dataset.nonmembers)?;
    Ok(MiaResult {
        auc: metrics::auc(&member_scores, &nonmember_scores)?,
        member_scores,
        nonmember_scores,
    })
}
