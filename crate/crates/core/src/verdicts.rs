//! Per-sample correctness verdicts gathered from reference-model runs, and the
//! two filters built on them.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerdictError {
    #[error("missing verdicts (need {required}) for sample(s): {}", ids.join(", "))]
    Missing { required: usize, ids: Vec<String> },
}

/// Anything keyed by a sample id.
pub trait HasId {
    fn id(&self) -> String;
}

impl HasId for Value {
    fn id(&self) -> String {
        match &self["id"] {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictTable {
    by_id: BTreeMap<String, Vec<bool>>,
}

impl VerdictTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, correct: bool) {
        self.by_id.entry(id.into()).or_default().push(correct);
    }

    pub fn extend<I, S>(&mut self, verdicts: I)
    where
        I: IntoIterator<Item = (S, bool)>,
        S: Into<String>,
    {
        for (id, correct) in verdicts {
            self.add(id, correct);
        }
    }

    pub fn get(&self, id: &str) -> &[bool] {
        self.by_id.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    fn check_complete<T: HasId>(&self, samples: &[T], required: usize) -> Result<(), VerdictError> {
        let ids: Vec<String> = samples
            .iter()
            .map(HasId::id)
            .filter(|id| self.get(id).len() < required)
            .collect();
        if ids.is_empty() {
            Ok(())
        } else {
            Err(VerdictError::Missing { required, ids })
        }
    }
}

/// Drops samples every reference model answered correctly.
pub fn consensus_filter<T: HasId + Clone>(
    samples: &[T],
    verdicts: &VerdictTable,
    models: usize,
) -> Result<Vec<T>, VerdictError> {
    verdicts.check_complete(samples, models)?;
    Ok(samples
        .iter()
        .filter(|s| !verdicts.get(&s.id()).iter().all(|c| *c))
        .cloned()
        .collect())
}

/// Keeps samples the reference model got wrong on every attempt.
pub fn filter_hard<T: HasId + Clone>(
    samples: &[T],
    verdicts: &VerdictTable,
    attempts: usize,
) -> Result<Vec<T>, VerdictError> {
    verdicts.check_complete(samples, attempts.max(1))?;
    Ok(samples
        .iter()
        .filter(|s| verdicts.get(&s.id()).iter().all(|c| !*c))
        .cloned()
        .collect())
}
