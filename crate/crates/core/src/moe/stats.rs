use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::gate::GateDecision;

/// Mean routing weight per expert, overall and per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub utilization: Vec<f64>,
    /// `classes × experts`; a class with no inputs has an all-zero row.
    pub class_expert: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

impl RoutingStats {
    /// Shannon entropy of the utilization vector, in nats.
    pub fn utilization_entropy(&self) -> f64 {
        self.utilization.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Streaming accumulator over batches of routing weights.
#[derive(Clone, Debug)]
pub struct RoutingAccumulator {
    experts: usize,
    total: Vec<f64>,
    per_class: Vec<Vec<f64>>,
    counts: Vec<usize>,
    n: usize,
}

impl RoutingAccumulator {
    pub fn new(experts: usize, classes: usize) -> Self {
        Self {
            experts,
            total: vec![0.0; experts],
            per_class: vec![vec![0.0; experts]; classes],
            counts: vec![0; classes],
            n: 0,
        }
    }

    pub fn add(&mut self, weights: &[f64], label: usize) -> Result<()> {
        if weights.len() != self.experts {
            return Err(Error::config(format!(
                "routing stats: {} weights for {} experts",
                weights.len(),
                self.experts
            )));
        }
        let row = self
            .per_class
            .get_mut(label)
            .ok_or_else(|| Error::config(format!("routing stats: label {label} out of range")))?;
        for (i, &w) in weights.iter().enumerate() {
            self.total[i] += w;
            row[i] += w;
        }
        self.counts[label] += 1;
        self.n += 1;
        Ok(())
    }

    /// Adds a row-major `B×N` weight block.
    pub fn add_batch(&mut self, weights: &[f64], labels: &[usize]) -> Result<()> {
        if weights.len() != labels.len() * self.experts {
            return Err(Error::config("routing stats: weight block does not match labels"));
        }
        for (row, &label) in weights.chunks(self.experts.max(1)).zip(labels) {
            self.add(row, label)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self) -> Result<RoutingStats> {
        if self.n == 0 {
            return Err(Error::usage("routing stats need at least one decision"));
        }
        let utilization = self.total.iter().map(|s| s / self.n as f64).collect();
        let class_expert = self
            .per_class
            .iter()
            .zip(&self.counts)
            .map(|(row, &c)| if c == 0 { vec![0.0; self.experts] } else { row.iter().map(|s| s / c as f64).collect() })
            .collect();
        Ok(RoutingStats { utilization, class_expert, class_counts: self.counts.clone() })
    }
}

pub fn routing_stats(decisions: &[GateDecision], labels: &[usize], classes: usize) -> Result<RoutingStats> {
    if decisions.len() != labels.len() {
        return Err(Error::config(format!("routing stats: {} decisions, {} labels", decisions.len(), labels.len())));
    }
    let experts = decisions.first().map_or(0, |d| d.weights.len());
    let mut acc = RoutingAccumulator::new(experts, classes);
    for (d, &l) in decisions.iter().zip(labels) {
        acc.add(&d.weights, l)?;
    }
    acc.finish()
}
