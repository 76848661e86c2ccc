//! Evaluation reports: per-volume Dice rows plus mean and population std.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objective::{aggregate, dice_with, total_dice, EmptyMask, TotalDice};
use crate::volume::LabelVolume;

/// Scores of one predicted volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub id: String,
    /// Dice of classes `1..C`; `None` where both masks are empty.
    pub class_dice: Vec<Option<f64>>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_classes: u8,
    pub total_kind: TotalDice,
    pub volumes: Vec<VolumeReport>,
}

/// Mean and population std of a column, skipping absent entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn score_volume(id: &str, pred: &LabelVolume, truth: &LabelVolume, kind: TotalDice) -> Result<VolumeReport> {
    let classes = pred.num_classes().max(truth.num_classes());
    let class_dice = (1..classes)
        .map(|c| dice_with(pred, truth, c, EmptyMask::Exclude))
        .collect::<Result<Vec<_>>>()?;
    Ok(VolumeReport {
        id: id.to_string(),
        class_dice,
        total: total_dice(pred, truth, kind)?,
    })
}

impl EvalReport {
    pub fn new(num_classes: u8, total_kind: TotalDice) -> Self {
        Self {
            num_classes,
            total_kind,
            volumes: Vec::new(),
        }
    }

    pub fn push(&mut self, v: VolumeReport) {
        self.volumes.push(v);
    }

    pub fn class_summary(&self, class: u8) -> Option<Summary> {
        let vals: Vec<f64> = self
            .volumes
            .iter()
            .filter_map(|v| v.class_dice.get(class as usize - 1).copied().flatten())
            .collect();
        summarize(&vals).ok()
    }

    pub fn total_summary(&self) -> Result<Summary> {
        summarize(&self.volumes.iter().map(|v| v.total).collect::<Vec<_>>())
    }

    /// Tab-separated rows: a header, one line per volume, then `mean` and `std` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id");
        for c in 1..self.num_classes {
            let _ = write!(s, "\tdice_{c}");
        }
        let _ = writeln!(s, "\ttotal_{}", self.total_kind.name());
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for v in &self.volumes {
            s.push_str(&v.id);
            for c in 1..self.num_classes {
                let _ = write!(s, "\t{}", cell(v.class_dice.get(c as usize - 1).copied().flatten()));
            }
            let _ = writeln!(s, "\t{:.6}", v.total);
        }
        let total = self.total_summary().ok();
        for (name, pick) in [("mean", 0), ("std", 1)] {
            s.push_str(name);
            let stat = |m: Option<Summary>| m.map(|m| if pick == 0 { m.mean } else { m.std });
            for c in 1..self.num_classes {
                let _ = write!(s, "\t{}", cell(stat(self.class_summary(c))));
            }
            let _ = writeln!(s, "\t{}", cell(stat(total)));
        }
        s
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no scores to summarize"));
    }
    let (mean, std) = aggregate(values)?;
    Ok(Summary {
        mean,
        std,
        count: values.len(),
    })
}
