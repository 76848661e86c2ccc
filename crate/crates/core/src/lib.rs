//! Multi-class CT segmentation pipeline: preprocessing, augmentation, a
//! Tanimoto + cross-entropy objective, cross-validation, ensembling and a
//! synthetic phantom generator.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod format;
pub mod model;
pub mod objective;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod volume;

pub use dataset::{FoldPlan, Manifest, Record};
pub use error::{Error, Result};
pub use rng::{derive_seed, SeededRng};
pub use volume::{CtVolume, Dims, LabelVolume, ProbMap, Sample, Spacing, UnitState};

/// Parses `key=value` lines, skipping blanks and `#` comments.
/// Returns `(key, value, line_number)` with 1-based line numbers.
pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, found {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}
