//! Dataset manifests, slice-count-ordered cross-validation folds and batch sampling.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format;
use crate::rng::{derive_seed, SeededRng};
use crate::volume::Sample;

/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 5;

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub volume_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub slice_count: usize,
    pub slice_thickness: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    records: Vec<Record>,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", r.id)));
            }
            if r.slice_count == 0 {
                return Err(Error::Manifest(format!("{}: slice count must be >= 1", r.id)));
            }
            if !(r.slice_thickness > 0.0 && r.slice_thickness.is_finite()) {
                return Err(Error::Manifest(format!("{}: slice thickness must be > 0", r.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records whose ids are listed, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            records: self.records.iter().filter(|r| keep.contains(r.id.as_str())).cloned().collect(),
        }
    }

    /// Parses tab-separated `id, volume path, label path or "-", slice count,
    /// thickness` lines. Blank lines and `#` comments are skipped; relative paths
    /// are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let bad = |message: String| Error::Parse { line, message };
            let id = fields[0].to_string();
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(bad(format!("invalid id {id:?}")));
            }
            let slice_count: usize = fields[3].parse().map_err(|_| bad(format!("bad slice count {:?}", fields[3])))?;
            if slice_count == 0 {
                return Err(bad("slice count must be >= 1".into()));
            }
            let slice_thickness: f64 = fields[4].parse().map_err(|_| bad(format!("bad slice thickness {:?}", fields[4])))?;
            if !(slice_thickness > 0.0 && slice_thickness.is_finite()) {
                return Err(bad("slice thickness must be > 0".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Manifest(format!("duplicate id {id:?} on line {line}")));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            records.push(Record {
                id,
                volume_path: resolve(fields[1]),
                label_path: (fields[2] != "-").then(|| resolve(fields[2])),
                slice_count,
                slice_thickness,
            });
        }
        Ok(Self { records })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.id,
                r.volume_path.display(),
                r.label_path.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string()),
                r.slice_count,
                r.slice_thickness
            );
        }
        s
    }
}

/// Reads a manifest file; relative paths are taken relative to its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(0, e))?;
    Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads a record's volume and, when listed, its labels.
pub fn load_sample(record: &Record) -> Result<Sample> {
    let volume = format::load_volume(&record.volume_path)?;
    let labels = match &record.label_path {
        Some(p) => {
            let l = format::load_labels(p)?;
            l.matches(volume.dims())?;
            Some(l)
        }
        None => None,
    };
    Ok(Sample::new(volume, labels))
}

/// Assignment of manifest ids to `k` validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn from_folds(folds: Vec<Vec<String>>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Fold("a fold plan needs at least one fold".into()));
        }
        let mut seen = HashSet::new();
        for id in folds.iter().flatten() {
            if !seen.insert(id) {
                return Err(Error::Fold(format!("id {id:?} assigned to more than one fold")));
            }
        }
        Ok(Self { folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn folds(&self) -> &[Vec<String>] {
        &self.folds
    }

    pub fn fold(&self, i: usize) -> &[String] {
        &self.folds[i]
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    /// Ids of every fold except `held_out`, fold by fold.
    pub fn training_ids(&self, held_out: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    /// `fold index \t id` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.folds.iter().enumerate() {
            for id in f {
                let _ = writeln!(s, "{i}\t{id}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut by_fold: HashMap<usize, Vec<String>> = HashMap::new();
        let mut max = 0;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (fold, id) = raw.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `fold<TAB>id`".into(),
            })?;
            let fold: usize = fold.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad fold index {fold:?}"),
            })?;
            max = max.max(fold);
            by_fold.entry(fold).or_default().push(id.to_string());
        }
        if by_fold.is_empty() {
            return Err(Error::Fold("empty fold plan".into()));
        }
        Self::from_folds((0..=max).map(|i| by_fold.remove(&i).unwrap_or_default()).collect())
    }
}

/// Sort key used for fold assignment: slice count, then thickness, then id.
pub fn fold_sort_key(r: &Record) -> (usize, f64, &str) {
    (r.slice_count, r.slice_thickness, r.id.as_str())
}

pub(crate) fn cmp_records(a: &Record, b: &Record) -> std::cmp::Ordering {
    a.slice_count
        .cmp(&b.slice_count)
        .then(a.slice_thickness.total_cmp(&b.slice_thickness))
        .then_with(|| a.id.cmp(&b.id))
}

/// Sorts records by `(slice count, thickness, id)` and cuts them into `k`
/// contiguous blocks, the first `n mod k` one record larger.
pub fn assign_folds(manifest: &Manifest, k: usize) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Fold("k must be >= 1".into()));
    }
    let n = manifest.len();
    if n < k {
        return Err(Error::Fold(format!("{n} records cannot fill {k} folds")));
    }
    let mut sorted: Vec<&Record> = manifest.records().iter().collect();
    sorted.sort_by(|a, b| cmp_records(a, b));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut it = sorted.into_iter();
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(it.by_ref().take(size).map(|r| r.id.clone()).collect());
    }
    FoldPlan::from_folds(folds)
}

/// Draws a batch of ids for `(seed, epoch, batch_index)`.
///
/// Within a batch ids are distinct while the set allows it; larger batches are
/// filled with successive independent permutations.
pub fn sample_batch(ids: &[String], batch_size: usize, seed: u64, epoch: u64, batch_index: u64) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("batch sampling from an empty training set"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut rng = SeededRng::new(derive_seed(derive_seed(seed, epoch), batch_index));
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let take = (batch_size - out.len()).min(ids.len());
        out.extend(rng.sample_distinct(ids.len(), take).into_iter().map(|i| ids[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, slices: usize, thick: f64) -> Record {
        Record {
            id: id.into(),
            volume_path: PathBuf::from(format!("{id}.ctv")),
            label_path: None,
            slice_count: slices,
            slice_thickness: thick,
        }
    }

    #[test]
    fn parse_valid_manifest() {
        let text = "a\ta.ctv\ta.lbl\t12\t2.5\nb\t/abs/b.ctv\t-\t30\t1\n\n# comment\nc\tc.ctv\t-\t7\t5\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records()[0].volume_path, PathBuf::from("/data/a.ctv"));
        assert_eq!(m.records()[0].label_path, Some(PathBuf::from("/data/a.lbl")));
        assert_eq!(m.records()[1].volume_path, PathBuf::from("/abs/b.ctv"));
        assert_eq!(m.records()[1].label_path, None);
        let again = Manifest::parse(&m.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_errors() {
        let dup = "a\ta\t-\t1\t1\na\tb\t-\t2\t1\n";
        assert!(matches!(Manifest::parse(dup, Path::new(".")), Err(Error::Manifest(_))));
        let zero = "a\ta\t-\t1\t1\nb\tb\t-\t0\t1\n";
        assert!(matches!(Manifest::parse(zero, Path::new(".")), Err(Error::Parse { line: 2, .. })));
        let short = "a\ta\t-\t1\n";
        assert!(matches!(Manifest::parse(short, Path::new(".")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ten_volumes_five_folds() {
        let m = Manifest::new((1..=10).rev().map(|s| rec(&format!("v{s:02}"), s, 1.0)).collect()).unwrap();
        let plan = assign_folds(&m, 5).unwrap();
        let expect: Vec<Vec<String>> = (0..5)
            .map(|i| vec![format!("v{:02}", 2 * i + 1), format!("v{:02}", 2 * i + 2)])
            .collect();
        assert_eq!(plan.folds(), expect.as_slice());
        let single = assign_folds(&m, 1).unwrap();
        assert_eq!(single.fold(0).len(), 10);
        assert!(matches!(assign_folds(&m, 11), Err(Error::Fold(_))));
    }

    #[test]
    fn uneven_split_front_loads() {
        let m = Manifest::new((0..7).map(|s| rec(&format!("v{s}"), s + 1, 1.0)).collect()).unwrap();
        let sizes: Vec<usize> = assign_folds(&m, 5).unwrap().folds().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn ties_break_on_thickness_then_id() {
        let m = Manifest::new(vec![rec("b", 5, 2.0), rec("a", 5, 2.0), rec("c", 5, 1.0)]).unwrap();
        let plan = assign_folds(&m, 3).unwrap();
        assert_eq!(plan.folds(), &[vec!["c".to_string()], vec!["a".to_string()], vec!["b".to_string()]]);
    }

    #[test]
    fn plan_text_round_trip() {
        let m = Manifest::new((0..6).map(|s| rec(&format!("v{s}"), s + 1, 1.0)).collect()).unwrap();
        let plan = assign_folds(&m, 4).unwrap();
        assert_eq!(FoldPlan::parse(&plan.to_text()).unwrap(), plan);
        assert_eq!(plan.fold_of("v5"), Some(3));
        assert_eq!(plan.training_ids(0), vec!["v2", "v3", "v4", "v5"]);
    }

    #[test]
    fn batch_is_permutation_at_full_size() {
        let ids: Vec<String> = (0..6).map(|i| format!("v{i}")).collect();
        let mut b = sample_batch(&ids, 6, 1, 0, 0).unwrap();
        b.sort();
        assert_eq!(b, ids);
        assert_eq!(sample_batch(&ids, 4, 9, 2, 3).unwrap(), sample_batch(&ids, 4, 9, 2, 3).unwrap());
        assert_eq!(sample_batch(&ids, 28, 9, 2, 3).unwrap().len(), 28);
    }
}
