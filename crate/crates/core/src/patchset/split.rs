use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Labeled;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.75,
            validation: 0.10,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    fn get(&self, split: Split) -> f64 {
        self.as_array()[split as usize]
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// Parses `0.75,0.10,0.15` or `75:10:15` (normalized by the sum).
    fn from_str(s: &str) -> Result<Self> {
        let sep = if s.contains(':') { ':' } else { ',' };
        let parts: Vec<f64> = s
            .split(sep)
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad split ratios `{s}`: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::Config(format!("expected three split ratios, got `{s}`")));
        }
        if sep == ':' {
            let total: f64 = parts.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config(format!("bad split ratios `{s}`")));
            }
            return SplitRatios::new(parts[0] / total, parts[1] / total, parts[2] / total);
        }
        SplitRatios::new(parts[0], parts[1], parts[2])
    }
}

/// Which split each record id belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratios: SplitRatios,
    pub seed: u64,
    assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_assignments(
        ratios: SplitRatios,
        seed: u64,
        assignments: impl IntoIterator<Item = (String, Split)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, split) in assignments {
            if map.insert(id.clone(), split).is_some() {
                return Err(Error::Input(format!("record `{id}` assigned more than once")));
            }
        }
        Ok(SplitAssignment {
            ratios,
            seed,
            assignments: map,
        })
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignments.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.assignments.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.iter().filter(|(_, s)| *s == split).map(|(id, _)| id).collect()
    }

    pub fn size(&self, split: Split) -> usize {
        self.assignments.values().filter(|s| **s == split).count()
    }

    /// Partitions `records` by assignment, preserving input order.
    /// Records without an assignment are an error.
    pub fn partition<T: Labeled + Clone>(&self, records: &[T]) -> Result<[Vec<T>; 3]> {
        let mut out: [Vec<T>; 3] = Default::default();
        for r in records {
            let id = &r.meta().id;
            let split = self
                .get(id)
                .ok_or_else(|| Error::Input(format!("record `{id}` has no split assignment")))?;
            out[split as usize].push(r.clone());
        }
        Ok(out)
    }

    /// SHA-256 over the sorted `id,split` lines. Equal hashes mean equal assignments.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (id, split) in self.iter() {
            hasher.update(id.as_bytes());
            hasher.update(b",");
            hasher.update(split.as_str().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Writes `id,split` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
        w.write_record(["id", "split"])?;
        for (id, split) in self.iter() {
            w.write_record([id, split.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }

    /// Reads `id,split` rows. Ratios are recomputed from the counts; the seed is unknown (0).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let headers = r.headers()?.clone();
        let id_col = headers.iter().position(|h| h == "id");
        let split_col = headers.iter().position(|h| h == "split");
        let (Some(id_col), Some(split_col)) = (id_col, split_col) else {
            return Err(Error::Input(format!("{}: expected columns id,split", path.display())));
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let id = rec.get(id_col).unwrap_or("").to_string();
            let split: Split = rec.get(split_col).unwrap_or("").parse()?;
            rows.push((id, split));
        }
        let n = rows.len().max(1) as f64;
        let count = |s: Split| rows.iter().filter(|(_, x)| *x == s).count() as f64 / n;
        let ratios = SplitRatios {
            train: count(Split::Train),
            validation: count(Split::Validation),
            test: count(Split::Test),
        };
        SplitAssignment::from_assignments(ratios, 0, rows)
    }
}

/// Split boundaries by cumulative rounding: each size is within one record
/// of `ratio × n` and the sizes sum to `n`.
fn boundaries(ratios: &SplitRatios, n: usize) -> [usize; 3] {
    let mut cum = 0.0;
    let mut out = [0usize; 3];
    for (i, split) in Split::ALL.iter().enumerate() {
        cum += ratios.get(*split);
        out[i] = ((cum * n as f64).round() as usize).min(n);
    }
    out[2] = n;
    out
}

/// Stratified split by per-class shuffling and proportional interleaving.
///
/// Each class is shuffled with a seeded ChaCha stream, then the two class
/// queues are merged so that every prefix of length `k` holds exactly
/// `floor(k · n_pos / n)` positives. Cutting that sequence at the cumulative
/// ratio boundaries gives every split the global class fraction to within
/// one record.
pub fn stratified_split<T: Labeled>(records: &[T], ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::Input("cannot split an empty record set".into()));
    }
    let active = ratios.as_array().iter().filter(|r| **r > 0.0).count();
    if records.len() < active {
        return Err(Error::Input(format!(
            "{} records cannot fill {active} non-empty splits",
            records.len()
        )));
    }

    let mut seen = HashSet::with_capacity(records.len());
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for r in records {
        let meta = r.meta();
        if !seen.insert(meta.id.as_str()) {
            return Err(Error::Input(format!("duplicate record id `{}`", meta.id)));
        }
        if meta.label().is_positive() {
            positives.push(meta.id.as_str());
        } else {
            negatives.push(meta.id.as_str());
        }
    }
    // Shuffle order must not depend on input order, only on the id set.
    positives.sort_unstable();
    negatives.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let n = records.len();
    let n_pos = positives.len();
    let mut sequence = Vec::with_capacity(n);
    let (mut pi, mut ni) = (0, 0);
    for k in 0..n {
        let want_pos = (k + 1) * n_pos / n;
        if want_pos > pi {
            sequence.push(positives[pi]);
            pi += 1;
        } else {
            sequence.push(negatives[ni]);
            ni += 1;
        }
    }

    let bounds = boundaries(&ratios, n);
    let mut assignments = Vec::with_capacity(n);
    let mut start = 0;
    for (split, end) in Split::ALL.iter().zip(bounds) {
        for id in &sequence[start..end] {
            assignments.push((id.to_string(), *split));
        }
        start = end;
    }
    SplitAssignment::from_assignments(ratios, seed, assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchset::{LesionType, PatchMeta, PathologyTag};
    use proptest::prelude::*;

    fn records(n_pos: usize, n_neg: usize) -> Vec<PatchMeta> {
        let mut v = Vec::new();
        for i in 0..n_pos {
            v.push(PatchMeta::new(format!("p{i:05}"), LesionType::Mass, PathologyTag::Benign, None).unwrap());
        }
        for i in 0..n_neg {
            v.push(PatchMeta::new(format!("n{i:05}"), LesionType::Normal, PathologyTag::None, None).unwrap());
        }
        v
    }

    fn positive_fraction(a: &SplitAssignment, split: Split) -> f64 {
        let ids = a.ids(split);
        ids.iter().filter(|id| id.starts_with('p')).count() as f64 / ids.len() as f64
    }

    #[test]
    fn hundred_records_seed_seven() {
        let recs = records(45, 55);
        let a = stratified_split(&recs, SplitRatios::default(), 7).unwrap();
        assert_eq!(a.size(Split::Train), 75);
        assert_eq!(a.size(Split::Validation), 10);
        assert_eq!(a.size(Split::Test), 15);
        let f = positive_fraction(&a, Split::Train);
        assert!((0.43..=0.47).contains(&f), "train fraction {f}");
    }

    #[test]
    fn degenerate_ratios_put_everything_in_train() {
        let recs = records(1, 2);
        let a = stratified_split(&recs, SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 0).unwrap();
        assert_eq!(a.size(Split::Train), 3);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let recs = records(5, 5);
        let bad = SplitRatios {
            train: 0.7,
            validation: 0.1,
            test: 0.1,
        };
        assert!(matches!(stratified_split(&recs, bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn too_few_records_is_input_error() {
        let recs = records(1, 1);
        assert!(matches!(
            stratified_split(&recs, SplitRatios::default(), 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn full_ddsm_size_test_split() {
        let recs = records(4506, 6207);
        let a = stratified_split(&recs, SplitRatios::default(), 1).unwrap();
        let test = a.size(Split::Test) as f64;
        assert!((test - 0.15 * 10713.0).abs() <= 1.0, "test size {test}");
        let global = 4506.0 / 10713.0;
        for split in Split::ALL {
            assert!((positive_fraction(&a, split) - global).abs() < 0.02);
        }
    }

    #[test]
    fn csv_round_trip() {
        let recs = records(6, 9);
        let a = stratified_split(&recs, SplitRatios::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        a.write_csv(&path).unwrap();
        let b = SplitAssignment::read_csv(&path).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn ratio_parsing() {
        let r: SplitRatios = "75:10:15".parse().unwrap();
        assert!((r.train - 0.75).abs() < 1e-12);
        let r: SplitRatios = "0.8,0.1,0.1".parse().unwrap();
        assert!((r.test - 0.1).abs() < 1e-12);
        assert!("0.5,0.5".parse::<SplitRatios>().is_err());
    }

    proptest! {
        #[test]
        fn partition_and_balance(n_pos in 1usize..300, n_neg in 1usize..300, seed in any::<u64>(),
                                 t in 0.05f64..0.9, v in 0.0f64..0.5) {
            let v = v.min(1.0 - t);
            let ratios = SplitRatios { train: t, validation: v, test: 1.0 - t - v };
            let recs = records(n_pos, n_neg);
            let a = stratified_split(&recs, ratios, seed).unwrap();
            prop_assert_eq!(a.len(), n_pos + n_neg);
            let n = (n_pos + n_neg) as f64;
            let global = n_pos as f64 / n;
            for split in Split::ALL {
                let size = a.size(split) as f64;
                prop_assert!((size - ratios.get(split) * n).abs() <= 1.0);
                if size > 0.0 {
                    let pos = a.ids(split).iter().filter(|id| id.starts_with('p')).count() as f64;
                    // Within one record of exact proportionality.
                    prop_assert!((pos - global * size).abs() <= 1.0);
                }
            }
            let again = stratified_split(&recs, ratios, seed).unwrap();
            prop_assert_eq!(a, again);
        }

        #[test]
        fn input_order_does_not_matter(seed in any::<u64>()) {
            let recs = records(20, 30);
            let mut reversed = recs.clone();
            reversed.reverse();
            let a = stratified_split(&recs, SplitRatios::default(), seed).unwrap();
            let b = stratified_split(&reversed, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(a.hash(), b.hash());
        }
    }
}
