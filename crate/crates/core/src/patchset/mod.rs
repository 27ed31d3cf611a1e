//! Patch dataset model: records, binary relabeling, summary statistics,
//! manifest I/O and stratified splitting.

mod manifest;
mod split;

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    load_manifest, load_patch_image, read_manifest, save_manifest, save_patch_image,
    write_manifest_entries, ManifestEntry, MANIFEST_COLUMNS,
};
pub use split::{stratified_split, Split, SplitAssignment, SplitRatios};

/// Side length of a square patch. A 3×3 valid convolution on it yields the
/// 254×254 maps of the baseline architecture.
pub const PATCH_SIZE: usize = 256;

/// A grayscale patch, `PATCH_SIZE × PATCH_SIZE`, values in `[0, 1]`.
pub type Patch = Array2<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionType {
    Mass,
    Calcification,
    Normal,
}

impl LesionType {
    pub const ALL: [LesionType; 3] = [LesionType::Mass, LesionType::Calcification, LesionType::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            LesionType::Mass => "mass",
            LesionType::Calcification => "calcification",
            LesionType::Normal => "normal",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LesionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mass" => Ok(LesionType::Mass),
            "calcification" => Ok(LesionType::Calcification),
            "normal" => Ok(LesionType::Normal),
            other => Err(Error::Input(format!("unrecognized lesion type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathologyTag {
    Malignant,
    Benign,
    BenignWithoutCallback,
    Unproven,
    None,
}

impl PathologyTag {
    pub const ALL: [PathologyTag; 5] = [
        PathologyTag::Malignant,
        PathologyTag::Benign,
        PathologyTag::BenignWithoutCallback,
        PathologyTag::Unproven,
        PathologyTag::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PathologyTag::Malignant => "malignant",
            PathologyTag::Benign => "benign",
            PathologyTag::BenignWithoutCallback => "benign_without_callback",
            PathologyTag::Unproven => "unproven",
            PathologyTag::None => "none",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PathologyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathologyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "malignant" => Ok(PathologyTag::Malignant),
            "benign" => Ok(PathologyTag::Benign),
            "benign_without_callback" => Ok(PathologyTag::BenignWithoutCallback),
            "unproven" => Ok(PathologyTag::Unproven),
            "none" | "" => Ok(PathologyTag::None),
            other => Err(Error::Input(format!("unrecognized pathology tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Pathological,
    NonPathological,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Pathological
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Pathological => "pathological",
            Label::NonPathological => "non_pathological",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lesion presence defines the positive class. The pathology tag (benign,
/// malignant, unproven, ...) plays no part.
pub fn binarize_label(lesion_type: LesionType) -> Label {
    match lesion_type {
        LesionType::Mass | LesionType::Calcification => Label::Pathological,
        LesionType::Normal => Label::NonPathological,
    }
}

/// Per-record metadata. Everything about a patch except its pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub id: String,
    pub lesion_type: LesionType,
    pub pathology_tag: PathologyTag,
    pub birads: Option<u8>,
}

impl PatchMeta {
    pub fn new(
        id: impl Into<String>,
        lesion_type: LesionType,
        pathology_tag: PathologyTag,
        birads: Option<u8>,
    ) -> Result<Self> {
        let meta = PatchMeta {
            id: id.into(),
            lesion_type,
            pathology_tag,
            birads,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Checks `normal ⇔ pathology none` and the BI-RADS range.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Input("record id must not be empty".into()));
        }
        let normal = self.lesion_type == LesionType::Normal;
        let untagged = self.pathology_tag == PathologyTag::None;
        if normal != untagged {
            return Err(Error::Input(format!(
                "record `{}`: lesion type `{}` is inconsistent with pathology tag `{}`",
                self.id, self.lesion_type, self.pathology_tag
            )));
        }
        if let Some(score) = self.birads {
            if !(1..=5).contains(&score) {
                return Err(Error::Input(format!(
                    "record `{}`: BI-RADS score {score} outside 1-5",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> Label {
        binarize_label(self.lesion_type)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub meta: PatchMeta,
    pub image: Patch,
}

impl PatchRecord {
    pub fn new(meta: PatchMeta, image: Patch) -> Result<Self> {
        meta.validate()?;
        check_patch(&meta.id, &image)?;
        Ok(PatchRecord { meta, image })
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn label(&self) -> Label {
        self.meta.label()
    }
}

pub(crate) fn check_patch(id: &str, image: &Patch) -> Result<()> {
    if image.dim() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Ingestion {
            record: id.to_string(),
            reason: format!(
                "image is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
                image.nrows(),
                image.ncols()
            ),
        });
    }
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Ingestion {
            record: id.to_string(),
            reason: "pixel values outside [0, 1]".into(),
        });
    }
    Ok(())
}

/// Anything carrying patch metadata: full records, manifest rows, or bare metadata.
pub trait Labeled {
    fn meta(&self) -> &PatchMeta;
}

impl Labeled for PatchMeta {
    fn meta(&self) -> &PatchMeta {
        self
    }
}

impl Labeled for PatchRecord {
    fn meta(&self) -> &PatchMeta {
        &self.meta
    }
}

impl<T: Labeled + ?Sized> Labeled for &T {
    fn meta(&self) -> &PatchMeta {
        (**self).meta()
    }
}

/// Counts per (lesion type × pathology tag) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryStats {
    cells: [[usize; 5]; 3],
}

impl SummaryStats {
    pub fn count(&self, lesion: LesionType, tag: PathologyTag) -> usize {
        self.cells[lesion.index()][tag.index()]
    }

    pub fn lesion_total(&self, lesion: LesionType) -> usize {
        self.cells[lesion.index()].iter().sum()
    }

    pub fn total_pathological(&self) -> usize {
        self.lesion_total(LesionType::Mass) + self.lesion_total(LesionType::Calcification)
    }

    pub fn total_non_pathological(&self) -> usize {
        self.lesion_total(LesionType::Normal)
    }

    pub fn total(&self) -> usize {
        self.total_pathological() + self.total_non_pathological()
    }

    fn record(&mut self, meta: &PatchMeta) {
        self.cells[meta.lesion_type.index()][meta.pathology_tag.index()] += 1;
    }
}

impl AddAssign for SummaryStats {
    fn add_assign(&mut self, rhs: Self) {
        for (row, other) in self.cells.iter_mut().zip(rhs.cells.iter()) {
            for (cell, o) in row.iter_mut().zip(other.iter()) {
                *cell += o;
            }
        }
    }
}

impl Add for SummaryStats {
    type Output = SummaryStats;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const COLUMNS: [(PathologyTag, &str); 4] = [
            (PathologyTag::Malignant, "Malignant"),
            (PathologyTag::BenignWithoutCallback, "Benign w/o callback"),
            (PathologyTag::Benign, "Benign"),
            (PathologyTag::Unproven, "Unproven"),
        ];
        write!(f, "{:<34}", "")?;
        for (_, header) in COLUMNS {
            write!(f, "{header:>21}")?;
        }
        writeln!(f, "{:>10}", "Total")?;
        for lesion in [LesionType::Calcification, LesionType::Mass] {
            write!(f, "{:<34}", capitalize(lesion.as_str()))?;
            for (tag, _) in COLUMNS {
                write!(f, "{:>21}", self.count(lesion, tag))?;
            }
            writeln!(f, "{:>10}", self.lesion_total(lesion))?;
        }
        let pad = 21 * COLUMNS.len() + 10;
        writeln!(f, "{:<34}{:>pad$}", "Number of pathological cases", self.total_pathological())?;
        writeln!(f, "{:<34}{:>pad$}", "Number of non-pathological cases", self.total_non_pathological())?;
        write!(f, "{:<34}{:>pad$}", "Total number of patches", self.total())
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Exact per-cell enumeration. An empty input yields all-zero stats.
pub fn summarize<T: Labeled>(records: &[T]) -> SummaryStats {
    let mut stats = SummaryStats::default();
    for r in records {
        stats.record(r.meta());
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, lesion: LesionType, tag: PathologyTag) -> PatchMeta {
        PatchMeta::new(id, lesion, tag, None).unwrap()
    }

    #[test]
    fn mass_and_calcification_are_pathological() {
        assert_eq!(binarize_label(LesionType::Mass), Label::Pathological);
        assert_eq!(binarize_label(LesionType::Calcification), Label::Pathological);
        assert_eq!(binarize_label(LesionType::Normal), Label::NonPathological);
    }

    #[test]
    fn unproven_calcification_is_pathological() {
        let m = meta("c1", LesionType::Calcification, PathologyTag::Unproven);
        assert_eq!(m.label(), Label::Pathological);
    }

    #[test]
    fn unknown_lesion_string_is_an_input_error() {
        assert!(matches!("masses".parse::<LesionType>(), Err(Error::Input(_))));
        assert!(matches!("".parse::<LesionType>(), Err(Error::Input(_))));
    }

    #[test]
    fn inconsistent_tag_is_rejected() {
        assert!(PatchMeta::new("a", LesionType::Normal, PathologyTag::Benign, None).is_err());
        assert!(PatchMeta::new("b", LesionType::Mass, PathologyTag::None, None).is_err());
        assert!(PatchMeta::new("c", LesionType::Mass, PathologyTag::Benign, Some(6)).is_err());
        assert!(PatchMeta::new("d", LesionType::Mass, PathologyTag::Benign, Some(5)).is_ok());
    }

    #[test]
    fn single_normal_record() {
        let stats = summarize(&[meta("n", LesionType::Normal, PathologyTag::None)]);
        assert_eq!(stats.total_pathological(), 0);
        assert_eq!(stats.total_non_pathological(), 1);
        assert_eq!(stats.total(), 1);
    }

    #[test]
    fn empty_summary_is_zero() {
        let stats = summarize::<PatchMeta>(&[]);
        assert_eq!(stats, SummaryStats::default());
        assert_eq!(stats.total(), 0);
    }

    #[test]
    fn thirty_mass_seventy_normal() {
        let mut records = Vec::new();
        for i in 0..30 {
            records.push(meta(&format!("m{i}"), LesionType::Mass, PathologyTag::Benign));
        }
        for i in 0..70 {
            records.push(meta(&format!("n{i}"), LesionType::Normal, PathologyTag::None));
        }
        let stats = summarize(&records);
        assert_eq!(stats.total_pathological(), 30);
        assert_eq!(stats.total(), 100);
        assert_eq!(stats.count(LesionType::Mass, PathologyTag::Benign), 30);
    }

    #[test]
    fn wrong_patch_shape_is_ingestion_error() {
        let m = meta("x", LesionType::Normal, PathologyTag::None);
        let err = PatchRecord::new(m, Array2::zeros((128, 256))).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref record, .. } if record == "x"));
    }

    #[test]
    fn table_renders_all_rows() {
        let stats = summarize(&[meta("n", LesionType::Normal, PathologyTag::None)]);
        let text = stats.to_string();
        assert!(text.contains("Calcification"));
        assert!(text.contains("Total number of patches"));
    }
}
