//! Subject manifests: stage labels, CSV I/O, filtering, and the stratified
//! train/test split. The synthetic generator lives in [`synth`].
//!
//! A manifest row is
//! `image_path,sex,age_years,stage,roi_x,roi_y,roi_w,roi_h`; the four ROI
//! fields are either all present or all empty. Image paths are stored as
//! written and resolved against the manifest's directory.

pub mod synth;

pub use synth::{generate_synthetic, SyntheticConfig};

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;

pub const MANIFEST_HEADER: &str = "image_path,sex,age_years,stage,roi_x,roi_y,roi_w,roi_h";

/// Cervical vertebral maturation stage, CS1 (pre-peak) through CS6 (post-peak).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageLabel {
    Cs1,
    Cs2,
    Cs3,
    Cs4,
    Cs5,
    Cs6,
}

pub const STAGE_COUNT: usize = 6;

impl StageLabel {
    pub const ALL: [StageLabel; STAGE_COUNT] = [
        StageLabel::Cs1,
        StageLabel::Cs2,
        StageLabel::Cs3,
        StageLabel::Cs4,
        StageLabel::Cs5,
        StageLabel::Cs6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StageLabel> {
        StageLabel::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        ["CS1", "CS2", "CS3", "CS4", "CS5", "CS6"][self.index()]
    }

    pub fn from_token(s: &str) -> Option<StageLabel> {
        StageLabel::ALL.iter().copied().find(|l| l.token() == s)
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn token(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    pub fn from_token(s: &str) -> Option<Sex> {
        match s {
            "F" => Some(Sex::Female),
            "M" => Some(Sex::Male),
            _ => None,
        }
    }
}

/// Rectangular region of interest in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    /// As written in the manifest; resolve with [`SubjectRecord::resolved_path`].
    pub image_path: PathBuf,
    pub sex: Sex,
    pub age_years: f64,
    pub stage: StageLabel,
    pub roi: Option<Roi>,
}

impl SubjectRecord {
    pub fn resolved_path(&self, base_dir: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            base_dir.join(&self.image_path)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    records: Vec<SubjectRecord>,
    base_dir: PathBuf,
    /// Non-fatal findings from loading (e.g. ages outside the plausible range).
    warnings: Vec<String>,
}

impl Manifest {
    pub fn from_records(records: Vec<SubjectRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            records,
            base_dir: base_dir.into(),
            warnings: Vec::new(),
        }
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Load and validate a manifest CSV.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let man_err = |row: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            row,
            message,
        };

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut rows = reader.records();

        let header = rows
            .next()
            .ok_or_else(|| man_err(0, "empty file".into()))?
            .map_err(|e| man_err(0, e.to_string()))?;
        let header_line = header.iter().collect::<Vec<_>>().join(",");
        if header_line != MANIFEST_HEADER {
            return Err(man_err(
                0,
                format!("header must be exactly `{}`, got `{}`", MANIFEST_HEADER, header_line),
            ));
        }

        let mut records = Vec::new();
        let mut warnings = Vec::new();
        for (i, row) in rows.enumerate() {
            let rownum = i + 1;
            let row = row.map_err(|e| man_err(rownum, e.to_string()))?;
            if row.len() != 8 {
                return Err(man_err(rownum, format!("expected 8 fields, got {}", row.len())));
            }
            let field = |k: usize| row.get(k).unwrap_or("").trim();

            let image_path = field(0);
            if image_path.is_empty() {
                return Err(man_err(rownum, "empty image_path".into()));
            }
            let sex = Sex::from_token(field(1))
                .ok_or_else(|| man_err(rownum, format!("sex must be F or M, got `{}`", field(1))))?;
            let age_years: f64 = field(2)
                .parse()
                .map_err(|_| man_err(rownum, format!("unparseable age_years `{}`", field(2))))?;
            if !age_years.is_finite() || age_years < 0.0 {
                return Err(man_err(rownum, format!("age_years {} out of domain", age_years)));
            }
            if !(4.0..=29.0).contains(&age_years) {
                warnings.push(format!(
                    "{} row {}: age {} outside the expected [4, 29] range",
                    path.display(),
                    rownum,
                    age_years
                ));
            }
            let stage = StageLabel::from_token(field(3)).ok_or_else(|| {
                man_err(rownum, format!("unknown stage `{}` (expected CS1..CS6)", field(3)))
            })?;

            let roi_fields = [field(4), field(5), field(6), field(7)];
            let present = roi_fields.iter().filter(|f| !f.is_empty()).count();
            let roi = match present {
                0 => None,
                4 => {
                    let mut vals = [0u32; 4];
                    for (j, f) in roi_fields.iter().enumerate() {
                        vals[j] = f.parse().map_err(|_| {
                            man_err(rownum, format!("unparseable ROI field `{}`", f))
                        })?;
                    }
                    if vals[2] == 0 || vals[3] == 0 {
                        return Err(man_err(rownum, "ROI must have positive width and height".into()));
                    }
                    Some(Roi {
                        x: vals[0],
                        y: vals[1],
                        w: vals[2],
                        h: vals[3],
                    })
                }
                _ => {
                    return Err(man_err(
                        rownum,
                        "ROI fields must be all present or all empty".into(),
                    ))
                }
            };

            records.push(SubjectRecord {
                image_path: PathBuf::from(image_path),
                sex,
                age_years,
                stage,
                roi,
            });
        }

        Ok(Manifest {
            records,
            base_dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            warnings,
        })
    }

    /// Write the manifest; image paths are emitted as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let (rx, ry, rw, rh) = match &r.roi {
                Some(roi) => (
                    roi.x.to_string(),
                    roi.y.to_string(),
                    roi.w.to_string(),
                    roi.h.to_string(),
                ),
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.image_path.display(),
                r.sex.token(),
                r.age_years,
                r.stage.token(),
                rx,
                ry,
                rw,
                rh
            ));
        }
        std::fs::write(path, out).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Records of one sex, order preserved.
    pub fn filter_by_sex(&self, sex: Sex) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.sex == sex).cloned().collect(),
            base_dir: self.base_dir.clone(),
            warnings: Vec::new(),
        }
    }

    /// Per-stage record counts, indexed by [`StageLabel::index`].
    pub fn class_histogram(&self) -> [usize; STAGE_COUNT] {
        let mut hist = [0usize; STAGE_COUNT];
        for r in &self.records {
            hist[r.stage.index()] += 1;
        }
        hist
    }

    /// Deterministic per-stage split. Each stage contributes
    /// `round(fraction·n)` records to train (ties toward train); both outputs
    /// preserve manifest order.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!(
                "split fraction must be in (0, 1), got {}",
                fraction
            )));
        }
        let mut to_train = vec![false; self.records.len()];
        for stage in StageLabel::ALL {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].stage == stage)
                .collect();
            let n = idx.len();
            if n == 0 {
                continue;
            }
            let n_train = ((fraction * n as f64 + 0.5).floor() as usize).min(n);
            let mut r = rng::stream(rng::mix2(seed, stage.index() as u64));
            idx.shuffle(&mut r);
            for &i in idx.iter().take(n_train) {
                to_train[i] = true;
            }
        }
        let pick = |keep: bool| Manifest {
            records: self
                .records
                .iter()
                .zip(&to_train)
                .filter(|(_, &t)| t == keep)
                .map(|(r, _)| r.clone())
                .collect(),
            base_dir: self.base_dir.clone(),
            warnings: Vec::new(),
        };
        Ok((pick(true), pick(false)))
    }

    /// Rewrite image paths so the manifest can be saved under `new_base`.
    pub fn rebase(&self, new_base: &Path) -> Result<Manifest> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let abs = self.resolve_abs(r)?;
                Ok(SubjectRecord {
                    image_path: relative_from(&abs, new_base),
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            records,
            base_dir: new_base.to_path_buf(),
            warnings: Vec::new(),
        })
    }

    fn resolve_abs(&self, r: &SubjectRecord) -> Result<PathBuf> {
        let p = r.resolved_path(&self.base_dir);
        std::path::absolute(&p).map_err(|source| Error::Read { path: p, source })
    }
}

/// Express `target` relative to `base` (both made absolute, lexically
/// normalized; no filesystem access beyond resolving the working directory).
pub fn relative_from(target: &Path, base: &Path) -> PathBuf {
    fn normalize(p: &Path) -> Vec<std::ffi::OsString> {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let mut parts: Vec<std::ffi::OsString> = Vec::new();
        for comp in abs.components() {
            use std::path::Component::*;
            match comp {
                CurDir => {}
                ParentDir => {
                    parts.pop();
                }
                other => parts.push(other.as_os_str().to_os_string()),
            }
        }
        parts
    }
    let t = normalize(target);
    let b = normalize(base);
    let common = t.iter().zip(&b).take_while(|(a, c)| a == c).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for part in &t[common..] {
        rel.push(part);
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: StageLabel, sex: Sex, i: usize) -> SubjectRecord {
        SubjectRecord {
            image_path: PathBuf::from(format!("images/{}_{}.png", stage.token(), i)),
            sex,
            age_years: 10.0,
            stage,
            roi: None,
        }
    }

    /// Manifest with `counts[s]` records of stage s, sexes alternating.
    fn synthetic_composition(counts: [usize; STAGE_COUNT]) -> Manifest {
        let mut records = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let sex = if records.len() % 2 == 0 { Sex::Female } else { Sex::Male };
                records.push(record(StageLabel::from_index(s).unwrap(), sex, i));
            }
        }
        Manifest::from_records(records, ".")
    }

    #[test]
    fn stage_tokens_roundtrip() {
        for l in StageLabel::ALL {
            assert_eq!(StageLabel::from_token(l.token()), Some(l));
        }
        assert_eq!(StageLabel::from_token("CS7"), None);
        assert_eq!(StageLabel::Cs1.index(), 0);
        assert_eq!(StageLabel::Cs6.index(), 5);
    }

    #[test]
    fn manifest_roundtrips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let mut m = synthetic_composition([1, 1, 1, 1, 1, 1]);
        m.records[2].roi = Some(Roi { x: 4, y: 8, w: 70, h: 154 });
        m.records[3].age_years = 12.25;
        m.save(&path).unwrap();

        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.records(), m.records());
        assert_eq!(back.class_histogram(), [1; 6]);
        assert!(back.warnings().is_empty());
    }

    #[test]
    fn loader_reports_offending_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            format!("{}\nimg.png,F,10,CS2,,,,\nimg2.png,F,10,CS7,,,,\n", MANIFEST_HEADER),
        )
        .unwrap();
        let err = Manifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("row 2"), "got: {err}");
        assert!(err.contains("CS7"), "got: {err}");
    }

    #[test]
    fn loader_rejects_wrong_header_and_partial_roi() {
        let dir = tempfile::tempdir().unwrap();
        let bad_header = dir.path().join("h.csv");
        std::fs::write(&bad_header, "image,sex\n").unwrap();
        assert!(Manifest::load(&bad_header).unwrap_err().to_string().contains("header"));

        let partial = dir.path().join("p.csv");
        std::fs::write(
            &partial,
            format!("{}\nimg.png,M,9,CS1,4,,,\n", MANIFEST_HEADER),
        )
        .unwrap();
        assert!(Manifest::load(&partial)
            .unwrap_err()
            .to_string()
            .contains("all present or all empty"));
    }

    #[test]
    fn loader_warns_on_implausible_age() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("age.csv");
        std::fs::write(&path, format!("{}\nimg.png,F,47,CS3,,,,\n", MANIFEST_HEADER)).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.warnings().len(), 1);
        assert!(m.warnings()[0].contains("47"));
    }

    #[test]
    fn sex_filter_keeps_order_and_counts() {
        let m = synthetic_composition([2, 2, 2, 2, 1, 1]);
        let f = m.filter_by_sex(Sex::Female);
        let male = m.filter_by_sex(Sex::Male);
        assert_eq!(f.len() + male.len(), m.len());
        assert_eq!(f.len(), 5);
        assert!(f.records().iter().all(|r| r.sex == Sex::Female));
        // Alternating input of one sex only.
        let all_female = Manifest::from_records(
            (0..10).map(|i| record(StageLabel::Cs1, Sex::Female, i)).collect(),
            ".",
        );
        assert!(all_female.filter_by_sex(Sex::Male).is_empty());
    }

    #[test]
    fn histogram_matches_known_composition() {
        let counts = [153, 182, 174, 159, 167, 177];
        let m = synthetic_composition(counts);
        assert_eq!(m.class_histogram(), counts);
        assert_eq!(m.len(), 1012);
        assert_eq!(Manifest::default().class_histogram(), [0; 6]);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let m = synthetic_composition([100; 6]);
        let (tr, te) = m.stratified_split(0.8, 7).unwrap();
        assert_eq!(tr.class_histogram(), [80; 6]);
        assert_eq!(te.class_histogram(), [20; 6]);

        let (tr2, te2) = m.stratified_split(0.8, 7).unwrap();
        assert_eq!(tr.records(), tr2.records());
        assert_eq!(te.records(), te2.records());

        let (tr3, _) = m.stratified_split(0.8, 8).unwrap();
        assert_ne!(tr.records(), tr3.records(), "different seeds must differ");
    }

    #[test]
    fn split_rounds_half_toward_train() {
        // 153 × 0.8 = 122.4 → 122; 5 × 0.5 = 2.5 → 3.
        let m = synthetic_composition([153, 0, 0, 0, 0, 0]);
        let (tr, te) = m.stratified_split(0.8, 0).unwrap();
        assert_eq!(tr.len(), 122);
        assert_eq!(te.len(), 31);

        let m5 = synthetic_composition([5, 0, 0, 0, 0, 0]);
        let (tr5, te5) = m5.stratified_split(0.5, 0).unwrap();
        assert_eq!((tr5.len(), te5.len()), (3, 2));
    }

    #[test]
    fn split_partitions_the_manifest() {
        let m = synthetic_composition([13, 7, 22, 9, 4, 11]);
        let (tr, te) = m.stratified_split(0.75, 3).unwrap();
        assert_eq!(tr.len() + te.len(), m.len());
        // Histogram additivity.
        let h = m.class_histogram();
        let (ht, he) = (tr.class_histogram(), te.class_histogram());
        for s in 0..STAGE_COUNT {
            assert_eq!(ht[s] + he[s], h[s]);
        }
        // Disjoint and order-preserving: merge by identity and compare.
        let mut merged: Vec<&SubjectRecord> = tr.records().iter().chain(te.records()).collect();
        merged.sort_by_key(|r| r.image_path.clone());
        let mut original: Vec<&SubjectRecord> = m.records().iter().collect();
        original.sort_by_key(|r| r.image_path.clone());
        assert_eq!(merged, original);
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let m = synthetic_composition([4, 4, 4, 4, 4, 4]);
        assert!(m.stratified_split(0.0, 0).is_err());
        assert!(m.stratified_split(1.0, 0).is_err());
    }

    #[test]
    fn relative_path_computation() {
        let rel = relative_from(Path::new("/a/b/images/x.png"), Path::new("/a/b"));
        assert_eq!(rel, PathBuf::from("images/x.png"));
        let up = relative_from(Path::new("/a/c/x.png"), Path::new("/a/b"));
        assert_eq!(up, PathBuf::from("../c/x.png"));
        let same = relative_from(Path::new("/a"), Path::new("/a"));
        assert_eq!(same, PathBuf::from("."));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn split_counts_follow_the_round_rule(
                counts in proptest::array::uniform6(2usize..40),
                fraction in 0.5f64..0.9,
                seed in 0u64..100,
            ) {
                let m = synthetic_composition(counts);
                let (tr, te) = m.stratified_split(fraction, seed).unwrap();
                let ht = tr.class_histogram();
                let he = te.class_histogram();
                for s in 0..STAGE_COUNT {
                    let expect = ((fraction * counts[s] as f64 + 0.5).floor() as usize).min(counts[s]);
                    prop_assert_eq!(ht[s], expect);
                    prop_assert_eq!(he[s], counts[s] - expect);
                }
            }
        }
    }
}
