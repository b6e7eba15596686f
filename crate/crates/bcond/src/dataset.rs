//! Building records, the nine-category condition scale, and dataset splits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earliest construction year a record may carry.
pub const YEAR_MIN: i32 = 1500;

/// Fine-grained condition category as recorded in the source registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionCategory {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
}

impl ConditionCategory {
    pub const ALL: [ConditionCategory; 9] = [
        ConditionCategory::C1,
        ConditionCategory::C2,
        ConditionCategory::C3,
        ConditionCategory::C4,
        ConditionCategory::C5,
        ConditionCategory::C6,
        ConditionCategory::C7,
        ConditionCategory::C8,
        ConditionCategory::C9,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionCategory::C1 => "c1",
            ConditionCategory::C2 => "c2",
            ConditionCategory::C3 => "c3",
            ConditionCategory::C4 => "c4",
            ConditionCategory::C5 => "c5",
            ConditionCategory::C6 => "c6",
            ConditionCategory::C7 => "c7",
            ConditionCategory::C8 => "c8",
            ConditionCategory::C9 => "c9",
        }
    }
}

impl fmt::Display for ConditionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionCategory::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown condition category '{s}' (expected c1..c9)"
                ))
            })
    }
}

impl Serialize for ConditionCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ConditionCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coarse condition class used for classification and valuation.
///
/// `A` is best, `C` is worst; the derived `Ord` follows that scale, so
/// "worse" comparisons can use `>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionClass {
    A,
    B,
    C,
}

impl ConditionClass {
    pub const ALL: [ConditionClass; 3] = [ConditionClass::A, ConditionClass::B, ConditionClass::C];

    pub fn index(self) -> usize {
        match self {
            ConditionClass::A => 0,
            ConditionClass::B => 1,
            ConditionClass::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ConditionClass::ALL.get(i).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("class index {i} out of range 0..3"))
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionClass::A => "A",
            ConditionClass::B => "B",
            ConditionClass::C => "C",
        }
    }

    /// Ordinal position on the condition scale: A = 1, B = 2, C = 3.
    pub fn ordinal(self) -> f64 {
        self.index() as f64 + 1.0
    }
}

impl fmt::Display for ConditionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ConditionClass::A),
            "B" | "b" => Ok(ConditionClass::B),
            "C" | "c" => Ok(ConditionClass::C),
            _ => Err(Error::InvalidArgument(format!(
                "unknown condition class '{s}' (expected A, B, or C)"
            ))),
        }
    }
}

impl Serialize for ConditionClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ConditionClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Collapses the nine-category scale onto the three-class scale:
/// c1-c2 map to A, c3-c4 to B, c5-c9 to C.
pub fn map_category(category: ConditionCategory) -> ConditionClass {
    match category {
        ConditionCategory::C1 | ConditionCategory::C2 => ConditionClass::A,
        ConditionCategory::C3 | ConditionCategory::C4 => ConditionClass::B,
        _ => ConditionClass::C,
    }
}

/// Which split of the dataset a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitLabel {
    Training,
    Validation,
    Test,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 3] = [SplitLabel::Training, SplitLabel::Validation, SplitLabel::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Training => "training",
            SplitLabel::Validation => "validation",
            SplitLabel::Test => "test",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(SplitLabel::Training),
            "validation" | "val" => Ok(SplitLabel::Validation),
            "test" => Ok(SplitLabel::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split '{s}' (expected training, validation, or test)"
            ))),
        }
    }
}

impl Serialize for SplitLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SplitLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One house: its identifier, photographs, registry category, construction
/// year, and (when known) the value retained relative to new condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub house_id: String,
    pub images: Vec<String>,
    pub category: ConditionCategory,
    pub year_built: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
}

impl BuildingRecord {
    pub fn class(&self) -> ConditionClass {
        map_category(self.category)
    }

    pub fn validate(&self) -> Result<()> {
        if self.house_id.is_empty() {
            return Err(Error::InvalidArgument("house_id is empty".into()));
        }
        if self.images.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "house {} has no images",
                self.house_id
            )));
        }
        let max_year = current_year();
        if self.year_built < YEAR_MIN || self.year_built > max_year {
            return Err(Error::InvalidArgument(format!(
                "house {} year_built {} outside [{YEAR_MIN}, {max_year}]",
                self.house_id, self.year_built
            )));
        }
        if let Some(v) = self.retained_value {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "house {} retained_value {v} outside [0, 1]",
                    self.house_id
                )));
            }
        }
        Ok(())
    }
}

/// Fractions of houses per split; must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub training: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(training: f64, validation: f64, test: f64) -> Result<Self> {
        let r = SplitRatios {
            training,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.training, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidArgument(
                "split ratios must all be positive".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.training, self.validation, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            training: 0.60,
            validation: 0.15,
            test: 0.25,
        }
    }
}

/// Result of a house-level stratified partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub training: Vec<BuildingRecord>,
    pub validation: Vec<BuildingRecord>,
    pub test: Vec<BuildingRecord>,
}

impl DatasetSplit {
    pub fn get(&self, label: SplitLabel) -> &[BuildingRecord] {
        match label {
            SplitLabel::Training => &self.training,
            SplitLabel::Validation => &self.validation,
            SplitLabel::Test => &self.test,
        }
    }

    /// house_id -> split label for every record in the split.
    pub fn label_map(&self) -> HashMap<String, SplitLabel> {
        let mut map = HashMap::new();
        for label in SplitLabel::ALL {
            for rec in self.get(label) {
                map.insert(rec.house_id.clone(), label);
            }
        }
        map
    }
}

/// Reads a manifest: a JSON array of building records.
pub fn parse_manifest(path: &Path) -> Result<Vec<BuildingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::manifest(path, format!("not a JSON array of records: {e}")))?;
    let mut out = Vec::with_capacity(values.len());
    let mut seen = HashSet::new();
    for (i, value) in values.into_iter().enumerate() {
        let hint = value
            .get("house_id")
            .and_then(|v| v.as_str())
            .unwrap_or("<unknown>")
            .to_string();
        let record: BuildingRecord = serde_json::from_value(value)
            .map_err(|e| Error::manifest(path, format!("record {i} (house_id {hint}): {e}")))?;
        record
            .validate()
            .map_err(|e| Error::manifest(path, format!("record {i}: {e}")))?;
        if !seen.insert(record.house_id.clone()) {
            return Err(Error::manifest(
                path,
                format!("record {i}: duplicate house_id '{}'", record.house_id),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes records as a manifest (pretty-printed JSON array).
pub fn write_manifest(path: &Path, records: &[BuildingRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(records)
        .map_err(|e| Error::manifest(path, e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Keeps only the records carrying the given split label.
pub fn filter_split(records: &[BuildingRecord], label: SplitLabel) -> Vec<BuildingRecord> {
    records
        .iter()
        .filter(|r| r.split == Some(label))
        .cloned()
        .collect()
}

/// Splits houses into training / validation / test, stratified by condition
/// class so each class lands in each split within one house of its ratio
/// share. Shuffling is driven entirely by `seed`; a given (records, ratios,
/// seed) triple always produces the same partition. Houses are never divided:
/// all images of a house stay in one split.
pub fn partition(
    records: &[BuildingRecord],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput("record list"));
    }
    let mut by_class: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, rec) in records.iter().enumerate() {
        by_class[rec.class().index()].push(i);
    }
    for (class, members) in ConditionClass::ALL.iter().zip(&by_class) {
        if !members.is_empty() && members.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has only {} house(s), too few to cover 3 splits; \
                 add data or use fewer splits",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        training: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), ratios.as_array());
        let mut offset = 0;
        for (label, count) in SplitLabel::ALL.into_iter().zip(counts) {
            for &idx in &members[offset..offset + count] {
                let mut rec = records[idx].clone();
                rec.split = Some(label);
                match label {
                    SplitLabel::Training => split.training.push(rec),
                    SplitLabel::Validation => split.validation.push(rec),
                    SplitLabel::Test => split.test.push(rec),
                }
            }
            offset += count;
        }
    }
    Ok(split)
}

/// Largest-remainder apportionment of `n` items into parts proportional to
/// `ratios`. Ties on the fractional part go to the earlier split.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut fracs = [(0usize, 0.0f64); 3];
    let mut assigned = 0;
    for (i, r) in ratios.iter().enumerate() {
        let target = r * n as f64;
        counts[i] = target.floor() as usize;
        assigned += counts[i];
        fracs[i] = (i, target - target.floor());
    }
    fracs.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    for k in 0..n.saturating_sub(assigned) {
        counts[fracs[k % 3].0] += 1;
    }
    counts
}

fn current_year() -> i32 {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    civil_year_from_days(secs.div_euclid(86_400))
}

/// Year of a civil date given days since 1970-01-01 (proleptic Gregorian).
fn civil_year_from_days(z: i64) -> i32 {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (if m <= 2 { y + 1 } else { y }) as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, cat: ConditionCategory, year: i32) -> BuildingRecord {
        BuildingRecord {
            house_id: id.into(),
            images: vec![format!("images/{id}.png")],
            category: cat,
            year_built: year,
            retained_value: None,
            split: None,
        }
    }

    #[test]
    fn category_mapping_matches_scale() {
        use ConditionCategory::*;
        use ConditionClass::*;
        let expected = [
            (C1, A),
            (C2, A),
            (C3, B),
            (C4, B),
            (C5, C),
            (C6, C),
            (C7, C),
            (C8, C),
            (C9, C),
        ];
        for (cat, class) in expected {
            assert_eq!(map_category(cat), class, "{cat}");
        }
    }

    #[test]
    fn class_order_treats_c_as_worst() {
        assert!(ConditionClass::C > ConditionClass::B);
        assert!(ConditionClass::B > ConditionClass::A);
        assert_eq!(ConditionClass::A.ordinal(), 1.0);
        assert_eq!(ConditionClass::C.ordinal(), 3.0);
    }

    #[test]
    fn category_round_trips_through_strings() {
        for cat in ConditionCategory::ALL {
            assert_eq!(cat.as_str().parse::<ConditionCategory>().unwrap(), cat);
        }
        assert!("c10".parse::<ConditionCategory>().is_err());
        assert!("".parse::<ConditionCategory>().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut recs = vec![
            record("h1", ConditionCategory::C1, 1990),
            record("h2", ConditionCategory::C5, 1950),
        ];
        recs[1].retained_value = Some(0.41);
        recs[1].split = Some(SplitLabel::Test);
        write_manifest(&path, &recs).unwrap();
        let loaded = parse_manifest(&path).unwrap();
        assert_eq!(loaded, recs);
    }

    #[test]
    fn manifest_bad_category_names_house() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"[{"house_id":"hx","images":["a.png"],"category":"c10","year_built":1990}]"#,
        )
        .unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("hx"), "{err}");
        assert!(err.contains("c10"), "{err}");
    }

    #[test]
    fn manifest_missing_field_names_field_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"[{"house_id":"h1","images":["a.png"],"category":"c1","year_built":1990},
                {"house_id":"h2","images":["b.png"],"category":"c2"}]"#,
        )
        .unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("year_built"), "{err}");
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn manifest_duplicate_house_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let recs = vec![
            record("h1", ConditionCategory::C1, 1990),
            record("h1", ConditionCategory::C2, 1991),
        ];
        write_manifest(&path, &recs).unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn record_validation_bounds() {
        let mut r = record("h1", ConditionCategory::C1, 1400);
        assert!(r.validate().is_err());
        r.year_built = 1990;
        assert!(r.validate().is_ok());
        r.retained_value = Some(1.5);
        assert!(r.validate().is_err());
        r.retained_value = Some(0.5);
        r.images.clear();
        assert!(r.validate().is_err());
    }

    #[test]
    fn partition_ten_single_class_houses_splits_6_2_2() {
        let recs: Vec<BuildingRecord> = (0..10)
            .map(|i| record(&format!("h{i}"), ConditionCategory::C1, 1990))
            .collect();
        let ratios = SplitRatios::new(0.6, 0.2, 0.2).unwrap();
        let split = partition(&recs, &ratios, 7).unwrap();
        assert_eq!(split.training.len(), 6);
        assert_eq!(split.validation.len(), 2);
        assert_eq!(split.test.len(), 2);
        let mut ids: Vec<&str> = SplitLabel::ALL
            .iter()
            .flat_map(|&l| split.get(l).iter().map(|r| r.house_id.as_str()))
            .collect();
        ids.sort();
        assert_eq!(ids.len(), 10);
        ids.dedup();
        assert_eq!(ids.len(), 10, "every house appears exactly once");
    }

    #[test]
    fn partition_is_deterministic_in_seed() {
        let recs: Vec<BuildingRecord> = (0..30)
            .map(|i| {
                let cat = ConditionCategory::ALL[i % 9];
                record(&format!("h{i}"), cat, 1980)
            })
            .collect();
        let ratios = SplitRatios::default();
        let a = partition(&recs, &ratios, 11).unwrap();
        let b = partition(&recs, &ratios, 11).unwrap();
        assert_eq!(a.training, b.training);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        let c = partition(&recs, &ratios, 12).unwrap();
        assert!(
            a.training != c.training || a.validation != c.validation || a.test != c.test,
            "different seeds should normally shuffle differently"
        );
    }

    #[test]
    fn partition_stratifies_within_one_house() {
        let mut recs = Vec::new();
        for i in 0..17 {
            recs.push(record(&format!("a{i}"), ConditionCategory::C1, 1990));
        }
        for i in 0..23 {
            recs.push(record(&format!("b{i}"), ConditionCategory::C3, 1970));
        }
        for i in 0..9 {
            recs.push(record(&format!("c{i}"), ConditionCategory::C7, 1950));
        }
        let ratios = SplitRatios::default();
        let split = partition(&recs, &ratios, 3).unwrap();
        for (class, n_class) in [(ConditionClass::A, 17.0), (ConditionClass::B, 23.0), (ConditionClass::C, 9.0)] {
            for (label, ratio) in SplitLabel::ALL.into_iter().zip(ratios.as_array()) {
                let got = split
                    .get(label)
                    .iter()
                    .filter(|r| r.class() == class)
                    .count() as f64;
                assert!(
                    (got - ratio * n_class).abs() <= 1.0,
                    "{class}/{label}: {got} vs target {}",
                    ratio * n_class
                );
            }
        }
    }

    #[test]
    fn partition_rejects_underfilled_class() {
        let recs = vec![
            record("h1", ConditionCategory::C1, 1990),
            record("h2", ConditionCategory::C1, 1990),
            record("h3", ConditionCategory::C1, 1990),
            record("h4", ConditionCategory::C5, 1950),
        ];
        let err = partition(&recs, &SplitRatios::default(), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class C"), "{msg}");
        assert!(msg.contains("fewer splits"), "{msg}");
    }

    #[test]
    fn partition_rejects_bad_ratios() {
        let recs: Vec<BuildingRecord> = (0..5)
            .map(|i| record(&format!("h{i}"), ConditionCategory::C1, 1990))
            .collect();
        assert!(SplitRatios::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitRatios::new(0.5, 0.5, 0.0).is_err());
        let bad = SplitRatios {
            training: 0.9,
            validation: 0.2,
            test: 0.1,
        };
        assert!(partition(&recs, &bad, 0).is_err());
    }

    #[test]
    fn filter_split_selects_by_label() {
        let mut recs = vec![
            record("h1", ConditionCategory::C1, 1990),
            record("h2", ConditionCategory::C1, 1991),
        ];
        recs[0].split = Some(SplitLabel::Training);
        recs[1].split = Some(SplitLabel::Test);
        assert_eq!(filter_split(&recs, SplitLabel::Training).len(), 1);
        assert_eq!(filter_split(&recs, SplitLabel::Validation).len(), 0);
    }

    #[test]
    fn civil_year_conversion() {
        assert_eq!(civil_year_from_days(0), 1970);
        assert_eq!(civil_year_from_days(19_723), 2024);
        assert_eq!(civil_year_from_days(-1), 1969);
    }
}
