//! In-situ trait table: ingestion, cleaning, and the species-to-PFT lookup.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const N_BIO: usize = 19;
pub const N_TRAITS: usize = 5;

/// The five leaf traits, in the canonical imputation order (descending
/// data availability).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafTrait {
    /// Specific leaf area, mm^2 mg^-1.
    Sla,
    /// Leaf dry matter content, g g^-1.
    Ldmc,
    /// Leaf nitrogen concentration, mg g^-1.
    Lnc,
    /// Leaf phosphorus concentration, mg g^-1.
    Lpc,
    /// Leaf N:P ratio.
    Lnpr,
}

impl LeafTrait {
    pub const ALL: [LeafTrait; N_TRAITS] = [
        LeafTrait::Sla,
        LeafTrait::Ldmc,
        LeafTrait::Lnc,
        LeafTrait::Lpc,
        LeafTrait::Lnpr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn column(self) -> &'static str {
        match self {
            LeafTrait::Sla => "sla",
            LeafTrait::Ldmc => "ldmc",
            LeafTrait::Lnc => "lnc",
            LeafTrait::Lpc => "lpc",
            LeafTrait::Lnpr => "lnpr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LeafTrait::Sla => "SLA",
            LeafTrait::Ldmc => "LDMC",
            LeafTrait::Lnc => "LNC",
            LeafTrait::Lpc => "LPC",
            LeafTrait::Lnpr => "LNPR",
        }
    }
}

impl fmt::Display for LeafTrait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LeafTrait {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LeafTrait::ALL
            .into_iter()
            .find(|t| t.column().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown trait `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthForm {
    Tree,
    Shrub,
    Grass,
    Fern,
    Crop,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafType {
    Needleleaf,
    Broadleaf,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phenology {
    Evergreen,
    Deciduous,
    Unknown,
}

impl GrowthForm {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "tree" => GrowthForm::Tree,
            "shrub" => GrowthForm::Shrub,
            "grass" | "graminoid" | "herb" => GrowthForm::Grass,
            "fern" => GrowthForm::Fern,
            "crop" => GrowthForm::Crop,
            "other" | "" => GrowthForm::Other,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            GrowthForm::Tree => "tree",
            GrowthForm::Shrub => "shrub",
            GrowthForm::Grass => "grass",
            GrowthForm::Fern => "fern",
            GrowthForm::Crop => "crop",
            GrowthForm::Other => "other",
        }
    }
}

impl LeafType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "needleleaf" | "needleleaved" | "needle" => LeafType::Needleleaf,
            "broadleaf" | "broadleaved" | "broad" => LeafType::Broadleaf,
            "unknown" | "" => LeafType::Unknown,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            LeafType::Needleleaf => "needleleaf",
            LeafType::Broadleaf => "broadleaf",
            LeafType::Unknown => "unknown",
        }
    }
}

impl Phenology {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "evergreen" => Phenology::Evergreen,
            "deciduous" => Phenology::Deciduous,
            "unknown" | "" => Phenology::Unknown,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Phenology::Evergreen => "evergreen",
            Phenology::Deciduous => "deciduous",
            Phenology::Unknown => "unknown",
        }
    }
}

/// Plant functional type. Codes 1..=7 are the on-disk class codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PftClass {
    Enf = 1,
    Ebf = 2,
    Dnf = 3,
    Dbf = 4,
    Shl = 5,
    Grl = 6,
    Barren = 7,
}

pub const N_PFT: usize = 7;

impl PftClass {
    pub const ALL: [PftClass; N_PFT] = [
        PftClass::Enf,
        PftClass::Ebf,
        PftClass::Dnf,
        PftClass::Dbf,
        PftClass::Shl,
        PftClass::Grl,
        PftClass::Barren,
    ];

    /// PFTs that carry trait values (BARREN is excluded).
    pub const VEGETATED: [PftClass; 6] = [
        PftClass::Enf,
        PftClass::Ebf,
        PftClass::Dnf,
        PftClass::Dbf,
        PftClass::Shl,
        PftClass::Grl,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based index into 7-vectors.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        PftClass::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        PftClass::ALL.get(i).copied()
    }

    pub fn is_vegetated(self) -> bool {
        self != PftClass::Barren
    }

    pub fn label(self) -> &'static str {
        match self {
            PftClass::Enf => "ENF",
            PftClass::Ebf => "EBF",
            PftClass::Dnf => "DNF",
            PftClass::Dbf => "DBF",
            PftClass::Shl => "SHL",
            PftClass::Grl => "GRL",
            PftClass::Barren => "BARREN",
        }
    }

    /// `{"ENF": 1, ...}` map written into class raster headers.
    pub fn code_map() -> BTreeMap<String, u8> {
        PftClass::ALL
            .iter()
            .map(|c| (c.label().to_string(), c.code()))
            .collect()
    }
}

impl fmt::Display for PftClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PftClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PftClass::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown PFT `{s}`")))
    }
}

/// One in-situ measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitRecord {
    pub record_id: String,
    pub species: String,
    pub genus: String,
    pub family: String,
    pub growth_form: GrowthForm,
    pub leaf_type: LeafType,
    pub leaf_phenology: Phenology,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub climate: [Option<f64>; N_BIO],
    pub traits: [Option<f64>; N_TRAITS],
}

impl TraitRecord {
    pub fn trait_value(&self, t: LeafTrait) -> Option<f64> {
        self.traits[t.index()]
    }

    pub fn coordinates(&self) -> Option<(f64, f64)> {
        Some((self.latitude?, self.longitude?))
    }

    /// Check the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        match (self.latitude, self.longitude) {
            (Some(lat), Some(lon)) => {
                if !(-90.0..=90.0).contains(&lat) {
                    return Err(format!("latitude {lat} outside [-90, 90]"));
                }
                if !(-180.0..=180.0).contains(&lon) {
                    return Err(format!("longitude {lon} outside [-180, 180]"));
                }
            }
            (None, None) => {}
            _ => return Err("latitude and longitude must both be present or both absent".into()),
        }
        for t in LeafTrait::ALL {
            if let Some(v) = self.traits[t.index()] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(format!("{t} value {v} must be finite and > 0"));
                }
                if t == LeafTrait::Ldmc && v >= 1.0 {
                    return Err(format!("LDMC value {v} must lie in (0, 1)"));
                }
            }
        }
        if self.climate.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite climate value".into());
        }
        Ok(())
    }
}

/// How a predictor column enters the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub columns: Vec<(String, PredictorKind)>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        let mut columns: Vec<(String, PredictorKind)> = [
            "species",
            "genus",
            "family",
            "growth_form",
            "leaf_type",
            "leaf_phenology",
        ]
        .iter()
        .map(|c| (c.to_string(), PredictorKind::Categorical))
        .collect();
        columns.extend((1..=N_BIO).map(|i| (format!("bio{i}"), PredictorKind::Continuous)));
        columns.extend(
            LeafTrait::ALL
                .iter()
                .map(|t| (t.column().to_string(), PredictorKind::Continuous)),
        );
        ColumnSchema { columns }
    }
}

impl ColumnSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, _) in &self.columns {
            if !seen.insert(name.as_str()) {
                return Err(Error::SchemaMismatch(format!("column `{name}` listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitTable {
    pub records: Vec<TraitRecord>,
    pub schema: ColumnSchema,
}

/// Header of the trait CSV contract, in order.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "record_id",
        "species",
        "genus",
        "family",
        "growth_form",
        "leaf_type",
        "leaf_phenology",
        "lat",
        "lon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=N_BIO).map(|i| format!("bio{i}")));
    h.extend(LeafTrait::ALL.iter().map(|t| t.column().to_string()));
    h
}

impl TraitTable {
    pub fn new(records: Vec<TraitRecord>) -> Result<Self> {
        Self::with_schema(records, ColumnSchema::default())
    }

    pub fn with_schema(records: Vec<TraitRecord>, schema: ColumnSchema) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.record_id.as_str()) {
                return Err(Error::invalid(format!("duplicate record_id `{}`", r.record_id)));
            }
        }
        Ok(TraitTable { records, schema })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of present values for `t`.
    pub fn observed_count(&self, t: LeafTrait) -> usize {
        self.records.iter().filter(|r| r.traits[t.index()].is_some()).count()
    }

    pub fn present_value_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.traits.iter().filter(|v| v.is_some()).count())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(csv_header())?;
        for r in &self.records {
            w.write_record(record_to_row(r))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_to_row(r: &TraitRecord) -> Vec<String> {
    let mut row = vec![
        r.record_id.clone(),
        r.species.clone(),
        r.genus.clone(),
        r.family.clone(),
        r.growth_form.as_str().to_string(),
        r.leaf_type.as_str().to_string(),
        r.leaf_phenology.as_str().to_string(),
        fmt_opt(r.latitude),
        fmt_opt(r.longitude),
    ];
    row.extend(r.climate.iter().map(|v| fmt_opt(*v)));
    row.extend(r.traits.iter().map(|v| fmt_opt(*v)));
    row
}

/// Load the trait CSV. Absent cells become `None`; malformed rows are
/// rejected with their file line number.
pub fn load_trait_table(path: &Path, schema: &ColumnSchema) -> Result<TraitTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trait_table(file, schema)
}

pub fn read_trait_table<R: std::io::Read>(reader: R, schema: &ColumnSchema) -> Result<TraitTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = BTreeMap::new();
    for name in csv_header() {
        let idx = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        col.insert(name, idx);
    }
    for (name, _) in &schema.columns {
        if !col.contains_key(name) {
            return Err(Error::MissingColumn(name.clone()));
        }
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let get = |name: &str| row.get(col[name]).unwrap_or("").trim();
        let num = |name: &str| -> Result<Option<f64>> {
            let s = get(name);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::BadRow {
                row: line,
                message: format!("column `{name}`: cannot parse `{s}` as a number"),
            })
        };
        let bad = |message: String| Error::BadRow { row: line, message };

        let record_id = get("record_id").to_string();
        if record_id.is_empty() {
            return Err(bad("empty record_id".into()));
        }
        let growth_form = GrowthForm::parse(get("growth_form"))
            .ok_or_else(|| bad(format!("unknown growth_form `{}`", get("growth_form"))))?;
        let leaf_type = LeafType::parse(get("leaf_type"))
            .ok_or_else(|| bad(format!("unknown leaf_type `{}`", get("leaf_type"))))?;
        let leaf_phenology = Phenology::parse(get("leaf_phenology"))
            .ok_or_else(|| bad(format!("unknown leaf_phenology `{}`", get("leaf_phenology"))))?;
        let mut climate = [None; N_BIO];
        for (k, slot) in climate.iter_mut().enumerate() {
            *slot = num(&format!("bio{}", k + 1))?;
        }
        let mut traits = [None; N_TRAITS];
        for t in LeafTrait::ALL {
            traits[t.index()] = num(t.column())?;
        }
        let rec = TraitRecord {
            record_id,
            species: get("species").to_string(),
            genus: get("genus").to_string(),
            family: get("family").to_string(),
            growth_form,
            leaf_type,
            leaf_phenology,
            latitude: num("lat")?,
            longitude: num("lon")?,
            climate,
            traits,
        };
        rec.validate().map_err(bad)?;
        records.push(rec);
    }
    TraitTable::with_schema(records, schema.clone())
}

/// A trait cell removed as an outlier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RemovedCell {
    pub record_id: String,
    pub leaf_trait: LeafTrait,
}

/// Per-(species, trait) mean and population std over present values.
pub type GroupStats = BTreeMap<(String, LeafTrait), (f64, f64)>;

/// Statistics of every (species, trait) group with at least two values.
pub fn outlier_group_stats(table: &TraitTable) -> GroupStats {
    let mut groups: BTreeMap<(String, LeafTrait), Vec<f64>> = BTreeMap::new();
    for r in &table.records {
        for t in LeafTrait::ALL {
            if let Some(v) = r.traits[t.index()] {
                groups.entry((r.species.clone(), t)).or_default().push(v);
            }
        }
    }
    groups
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, v)| (k, (stats::mean(&v), stats::pop_std(&v))))
        .collect()
}

/// Single-pass species outlier rule: values farther than `k` population
/// standard deviations from their species mean are set missing.
pub fn remove_outliers(table: &TraitTable, k: f64) -> (TraitTable, Vec<RemovedCell>) {
    let group_stats = outlier_group_stats(table);
    remove_outliers_with_stats(table, k, &group_stats)
}

/// [`remove_outliers`] against precomputed group statistics.
pub fn remove_outliers_with_stats(
    table: &TraitTable,
    k: f64,
    group_stats: &GroupStats,
) -> (TraitTable, Vec<RemovedCell>) {
    assert!(k > 0.0, "outlier multiplier must be positive");
    let mut out = table.clone();
    let mut removed = Vec::new();
    for r in &mut out.records {
        for t in LeafTrait::ALL {
            let Some(v) = r.traits[t.index()] else { continue };
            let Some(&(m, sd)) = group_stats.get(&(r.species.clone(), t)) else {
                continue;
            };
            if (v - m).abs() > k * sd {
                r.traits[t.index()] = None;
                removed.push(RemovedCell {
                    record_id: r.record_id.clone(),
                    leaf_trait: t,
                });
            }
        }
    }
    (out, removed)
}

/// Growth forms dropped by default before gap filling.
pub fn default_excluded_forms() -> BTreeSet<GrowthForm> {
    [GrowthForm::Fern, GrowthForm::Crop].into_iter().collect()
}

/// Remove records whose growth form is in `excluded`. Returns the filtered
/// table and the number of removed records.
pub fn drop_excluded_groups(table: &TraitTable, excluded: &BTreeSet<GrowthForm>) -> (TraitTable, usize) {
    let records: Vec<TraitRecord> = table
        .records
        .iter()
        .filter(|r| !excluded.contains(&r.growth_form))
        .cloned()
        .collect();
    let removed = table.records.len() - records.len();
    (
        TraitTable {
            records,
            schema: table.schema.clone(),
        },
        removed,
    )
}

/// Categorical-trait lookup of the record's PFT; `None` when the categorical
/// information is insufficient.
pub fn species_to_pft(record: &TraitRecord) -> Option<PftClass> {
    pft_from_categories(record.growth_form, record.leaf_type, record.leaf_phenology)
}

pub fn pft_from_categories(form: GrowthForm, leaf: LeafType, phen: Phenology) -> Option<PftClass> {
    match form {
        GrowthForm::Tree => match (leaf, phen) {
            (LeafType::Needleleaf, Phenology::Evergreen) => Some(PftClass::Enf),
            (LeafType::Broadleaf, Phenology::Evergreen) => Some(PftClass::Ebf),
            (LeafType::Needleleaf, Phenology::Deciduous) => Some(PftClass::Dnf),
            (LeafType::Broadleaf, Phenology::Deciduous) => Some(PftClass::Dbf),
            _ => None,
        },
        GrowthForm::Shrub => Some(PftClass::Shl),
        GrowthForm::Grass => Some(PftClass::Grl),
        _ => None,
    }
}
