//! Dataset model, CSV ingestion, eligibility and bandwidth windows.
//!
//! A [`Dataset`] is the single immutable input of every analysis. Units carry
//! the forcing variable `S`, observed application `A`, grant receipt `W`,
//! dropout outcome `Y` and pre-assignment covariates. Eligibility is the
//! deterministic rule `Z = 1(S <= s0)`, inclusive at the threshold.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default divisor used to standardize the forcing variable (euros).
pub const DEFAULT_SCALE: f64 = 1000.0;

/// Columns every data file must carry in addition to the covariates.
pub const REQUIRED_COLUMNS: [&str; 5] = ["id", "S", "A", "W", "Y"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Binary,
    Categorical,
}

/// Declaration of one pre-assignment covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    /// Category labels, categorical covariates only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    /// Reference label, categorical covariates only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

impl CovariateSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Continuous,
            levels: Vec::new(),
            baseline: None,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Binary,
            levels: Vec::new(),
            baseline: None,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
        baseline: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical,
            levels: levels.into_iter().map(Into::into).collect(),
            baseline: Some(baseline.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("covariate with empty name".into()));
        }
        match self.kind {
            CovariateKind::Continuous | CovariateKind::Binary => {
                if !self.levels.is_empty() || self.baseline.is_some() {
                    return Err(Error::Config(format!(
                        "covariate '{}': levels/baseline only apply to categorical covariates",
                        self.name
                    )));
                }
            }
            CovariateKind::Categorical => {
                if self.levels.len() < 3 {
                    return Err(Error::Config(format!(
                        "categorical covariate '{}' needs at least 3 levels",
                        self.name
                    )));
                }
                let distinct: HashSet<&String> = self.levels.iter().collect();
                if distinct.len() != self.levels.len() {
                    return Err(Error::Config(format!(
                        "categorical covariate '{}' has duplicate levels",
                        self.name
                    )));
                }
                match &self.baseline {
                    Some(b) if self.levels.contains(b) => {}
                    Some(b) => {
                        return Err(Error::Config(format!(
                            "baseline '{b}' of covariate '{}' is not a declared level",
                            self.name
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "categorical covariate '{}' needs a baseline",
                            self.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Level indices (into `levels`) in modelling order: declared order with the
    /// baseline moved last.
    pub fn ordered_levels(&self) -> Vec<usize> {
        let base = self.baseline_index();
        let mut order: Vec<usize> = (0..self.levels.len())
            .filter(|&k| Some(k) != base)
            .collect();
        if let Some(b) = base {
            order.push(b);
        }
        order
    }

    pub fn baseline_index(&self) -> Option<usize> {
        let b = self.baseline.as_ref()?;
        self.levels.iter().position(|l| l == b)
    }

    /// Number of latent components / design columns this covariate occupies.
    pub fn width(&self) -> usize {
        match self.kind {
            CovariateKind::Continuous | CovariateKind::Binary => 1,
            CovariateKind::Categorical => self.levels.len() - 1,
        }
    }

    /// Names of the components, one per column of [`width`](Self::width).
    pub fn component_names(&self) -> Vec<String> {
        match self.kind {
            CovariateKind::Continuous | CovariateKind::Binary => vec![self.name.clone()],
            CovariateKind::Categorical => self
                .ordered_levels()
                .into_iter()
                .take(self.levels.len() - 1)
                .map(|k| self.levels[k].clone())
                .collect(),
        }
    }
}

/// Value of one covariate for one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Real(f64),
    Bit(bool),
    /// Index into the declared `levels`.
    Level(usize),
}

impl CovariateValue {
    fn check(&self, spec: &CovariateSpec) -> Result<()> {
        match (self, spec.kind) {
            (CovariateValue::Real(v), CovariateKind::Continuous) if v.is_finite() => Ok(()),
            (CovariateValue::Bit(_), CovariateKind::Binary) => Ok(()),
            (CovariateValue::Level(k), CovariateKind::Categorical) if *k < spec.levels.len() => {
                Ok(())
            }
            _ => Err(Error::Ingest(format!(
                "value {self:?} is not valid for covariate '{}'",
                spec.name
            ))),
        }
    }

    fn render(&self, spec: &CovariateSpec) -> String {
        match self {
            CovariateValue::Real(v) => v.to_string(),
            CovariateValue::Bit(b) => u8::from(*b).to_string(),
            CovariateValue::Level(k) => spec.levels[*k].clone(),
        }
    }
}

/// One observed unit. `covariates` is aligned with the owning dataset's spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    pub forcing: f64,
    pub applied: bool,
    pub received: bool,
    pub outcome: bool,
    pub covariates: Vec<CovariateValue>,
}

/// Latent principal stratum defined by the pair of potential application
/// statuses. Defiant applicants are excluded by monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// Always-applicants, (A(0), A(1)) = (1, 1).
    AA,
    /// Compliant-applicants, (0, 1).
    CA,
    /// Never-applicants, (0, 0).
    NA,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::AA, Stratum::CA, Stratum::NA];

    /// Potential application status under eligibility `z`.
    pub fn applies(self, z: bool) -> bool {
        match self {
            Stratum::AA => true,
            Stratum::CA => z,
            Stratum::NA => false,
        }
    }

    pub fn code(self) -> char {
        match self {
            Stratum::AA => 'A',
            Stratum::CA => 'C',
            Stratum::NA => 'N',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'A' => Some(Stratum::AA),
            'C' => Some(Stratum::CA),
            'N' => Some(Stratum::NA),
            _ => None,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stratum::AA => "AA",
            Stratum::CA => "CA",
            Stratum::NA => "NA",
        };
        f.write_str(s)
    }
}

/// One of the four observed (eligibility, application) cells and the strata
/// compatible with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedCell {
    pub z: bool,
    pub a_obs: bool,
    pub compatible: &'static [Stratum],
}

impl ObservedCell {
    pub fn is_ambiguous(&self) -> bool {
        self.compatible.len() > 1
    }

    pub fn admits(&self, g: Stratum) -> bool {
        self.compatible.contains(&g)
    }
}

/// Compatible strata for an observed (z, a) pair.
pub fn cell_of(z: bool, a_obs: bool) -> ObservedCell {
    let compatible: &'static [Stratum] = match (z, a_obs) {
        (false, true) => &[Stratum::AA],
        (false, false) => &[Stratum::CA, Stratum::NA],
        (true, false) => &[Stratum::NA],
        (true, true) => &[Stratum::AA, Stratum::CA],
    };
    ObservedCell {
        z,
        a_obs,
        compatible,
    }
}

/// Eligibility rule `Z = 1(S <= s0)`.
pub fn derive_eligibility(forcing: f64, threshold: f64) -> Result<bool> {
    if !forcing.is_finite() || !threshold.is_finite() {
        return Err(Error::Domain(format!(
            "eligibility needs finite inputs, got S={forcing}, s0={threshold}"
        )));
    }
    Ok(forcing <= threshold)
}

/// `(S - s0) / scale`.
pub fn standardize_forcing(forcing: f64, threshold: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!(
            "forcing scale must be positive, got {scale}"
        )));
    }
    Ok((forcing - threshold) / scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    spec: Vec<CovariateSpec>,
    units: Vec<UnitRecord>,
    threshold: f64,
    scale: f64,
}

impl Dataset {
    /// Builds a dataset, validating every unit against the design rules.
    pub fn new(
        spec: Vec<CovariateSpec>,
        units: Vec<UnitRecord>,
        threshold: f64,
        scale: f64,
    ) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold must be finite, got {threshold}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "forcing scale must be positive, got {scale}"
            )));
        }
        let mut names = HashSet::new();
        for s in &spec {
            s.validate()?;
            if REQUIRED_COLUMNS.contains(&s.name.as_str()) {
                return Err(Error::Config(format!(
                    "covariate name '{}' is reserved",
                    s.name
                )));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate covariate '{}'", s.name)));
            }
        }
        let mut ids = HashSet::new();
        for (row, u) in units.iter().enumerate() {
            let row = row + 1;
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Ingest(format!(
                    "duplicate unit id '{}', row {row}",
                    u.id
                )));
            }
            check_design(u, threshold, row)?;
            if u.covariates.len() != spec.len() {
                return Err(Error::Ingest(format!(
                    "unit '{}' has {} covariates, expected {}, row {row}",
                    u.id,
                    u.covariates.len(),
                    spec.len()
                )));
            }
            for (v, s) in u.covariates.iter().zip(&spec) {
                v.check(s)
                    .map_err(|e| Error::Ingest(format!("{e}, row {row}")))?;
            }
        }
        Ok(Self {
            spec,
            units,
            threshold,
            scale,
        })
    }

    pub fn spec(&self) -> &[CovariateSpec] {
        &self.spec
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Eligibility of unit `i`.
    pub fn z(&self, i: usize) -> bool {
        self.units[i].forcing <= self.threshold
    }

    /// Standardized forcing `S*` of unit `i`.
    pub fn sstar(&self, i: usize) -> f64 {
        (self.units[i].forcing - self.threshold) / self.scale
    }

    pub fn cell(&self, i: usize) -> ObservedCell {
        cell_of(self.z(i), self.units[i].applied)
    }

    /// Number of (ineligible, eligible) units.
    pub fn arm_sizes(&self) -> (usize, usize) {
        let n1 = (0..self.len()).filter(|&i| self.z(i)).count();
        (self.len() - n1, n1)
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.spec
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Lookup {
                kind: "covariate",
                name: name.to_string(),
            })
    }

    /// Largest `|S - s0|` in the data, a finite stand-in for an infinite window.
    pub fn max_distance(&self) -> f64 {
        self.units
            .iter()
            .map(|u| (u.forcing - self.threshold).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the dataset in the ingestion CSV layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
        header.extend(self.spec.iter().map(|s| s.name.as_str()));
        w.write_record(&header)?;
        for u in &self.units {
            let mut rec = vec![
                u.id.clone(),
                u.forcing.to_string(),
                u8::from(u.applied).to_string(),
                u8::from(u.received).to_string(),
                u8::from(u.outcome).to_string(),
            ];
            rec.extend(
                u.covariates
                    .iter()
                    .zip(&self.spec)
                    .map(|(v, s)| v.render(s)),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_design(u: &UnitRecord, threshold: f64, row: usize) -> Result<()> {
    if !u.forcing.is_finite() {
        return Err(Error::Ingest(format!(
            "non-finite forcing value, row {row}, field S"
        )));
    }
    let z = u.forcing <= threshold;
    if u.received && !u.applied {
        return Err(Error::Ingest(format!(
            "receipt without application, row {row}, field W"
        )));
    }
    if u.received && !z {
        return Err(Error::Ingest(format!(
            "receipt while ineligible, row {row}, field W"
        )));
    }
    if z && u.applied && !u.received {
        return Err(Error::Ingest(format!(
            "eligible applicant without receipt, row {row}, field W"
        )));
    }
    Ok(())
}

/// Units with `|S - s0| <= h`, order preserved.
pub fn filter_bandwidth(dataset: &Dataset, h: f64) -> Result<Dataset> {
    if !(h > 0.0) || h.is_nan() {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let units = dataset
        .units
        .iter()
        .filter(|u| (u.forcing - dataset.threshold).abs() <= h)
        .cloned()
        .collect();
    Ok(Dataset {
        spec: dataset.spec.clone(),
        units,
        threshold: dataset.threshold,
        scale: dataset.scale,
    })
}

/// Reads a CSV file with columns `id,S,A,W,Y,<covariates...>` in any order.
pub fn load_dataset(path: &Path, spec: &[CovariateSpec], threshold: f64) -> Result<Dataset> {
    load_dataset_with_scale(path, spec, threshold, DEFAULT_SCALE)
}

pub fn load_dataset_with_scale(
    path: &Path,
    spec: &[CovariateSpec],
    threshold: f64,
    scale: f64,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, spec, threshold, scale)
}

/// Parses a dataset from any CSV reader. Lines starting with `#` are skipped.
pub fn read_dataset<R: Read>(
    reader: R,
    spec: &[CovariateSpec],
    threshold: f64,
    scale: f64,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingest(format!("missing column '{name}'")))
    };
    let [c_id, c_s, c_a, c_w, c_y] = [find("id")?, find("S")?, find("A")?, find("W")?, find("Y")?];
    let cov_cols = spec
        .iter()
        .map(|s| find(&s.name))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let field = |col: usize, name: &str| -> Result<&str> {
            match rec.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Ingest(format!(
                    "missing value, row {row}, field {name}"
                ))),
            }
        };
        let bit = |col: usize, name: &str| -> Result<bool> {
            match field(col, name)? {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Ingest(format!(
                    "expected 0 or 1, got '{other}', row {row}, field {name}"
                ))),
            }
        };
        let forcing_raw = field(c_s, "S")?;
        let forcing: f64 = forcing_raw.parse().map_err(|_| {
            Error::Ingest(format!(
                "unparseable number '{forcing_raw}', row {row}, field S"
            ))
        })?;
        let mut covariates = Vec::with_capacity(spec.len());
        for (s, &col) in spec.iter().zip(&cov_cols) {
            let raw = field(col, &s.name)?;
            let v = match s.kind {
                CovariateKind::Continuous => {
                    let v: f64 = raw.parse().map_err(|_| {
                        Error::Ingest(format!(
                            "unparseable number '{raw}', row {row}, field {}",
                            s.name
                        ))
                    })?;
                    CovariateValue::Real(v)
                }
                CovariateKind::Binary => CovariateValue::Bit(bit(col, &s.name)?),
                CovariateKind::Categorical => {
                    let k = s.levels.iter().position(|l| l == raw).ok_or_else(|| {
                        Error::Ingest(format!(
                            "undeclared level '{raw}', row {row}, field {}",
                            s.name
                        ))
                    })?;
                    CovariateValue::Level(k)
                }
            };
            covariates.push(v);
        }
        let unit = UnitRecord {
            id: field(c_id, "id")?.to_string(),
            forcing,
            applied: bit(c_a, "A")?,
            received: bit(c_w, "W")?,
            outcome: bit(c_y, "Y")?,
            covariates,
        };
        check_design(&unit, threshold, row)?;
        units.push(unit);
    }
    Dataset::new(spec.to_vec(), units, threshold, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(id: &str, s: f64, a: bool, w: bool, y: bool) -> UnitRecord {
        UnitRecord {
            id: id.into(),
            forcing: s,
            applied: a,
            received: w,
            outcome: y,
            covariates: vec![],
        }
    }

    #[test]
    fn eligibility_is_inclusive_at_threshold() {
        assert!(derive_eligibility(15000.0, 15000.0).unwrap());
        assert!(!derive_eligibility(15000.01, 15000.0).unwrap());
        assert!(derive_eligibility(14000.0, 15000.0).unwrap());
        assert!(derive_eligibility(f64::NAN, 15000.0).is_err());
        assert!(derive_eligibility(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn standardized_forcing() {
        assert_eq!(standardize_forcing(15000.0, 15000.0, 1000.0).unwrap(), 0.0);
        assert_eq!(standardize_forcing(14500.0, 15000.0, 1000.0).unwrap(), -0.5);
        assert_eq!(standardize_forcing(16000.0, 15000.0, 1000.0).unwrap(), 1.0);
        assert!(matches!(
            standardize_forcing(1.0, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            standardize_forcing(1.0, 0.0, -2.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bandwidth_window() {
        let d = Dataset::new(
            vec![],
            vec![
                unit("a", 14200.0, false, false, false),
                unit("b", 15900.0, false, false, true),
                unit("c", 15400.0, true, false, false),
            ],
            15000.0,
            DEFAULT_SCALE,
        )
        .unwrap();
        let f = filter_bandwidth(&d, 500.0).unwrap();
        assert_eq!(
            f.units().iter().map(|u| u.id.as_str()).collect::<Vec<_>>(),
            ["c"]
        );
        assert_eq!(filter_bandwidth(&d, d.max_distance()).unwrap(), d);
        assert!(filter_bandwidth(&d, 0.0).is_err());
        assert!(filter_bandwidth(&d, -1.0).is_err());
        assert!(filter_bandwidth(&d, 1.0).unwrap().is_empty());
    }

    #[test]
    fn cells_partition_strata() {
        assert_eq!(cell_of(false, true).compatible, &[Stratum::AA]);
        assert_eq!(cell_of(true, false).compatible, &[Stratum::NA]);
        assert_eq!(cell_of(true, true).compatible, &[Stratum::AA, Stratum::CA]);
        assert_eq!(
            cell_of(false, false).compatible,
            &[Stratum::CA, Stratum::NA]
        );
        // Every stratum appears in exactly one cell per arm.
        for z in [false, true] {
            for g in Stratum::ALL {
                let hits = [false, true]
                    .iter()
                    .filter(|&&a| cell_of(z, a).admits(g))
                    .count();
                assert_eq!(hits, 1);
                assert!(cell_of(z, g.applies(z)).admits(g));
            }
        }
    }

    const SPEC_CSV: &str = "id,S,A,W,Y,sex,hs\n\
        u1,14000,1,1,0,1,sci\n\
        u2,16000,1,0,1,0,hum\n\
        u3,15000,0,0,0,1,other\n\
        u4,15500,0,0,1,0,tech\n";

    fn spec() -> Vec<CovariateSpec> {
        vec![
            CovariateSpec::binary("sex"),
            CovariateSpec::categorical("hs", ["hum", "sci", "tech", "other"], "other"),
        ]
    }

    #[test]
    fn reads_valid_csv() {
        let d = read_dataset(SPEC_CSV.as_bytes(), &spec(), 15000.0, 1000.0).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.units()[0].covariates[1], CovariateValue::Level(1));
        assert!(d.z(2));
        assert_eq!(d.arm_sizes(), (2, 2));
    }

    #[test]
    fn column_order_is_free() {
        let csv = "Y,hs,id,W,sex,A,S\n0,sci,u1,1,1,1,14000\n";
        let d = read_dataset(csv.as_bytes(), &spec(), 15000.0, 1000.0).unwrap();
        assert_eq!(d.units()[0].id, "u1");
        assert!(d.units()[0].received);
    }

    #[test]
    fn ingestion_errors_name_row_and_field() {
        let bad = "id,S,A,W,Y,sex,hs\nu1,14000,1,1,0,1,sci\nu2,14000,0,1,0,1,sci\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(
            err.to_string()
                .contains("receipt without application, row 2"),
            "{err}"
        );

        let bad = "id,S,A,W,Y,sex,hs\nu1,16000,1,1,0,1,sci\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(err.to_string().contains("ineligible, row 1"), "{err}");

        let bad = "id,S,A,W,Y,sex,hs\nu1,14000,0,0,0,1,arts\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(err.to_string().contains("'arts'"), "{err}");

        let bad = "id,S,A,W,Y,sex\nu1,14000,0,0,0,1\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(err.to_string().contains("missing column 'hs'"), "{err}");

        let bad = "id,S,A,W,Y,sex,hs\nu1,14k,0,0,0,1,sci\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(err.to_string().contains("field S"), "{err}");

        let bad = "id,S,A,W,Y,sex,hs\nu1,14000,0,0,0,,sci\n";
        let err = read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).unwrap_err();
        assert!(
            err.to_string().contains("missing value, row 1, field sex"),
            "{err}"
        );

        let bad = "id,S,A,W,Y,sex,hs\nu1,14000,0,0,0,1,sci\nu1,14000,0,0,0,1,sci\n";
        assert!(read_dataset(bad.as_bytes(), &spec(), 15000.0, 1000.0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let d = read_dataset(SPEC_CSV.as_bytes(), &spec(), 15000.0, 1000.0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &spec(), 15000.0, 1000.0).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn spec_validation() {
        assert!(CovariateSpec::categorical("c", ["a", "b"], "a")
            .validate()
            .is_err());
        assert!(CovariateSpec::categorical("c", ["a", "b", "a"], "a")
            .validate()
            .is_err());
        assert!(CovariateSpec::categorical("c", ["a", "b", "c"], "z")
            .validate()
            .is_err());
        let c = CovariateSpec::categorical("c", ["a", "base", "b"], "base");
        c.validate().unwrap();
        assert_eq!(c.ordered_levels(), vec![0, 2, 1]);
        assert_eq!(c.component_names(), vec!["a", "b"]);
    }

    proptest! {
        #[test]
        fn bandwidth_filter_is_idempotent_and_nested(
            forcing in proptest::collection::vec(10000.0f64..20000.0, 0..40),
            h1 in 1.0f64..5000.0,
            dh in 0.0f64..3000.0,
        ) {
            let units: Vec<_> = forcing
                .iter()
                .enumerate()
                .map(|(i, &s)| unit(&i.to_string(), s, false, false, false))
                .collect();
            let d = Dataset::new(vec![], units, 15000.0, DEFAULT_SCALE).unwrap();
            let f1 = filter_bandwidth(&d, h1).unwrap();
            prop_assert_eq!(&filter_bandwidth(&f1, h1).unwrap(), &f1);
            let f2 = filter_bandwidth(&d, h1 + dh).unwrap();
            let ids2: HashSet<_> = f2.units().iter().map(|u| u.id.clone()).collect();
            prop_assert!(f1.units().iter().all(|u| ids2.contains(&u.id)));
            for u in d.units() {
                let z = derive_eligibility(u.forcing, d.threshold()).unwrap();
                prop_assert!(u8::from(u.received) <= u8::from(u.applied) * u8::from(z));
            }
        }
    }
}
