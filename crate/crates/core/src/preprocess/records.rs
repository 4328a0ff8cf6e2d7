//! Geology survey and excavation telemetry records, plus their CSV forms.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PreprocessError;

/// Per-ring geological survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeologyRecord {
    pub ring: u32,
    pub plasticity: String,
    pub density: String,
    /// Unconfined compressive strength, MPa.
    pub ucs: f64,
    /// Permeability coefficient, m/s.
    pub permeability: f64,
    pub rock_level: u8,
    pub layer_number: u32,
    pub accounting: f64,
    pub integrity_low: f64,
    pub integrity_high: f64,
    /// Standard penetration blow count.
    pub standard_penetration: f64,
}

impl GeologyRecord {
    /// Names of the numeric features in [`GeologyRecord::numeric_features`] order.
    pub const NUMERIC_FEATURES: [&'static str; 8] = [
        "ucs",
        "permeability",
        "rock_level",
        "layer_number",
        "accounting",
        "integrity_low",
        "integrity_high",
        "standard_penetration",
    ];

    pub fn numeric_features(&self) -> [f64; 8] {
        [
            self.ucs,
            self.permeability,
            f64::from(self.rock_level),
            f64::from(self.layer_number),
            self.accounting,
            self.integrity_low,
            self.integrity_high,
            self.standard_penetration,
        ]
    }

    /// Text fed to the word embedding: plasticity followed by density.
    pub fn text_tokens(&self) -> Vec<String> {
        let mut t = tokenize(&self.plasticity);
        t.extend(tokenize(&self.density));
        t
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |what: &str| {
            Err(PreprocessError::InvalidRecord(format!(
                "ring {}: {what}",
                self.ring
            )))
        };
        if self.integrity_low > self.integrity_high {
            return bad("integrity_low > integrity_high");
        }
        if !(0.0..=1.0).contains(&self.accounting) {
            return bad("accounting outside [0, 1]");
        }
        if self.ucs < 0.0 || self.standard_penetration < 0.0 {
            return bad("negative ucs or standard penetration");
        }
        Ok(())
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Operating phase of the machine within a ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Rising,
    Stable,
    Assembly,
    Maintenance,
    Stopped,
}

impl Phase {
    pub fn is_operating(self) -> bool {
        self == Phase::Stable
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Phase {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "rising" => Phase::Rising,
            "stable" => Phase::Stable,
            "assembly" => Phase::Assembly,
            "maintenance" => Phase::Maintenance,
            "stopped" => Phase::Stopped,
            _ => {
                return Err(PreprocessError::InvalidRecord(format!(
                    "unknown phase `{s}`"
                )))
            }
        })
    }
}

/// Numeric excavation telemetry channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    PropulsionSpeed,
    CutterSpeed,
    CutterTorque,
    TotalPropulsion,
    CutterPower,
    Displacement,
    PropulsionPressure,
    PropulsionThrust,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Channel::PropulsionSpeed,
        Channel::CutterSpeed,
        Channel::CutterTorque,
        Channel::TotalPropulsion,
        Channel::CutterPower,
        Channel::Displacement,
        Channel::PropulsionPressure,
        Channel::PropulsionThrust,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::PropulsionSpeed => "propulsion_speed",
            Channel::CutterSpeed => "cutter_speed",
            Channel::CutterTorque => "cutter_torque",
            Channel::TotalPropulsion => "total_propulsion",
            Channel::CutterPower => "cutter_power",
            Channel::Displacement => "displacement",
            Channel::PropulsionPressure => "propulsion_pressure",
            Channel::PropulsionThrust => "propulsion_thrust",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Channel {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| PreprocessError::InvalidRecord(format!("unknown channel `{s}`")))
    }
}

/// One telemetry sample. Missing readings are stored as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcavationRecord {
    pub timestamp: i64,
    pub ring: u32,
    /// mm/min; the rate prediction target.
    pub propulsion_speed: f64,
    /// rpm
    pub cutter_speed: f64,
    /// kN·m
    pub cutter_torque: f64,
    /// kN
    pub total_propulsion: f64,
    /// kW
    pub cutter_power: f64,
    /// mm
    pub displacement: f64,
    /// bar
    pub propulsion_pressure: f64,
    /// kN
    pub propulsion_thrust: f64,
    pub phase: Phase,
}

impl ExcavationRecord {
    pub fn channel(&self, c: Channel) -> f64 {
        match c {
            Channel::PropulsionSpeed => self.propulsion_speed,
            Channel::CutterSpeed => self.cutter_speed,
            Channel::CutterTorque => self.cutter_torque,
            Channel::TotalPropulsion => self.total_propulsion,
            Channel::CutterPower => self.cutter_power,
            Channel::Displacement => self.displacement,
            Channel::PropulsionPressure => self.propulsion_pressure,
            Channel::PropulsionThrust => self.propulsion_thrust,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut f64 {
        match c {
            Channel::PropulsionSpeed => &mut self.propulsion_speed,
            Channel::CutterSpeed => &mut self.cutter_speed,
            Channel::CutterTorque => &mut self.cutter_torque,
            Channel::TotalPropulsion => &mut self.total_propulsion,
            Channel::CutterPower => &mut self.cutter_power,
            Channel::Displacement => &mut self.displacement,
            Channel::PropulsionPressure => &mut self.propulsion_pressure,
            Channel::PropulsionThrust => &mut self.propulsion_thrust,
        }
    }

    pub fn channels(&self) -> [f64; 8] {
        Channel::ALL.map(|c| self.channel(c))
    }
}

pub const GEOLOGY_COLUMNS: [&str; 10] = [
    "ring",
    "plasticity",
    "density",
    "unconfined_compressive_strength",
    "permeability_coefficient",
    "surrounding_rock_level",
    "layer_number",
    "accounting",
    "integrity_factor",
    "standard_penetration",
];

pub const EXCAVATION_COLUMNS: [&str; 11] = [
    "timestamp",
    "ring",
    "propulsion_speed",
    "cutter_speed",
    "cutter_torque",
    "total_propulsion",
    "cutter_power",
    "displacement",
    "propulsion_pressure",
    "propulsion_thrust",
    "phase",
];

/// Parses integrity-factor text such as `"0.36 to 0.51"`; a single number
/// gives a degenerate range.
pub fn parse_integrity(text: &str) -> Result<(f64, f64), PreprocessError> {
    let err = || PreprocessError::InvalidRecord(format!("bad integrity factor `{text}`"));
    let parts: Vec<&str> = text.split(" to ").map(str::trim).collect();
    match parts.as_slice() {
        [one] => {
            let v = one.parse().map_err(|_| err())?;
            Ok((v, v))
        }
        [lo, hi] => Ok((lo.parse().map_err(|_| err())?, hi.parse().map_err(|_| err())?)),
        _ => Err(err()),
    }
}

/// Formats a value so that parsing it back yields the same bits. NaN
/// becomes an empty cell.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn parse_f64(cell: &str, column: &str, line: u64) -> Result<f64, PreprocessError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse().map_err(|_| {
        PreprocessError::InvalidRecord(format!("line {line}: `{cell}` in column {column}"))
    })
}

fn parse_int<T: FromStr>(cell: &str, column: &str, line: u64) -> Result<T, PreprocessError> {
    cell.trim().parse().map_err(|_| {
        PreprocessError::InvalidRecord(format!("line {line}: `{cell}` in column {column}"))
    })
}

/// Maps required column names to their positions, failing on the first
/// one absent from the header.
fn column_positions(
    headers: &csv::StringRecord,
    required: &[&str],
) -> Result<Vec<usize>, PreprocessError> {
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| PreprocessError::MissingColumn(name.to_string()))
        })
        .collect()
}

pub fn read_geology<R: Read>(reader: R) -> Result<Vec<GeologyRecord>, PreprocessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let pos = column_positions(rdr.headers()?, &GEOLOGY_COLUMNS)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |i: usize| row.get(pos[i]).unwrap_or("");
        let (integrity_low, integrity_high) = parse_integrity(cell(8))?;
        let rec = GeologyRecord {
            ring: parse_int(cell(0), GEOLOGY_COLUMNS[0], line)?,
            plasticity: cell(1).trim().to_string(),
            density: cell(2).trim().to_string(),
            ucs: parse_f64(cell(3), GEOLOGY_COLUMNS[3], line)?,
            permeability: parse_f64(cell(4), GEOLOGY_COLUMNS[4], line)?,
            rock_level: parse_int(cell(5), GEOLOGY_COLUMNS[5], line)?,
            layer_number: parse_int(cell(6), GEOLOGY_COLUMNS[6], line)?,
            accounting: parse_f64(cell(7), GEOLOGY_COLUMNS[7], line)?,
            integrity_low,
            integrity_high,
            standard_penetration: parse_f64(cell(9), GEOLOGY_COLUMNS[9], line)?,
        };
        out.push(rec);
    }
    Ok(out)
}

pub fn write_geology<W: Write>(writer: W, records: &[GeologyRecord]) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GEOLOGY_COLUMNS)?;
    for r in records {
        w.write_record([
            r.ring.to_string(),
            r.plasticity.clone(),
            r.density.clone(),
            fmt_f64(r.ucs),
            fmt_f64(r.permeability),
            r.rock_level.to_string(),
            r.layer_number.to_string(),
            fmt_f64(r.accounting),
            format!("{} to {}", fmt_f64(r.integrity_low), fmt_f64(r.integrity_high)),
            fmt_f64(r.standard_penetration),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_excavation<R: Read>(reader: R) -> Result<Vec<ExcavationRecord>, PreprocessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let pos = column_positions(rdr.headers()?, &EXCAVATION_COLUMNS)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |i: usize| row.get(pos[i]).unwrap_or("");
        let num = |i: usize| parse_f64(cell(i), EXCAVATION_COLUMNS[i], line);
        out.push(ExcavationRecord {
            timestamp: parse_int(cell(0), EXCAVATION_COLUMNS[0], line)?,
            ring: parse_int(cell(1), EXCAVATION_COLUMNS[1], line)?,
            propulsion_speed: num(2)?,
            cutter_speed: num(3)?,
            cutter_torque: num(4)?,
            total_propulsion: num(5)?,
            cutter_power: num(6)?,
            displacement: num(7)?,
            propulsion_pressure: num(8)?,
            propulsion_thrust: num(9)?,
            phase: cell(10).parse()?,
        });
    }
    Ok(out)
}

pub fn write_excavation<W: Write>(
    writer: W,
    records: &[ExcavationRecord],
) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EXCAVATION_COLUMNS)?;
    for r in records {
        let mut row = vec![r.timestamp.to_string(), r.ring.to_string()];
        row.extend(r.channels().iter().map(|&v| fmt_f64(v)));
        row.push(r.phase.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
