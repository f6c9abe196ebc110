//! Static network description and per-interval load/wind series.
//!
//! Case files are UTF-8 JSON with the top-level keys `base_mva`, `buses`,
//! `branches`, `generators`, `storages` and `wind_buses`. All electrical
//! quantities are per-unit on `base_mva`. Bus ids are positive integers; every
//! other record refers to buses by id. Internally buses are addressed by their
//! position in [`PowerSystem::buses`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{record}: {message}")]
    Semantic { record: String, message: String },
}

impl SystemError {
    fn semantic(record: impl Into<String>, message: impl Into<String>) -> Self {
        SystemError::Semantic {
            record: record.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Number {
        row: usize,
        column: String,
        value: String,
    },
    #[error("column `{column}` has {len} values but `load_scale` has {expected}")]
    LengthMismatch {
        column: String,
        len: usize,
        expected: usize,
    },
    #[error("column `{column}` has a gap at row {row}")]
    Gap { column: String, row: usize },
    #[error("row {row}: negative wind power {value} at bus {bus}")]
    NegativeWind { row: usize, bus: usize, value: f64 },
    #[error("row {row}: load scale must be positive, got {value}")]
    NonPositiveLoad { row: usize, value: f64 },
    #[error("unknown wind bus {0}")]
    UnknownWindBus(usize),
    #[error("missing wind column for wind bus {0}")]
    MissingWindColumn(usize),
    #[error("unknown bus {0} in per-bus load column")]
    UnknownLoadBus(usize),
    #[error("row {row}: minute stride {stride} differs from interval {interval}")]
    Stride {
        row: usize,
        stride: i64,
        interval: i64,
    },
    #[error("series is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_load_base: f64,
    pub q_load_base: f64,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_sh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<f64>,
}

impl Branch {
    /// Series admittance `1 / (r + jx)`.
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl Generator {
    pub fn cost(&self, p: f64) -> f64 {
        self.a * p * p + self.b * p + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageDevice {
    pub bus: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub e_init: f64,
    pub p_in_max: f64,
    pub p_out_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub eps_sbl: f64,
}

impl StorageDevice {
    /// Energy after one interval from `e` with the given charge/discharge powers.
    pub fn advance(&self, e: f64, p_in: f64, p_out: f64) -> f64 {
        e + self.eta_c * p_in - p_out / self.eta_d - self.eps_sbl
    }
}

/// Raw document shape, used for (de)serialization only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDocument {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
    #[serde(default)]
    storages: Vec<StorageDevice>,
    #[serde(default)]
    wind_buses: Vec<usize>,
}

/// Validated, immutable power system.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSystem {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub storages: Vec<StorageDevice>,
    pub wind_buses: BTreeSet<usize>,
    index: HashMap<usize, usize>,
}

impl PowerSystem {
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        storages: Vec<StorageDevice>,
        wind_buses: impl IntoIterator<Item = usize>,
    ) -> Result<Self, SystemError> {
        Self::build(
            base_mva, buses, branches, generators, storages, wind_buses, false,
        )
    }

    /// Like [`PowerSystem::new`] but accepts a network made of several
    /// electrically separate islands, each with exactly one slack bus.
    pub fn with_islands(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        storages: Vec<StorageDevice>,
        wind_buses: impl IntoIterator<Item = usize>,
    ) -> Result<Self, SystemError> {
        Self::build(
            base_mva, buses, branches, generators, storages, wind_buses, true,
        )
    }

    fn build(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        storages: Vec<StorageDevice>,
        wind_buses: impl IntoIterator<Item = usize>,
        islands: bool,
    ) -> Result<Self, SystemError> {
        let mut index = HashMap::new();
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(SystemError::semantic(
                    format!("bus {}", bus.id),
                    "duplicate bus id",
                ));
            }
        }
        let system = PowerSystem {
            base_mva,
            buses,
            branches,
            generators,
            storages,
            wind_buses: wind_buses.into_iter().collect(),
            index,
        };
        system.validate(islands)?;
        Ok(system)
    }

    fn validate(&self, islands: bool) -> Result<(), SystemError> {
        if !(self.base_mva > 0.0) {
            return Err(SystemError::semantic("base_mva", "must be positive"));
        }
        if self.buses.is_empty() {
            return Err(SystemError::semantic("buses", "at least one bus required"));
        }
        let mut slack = None;
        for bus in &self.buses {
            let rec = format!("bus {}", bus.id);
            if bus.id == 0 {
                return Err(SystemError::semantic(rec, "bus ids are 1-based"));
            }
            if !(bus.v_min <= bus.v_max) || bus.v_min <= 0.0 {
                return Err(SystemError::semantic(rec, "require 0 < v_min <= v_max"));
            }
            if let Some(v) = bus.v_set {
                if v < bus.v_min || v > bus.v_max {
                    return Err(SystemError::semantic(rec, "v_set outside [v_min, v_max]"));
                }
            }
            match bus.kind {
                BusKind::Slack => {
                    if let (Some(first), false) = (slack, islands) {
                        return Err(SystemError::semantic(
                            rec,
                            format!("duplicate slack (bus {first} is already slack)"),
                        ));
                    }
                    slack = Some(bus.id);
                    if bus.v_set.is_none() {
                        return Err(SystemError::semantic(rec, "slack bus requires v_set"));
                    }
                }
                BusKind::Generator => {
                    if bus.v_set.is_none() {
                        return Err(SystemError::semantic(rec, "generator bus requires v_set"));
                    }
                }
                BusKind::Load => {}
            }
        }
        if slack.is_none() {
            return Err(SystemError::semantic("buses", "no slack bus"));
        }
        for (k, br) in self.branches.iter().enumerate() {
            let rec = format!("branch {} ({}-{})", k + 1, br.from_bus, br.to_bus);
            for end in [br.from_bus, br.to_bus] {
                if !self.index.contains_key(&end) {
                    return Err(SystemError::semantic(rec, format!("unknown bus {end}")));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(SystemError::semantic(rec, "from_bus equals to_bus"));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(SystemError::semantic(rec, "zero series impedance"));
            }
            if let Some(i) = br.i_max {
                if !(i > 0.0) {
                    return Err(SystemError::semantic(rec, "i_max must be positive"));
                }
            }
        }
        for (k, g) in self.generators.iter().enumerate() {
            let rec = format!("generator {} (bus {})", k + 1, g.bus);
            if !self.index.contains_key(&g.bus) {
                return Err(SystemError::semantic(rec, format!("unknown bus {}", g.bus)));
            }
            if g.a < 0.0 {
                return Err(SystemError::semantic(
                    rec,
                    "cost coefficient a must be >= 0",
                ));
            }
            if !(g.p_min <= g.p_max) || !(g.q_min <= g.q_max) {
                return Err(SystemError::semantic(rec, "inverted output bounds"));
            }
        }
        for (k, s) in self.storages.iter().enumerate() {
            let rec = format!("storage {} (bus {})", k + 1, s.bus);
            if !self.index.contains_key(&s.bus) {
                return Err(SystemError::semantic(rec, format!("unknown bus {}", s.bus)));
            }
            if !(s.e_min <= s.e_init && s.e_init <= s.e_max) {
                return Err(SystemError::semantic(
                    rec,
                    "require e_min <= e_init <= e_max",
                ));
            }
            let eta = s.eta_c * s.eta_d;
            if !(s.eta_c > 0.0 && s.eta_d > 0.0 && eta <= 1.0) {
                return Err(SystemError::semantic(
                    rec,
                    "efficiencies must satisfy 0 < eta_c*eta_d <= 1",
                ));
            }
            if s.eps_sbl < 0.0 || s.p_in_max < 0.0 || s.p_out_max < 0.0 {
                return Err(SystemError::semantic(rec, "negative loss or power limit"));
            }
        }
        for &w in &self.wind_buses {
            if !self.index.contains_key(&w) {
                return Err(SystemError::semantic(
                    format!("wind bus {w}"),
                    format!("unknown bus {w}"),
                ));
            }
        }
        let comps = self.connected_components();
        if islands {
            for comp in &comps {
                let n_slack = comp
                    .iter()
                    .filter(|&&b| self.buses[b].kind == BusKind::Slack)
                    .count();
                if n_slack != 1 {
                    return Err(SystemError::semantic(
                        format!("bus {}", self.buses[comp[0]].id),
                        format!("island has {n_slack} slack buses, expected 1"),
                    ));
                }
            }
        } else if comps.len() > 1 {
            let stray = &comps[1];
            return Err(SystemError::semantic(
                format!("bus {}", self.buses[stray[0]].id),
                format!(
                    "network is disconnected ({} components; this bus is not reachable from bus {})",
                    comps.len(),
                    self.buses[comps[0][0]].id
                ),
            ));
        }
        Ok(())
    }

    /// Connected components of the branch graph as sorted lists of bus indices,
    /// ordered by smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.buses.len();
        let adj = self.neighbors();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of the bus with the given id.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub(crate) fn idx(&self, id: usize) -> usize {
        self.index[&id]
    }

    /// Indices of slack buses (one per island).
    pub fn slack_indices(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(k, _)| k)
            .collect()
    }

    /// Neighbor sets (Ω) by bus index.
    pub fn neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.buses.len()];
        for br in &self.branches {
            let (f, t) = (self.index[&br.from_bus], self.index[&br.to_bus]);
            adj[f].insert(t);
            adj[t].insert(f);
        }
        adj
    }

    /// Generators attached to each bus (Λ), by bus index.
    pub fn generators_at(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.buses.len()];
        for (g, gen) in self.generators.iter().enumerate() {
            out[self.index[&gen.bus]].push(g);
        }
        out
    }

    /// Bus admittance matrix under the π branch model.
    pub fn admittance(&self) -> DMatrix<Complex64> {
        let n = self.buses.len();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for br in &self.branches {
            let (f, t) = (self.index[&br.from_bus], self.index[&br.to_bus]);
            let ys = br.series_admittance();
            let half = Complex64::new(0.0, br.b_sh / 2.0);
            y[(f, f)] += ys + half;
            y[(t, t)] += ys + half;
            y[(f, t)] -= ys;
            y[(t, f)] -= ys;
        }
        y
    }

    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let doc: CaseDocument = serde_json::from_str(text).map_err(|e| SystemError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        PowerSystem::new(
            doc.base_mva,
            doc.buses,
            doc.branches,
            doc.generators,
            doc.storages,
            doc.wind_buses,
        )
    }

    pub fn to_json(&self) -> String {
        let doc = CaseDocument {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            generators: self.generators.clone(),
            storages: self.storages.clone(),
            wind_buses: self.wind_buses.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("case document serializes")
    }
}

/// Parse and validate a case document.
pub fn parse_case(text: &str) -> Result<PowerSystem, SystemError> {
    PowerSystem::from_json(text)
}

/// Per-interval load multipliers and wind injections.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub interval_minutes: u32,
    pub load_scale: Vec<f64>,
    /// Wind injection per wind bus id, p.u.
    pub wind_power: BTreeMap<usize, Vec<f64>>,
    /// Optional per-bus load multipliers overriding `load_scale`, keyed by bus id.
    pub bus_load_scale: BTreeMap<usize, Vec<f64>>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.load_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load_scale.is_empty()
    }

    /// Load multiplier for a bus id at interval `t`.
    pub fn scale_at(&self, bus_id: usize, t: usize) -> f64 {
        self.bus_load_scale
            .get(&bus_id)
            .map(|s| s[t])
            .unwrap_or(self.load_scale[t])
    }

    pub fn wind_at(&self, bus_id: usize, t: usize) -> f64 {
        self.wind_power.get(&bus_id).map(|w| w[t]).unwrap_or(0.0)
    }

    /// Constant load scale and zero wind for every wind bus of `system`.
    pub fn constant(system: &PowerSystem, len: usize, scale: f64) -> Self {
        TimeSeries {
            interval_minutes: 10,
            load_scale: vec![scale; len],
            wind_power: system
                .wind_buses
                .iter()
                .map(|&b| (b, vec![0.0; len]))
                .collect(),
            bus_load_scale: BTreeMap::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("minute,load_scale");
        for b in self.wind_power.keys() {
            out.push_str(&format!(",wind_{b}"));
        }
        for b in self.bus_load_scale.keys() {
            out.push_str(&format!(",load_{b}"));
        }
        out.push('\n');
        for t in 0..self.len() {
            out.push_str(&format!(
                "{},{}",
                t as u64 * self.interval_minutes as u64,
                self.load_scale[t]
            ));
            for w in self.wind_power.values() {
                out.push_str(&format!(",{}", w[t]));
            }
            for s in self.bus_load_scale.values() {
                out.push_str(&format!(",{}", s[t]));
            }
            out.push('\n');
        }
        out
    }
}

enum Column {
    Minute,
    LoadScale,
    Wind(usize),
    BusLoad(usize),
}

/// Parse a `minute,load_scale,wind_<bus>...` CSV document against `system`.
///
/// Optional `load_<bus>` columns override `load_scale` for that bus. A single
/// row defaults to a 10-minute interval.
pub fn parse_timeseries(text: &str, system: &PowerSystem) -> Result<TimeSeries, SeriesError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = Vec::with_capacity(headers.len());
    for (k, name) in headers.iter().enumerate() {
        let col = match name {
            "minute" if k == 0 => Column::Minute,
            "load_scale" if k == 1 => Column::LoadScale,
            other => {
                let parse_id = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| SeriesError::Header(format!("bad column `{other}`")))
                };
                if let Some(id) = other.strip_prefix("wind_") {
                    let id = parse_id(id)?;
                    if !system.wind_buses.contains(&id) {
                        return Err(SeriesError::UnknownWindBus(id));
                    }
                    Column::Wind(id)
                } else if let Some(id) = other.strip_prefix("load_") {
                    let id = parse_id(id)?;
                    if system.bus_index(id).is_none() {
                        return Err(SeriesError::UnknownLoadBus(id));
                    }
                    Column::BusLoad(id)
                } else {
                    return Err(SeriesError::Header(format!(
                        "expected `minute,load_scale,wind_<bus>...`, found `{other}` at position {}",
                        k + 1
                    )));
                }
            }
        };
        columns.push(col);
    }
    if columns.len() < 2 {
        return Err(SeriesError::Header(
            "expected `minute,load_scale` prefix".into(),
        ));
    }
    for &w in &system.wind_buses {
        if !columns
            .iter()
            .any(|c| matches!(c, Column::Wind(id) if *id == w))
        {
            return Err(SeriesError::MissingWindColumn(w));
        }
    }

    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (k, slot) in values.iter_mut().enumerate() {
            let cell = record.get(k).unwrap_or("");
            if cell.is_empty() {
                slot.push(None);
                continue;
            }
            let v = cell.parse::<f64>().map_err(|_| SeriesError::Number {
                row: row + 1,
                column: headers[k].to_string(),
                value: cell.to_string(),
            })?;
            slot.push(Some(v));
        }
    }
    // Each column must be a gap-free prefix; its length is the prefix length.
    let mut dense = Vec::with_capacity(columns.len());
    for (k, col) in values.into_iter().enumerate() {
        let len = col.iter().take_while(|v| v.is_some()).count();
        if let Some(row) = col[len..].iter().position(|v| v.is_some()) {
            return Err(SeriesError::Gap {
                column: headers[k].to_string(),
                row: len + row,
            });
        }
        dense.push(col.into_iter().flatten().collect::<Vec<f64>>());
    }
    let expected = dense[1].len();
    if expected == 0 {
        return Err(SeriesError::Empty);
    }
    for (k, col) in dense.iter().enumerate() {
        if col.len() != expected {
            return Err(SeriesError::LengthMismatch {
                column: headers[k].to_string(),
                len: col.len(),
                expected,
            });
        }
    }

    let minutes = &dense[0];
    let interval = if minutes.len() >= 2 {
        (minutes[1] - minutes[0]).round() as i64
    } else {
        10
    };
    if interval <= 0 {
        return Err(SeriesError::Stride {
            row: 2,
            stride: interval,
            interval: 10,
        });
    }
    for row in 1..minutes.len() {
        let stride = (minutes[row] - minutes[row - 1]).round() as i64;
        if stride != interval {
            return Err(SeriesError::Stride {
                row: row + 1,
                stride,
                interval,
            });
        }
    }

    let mut series = TimeSeries {
        interval_minutes: interval as u32,
        load_scale: Vec::new(),
        wind_power: BTreeMap::new(),
        bus_load_scale: BTreeMap::new(),
    };
    for (col, data) in columns.iter().zip(dense) {
        match *col {
            Column::Minute => {}
            Column::LoadScale => {
                if let Some((row, &value)) = data.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                    return Err(SeriesError::NonPositiveLoad {
                        row: row + 1,
                        value,
                    });
                }
                series.load_scale = data;
            }
            Column::Wind(bus) => {
                if let Some((row, &value)) = data.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                    return Err(SeriesError::NegativeWind {
                        row: row + 1,
                        bus,
                        value,
                    });
                }
                series.wind_power.insert(bus, data);
            }
            Column::BusLoad(bus) => {
                if let Some((row, &value)) = data.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                    return Err(SeriesError::NonPositiveLoad {
                        row: row + 1,
                        value,
                    });
                }
                series.bus_load_scale.insert(bus, data);
            }
        }
    }
    Ok(series)
}
