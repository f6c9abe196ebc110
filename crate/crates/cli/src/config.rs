//! Experiment configuration: a JSON file mirroring the command-line flags,
//! with flags taking precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use gridmpc::cases;
use gridmpc::central::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use gridmpc::mpc::Solver;
use gridmpc::ocd::Timing;
use gridmpc::system::{parse_case, parse_timeseries, PowerSystem, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Solve,
    Partition,
    Compare,
    Mpc,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Partition => "partition",
            Mode::Compare => "compare",
            Mode::Mpc => "mpc",
        }
    }
}

/// Flags shared by every subcommand. Anything left unset falls back to the
/// config file, then to the per-mode default.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON file with the same keys as the flags (snake_case)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundled case name or path to a case JSON file
    #[arg(long)]
    pub case: Option<String>,
    /// Bundled series name or path to a series CSV
    #[arg(long)]
    pub series: Option<String>,
    /// Horizon length(s), comma separated
    #[arg(long, value_delimiter = ',')]
    pub horizon: Vec<usize>,
    /// centralized, ocd, ocd-c (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    /// sp, arbitrary, or a partition JSON path (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub partition: Vec<String>,
    /// Number of regions K for computed and committed partitions
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Interval at which the spectral partition is computed
    #[arg(long)]
    pub ref_interval: Option<usize>,
    /// First interval of the run
    #[arg(long)]
    pub start: Option<usize>,
    /// Number of receding-horizon steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// ops (deterministic, from operation counts) or wall
    #[arg(long)]
    pub timing: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<Mode>,
    case: Option<String>,
    series: Option<String>,
    horizon: Option<OneOrMany<usize>>,
    method: Option<OneOrMany<String>>,
    partition: Option<OneOrMany<String>>,
    regions: Option<usize>,
    seed: Option<u64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    ref_interval: Option<usize>,
    start: Option<usize>,
    steps: Option<usize>,
    timing: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionSource {
    /// Spectral partition computed at the reference interval.
    Computed,
    /// The committed baseline shipped with a bundled case.
    Committed,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub name: String,
    pub source: PartitionSource,
}

impl FromStr for PartitionSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sp" => PartitionSpec {
                name: "sp".into(),
                source: PartitionSource::Computed,
            },
            "arbitrary" => PartitionSpec {
                name: "arbitrary".into(),
                source: PartitionSource::Committed,
            },
            path => {
                let p = PathBuf::from(path);
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.to_string());
                PartitionSpec {
                    name,
                    source: PartitionSource::File(p),
                }
            }
        })
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Bundled case name or the case file path as given.
    pub case_path: String,
    pub series_path: String,
    pub horizons: Vec<usize>,
    pub methods: Vec<Solver>,
    pub partitions: Vec<PartitionSpec>,
    pub regions: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub ref_interval: usize,
    pub start: usize,
    pub steps: usize,
    pub timing: Timing,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn resolve(mode: Mode, flags: &Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str::<FileConfig>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        if let Some(m) = file.mode {
            if m != mode {
                bail!("config file is for `{}`, not `{}`", m.name(), mode.name());
            }
        }

        let case_path = flags
            .case
            .clone()
            .or(file.case)
            .unwrap_or_else(|| "case5_demo".into());
        let series_path = match flags.series.clone().or(file.series) {
            Some(s) => s,
            None if cases::bundled_case(&case_path).is_some() => case_path.clone(),
            None => bail!("a case file outside the bundled set needs --series"),
        };

        let horizons = pick(flags.horizon.clone(), file.horizon, vec![1]);
        let default_methods: &[&str] = match mode {
            Mode::Compare => &["centralized", "ocd-c"],
            _ => &["centralized"],
        };
        let methods = pick(
            flags.method.clone(),
            file.method,
            default_methods.iter().map(|s| s.to_string()).collect(),
        )
        .iter()
        .map(|m| m.parse::<Solver>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
        let partitions = pick(flags.partition.clone(), file.partition, vec!["sp".into()])
            .iter()
            .map(|p| p.parse::<PartitionSpec>().unwrap())
            .collect();
        let timing = match flags.timing.clone().or(file.timing) {
            Some(t) => t.parse::<Timing>().map_err(anyhow::Error::msg)?,
            None => Timing::Ops,
        };
        let default_steps = match mode {
            Mode::Mpc => 12,
            Mode::Compare => 10,
            _ => 1,
        };

        let cfg = ExperimentConfig {
            mode,
            case_path,
            series_path,
            horizons,
            methods,
            partitions,
            regions: flags.regions.or(file.regions).unwrap_or(2),
            seed: flags.seed.or(file.seed).unwrap_or(7),
            tol: flags.tol.or(file.tol).unwrap_or(DEFAULT_TOL),
            max_iter: flags.max_iter.or(file.max_iter).unwrap_or(DEFAULT_MAX_ITER),
            ref_interval: flags.ref_interval.or(file.ref_interval).unwrap_or(0),
            start: flags.start.or(file.start).unwrap_or(0),
            steps: flags.steps.or(file.steps).unwrap_or(default_steps),
            timing,
            output_dir: flags
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if cases::bundled_case(&self.case_path).is_none() && !Path::new(&self.case_path).exists() {
            bail!(
                "case `{}` is neither bundled ({}) nor an existing file",
                self.case_path,
                cases::CASE_NAMES.join(", ")
            );
        }
        if !is_bundled_series(&self.series_path) && !Path::new(&self.series_path).exists() {
            bail!("series `{}` does not exist", self.series_path);
        }
        if self.horizons.iter().any(|&n| n == 0) {
            bail!("horizons must be at least 1");
        }
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        if self.steps == 0 {
            bail!("the step budget must be at least 1");
        }
        if self.regions == 0 {
            bail!("the number of regions must be at least 1");
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            bail!("tolerance and iteration limit must be positive");
        }
        for p in &self.partitions {
            if let PartitionSource::File(path) = &p.source {
                if !path.exists() {
                    bail!("partition file {} does not exist", path.display());
                }
            }
        }
        Ok(())
    }

    pub fn load_system(&self) -> Result<PowerSystem> {
        if let Some(sys) = cases::bundled_case(&self.case_path) {
            return Ok(sys);
        }
        let text = std::fs::read_to_string(&self.case_path)
            .with_context(|| format!("reading case {}", self.case_path))?;
        parse_case(&text).with_context(|| format!("parsing case {}", self.case_path))
    }

    pub fn load_series(&self, system: &PowerSystem) -> Result<TimeSeries> {
        if self.series_path == "case5_valley_peak" {
            return Ok(cases::valley_peak_series());
        }
        if let Some(s) = cases::bundled_series(&self.series_path) {
            return Ok(s);
        }
        let text = std::fs::read_to_string(&self.series_path)
            .with_context(|| format!("reading series {}", self.series_path))?;
        parse_timeseries(&text, system)
            .with_context(|| format!("parsing series {}", self.series_path))
    }

    /// Name of the bundled case, if the case is one.
    pub fn bundled_name(&self) -> Option<&str> {
        cases::bundled_case(&self.case_path).map(|_| self.case_path.as_str())
    }
}

fn is_bundled_series(name: &str) -> bool {
    name == "case5_valley_peak" || cases::CASE_NAMES.contains(&name)
}

fn pick<T>(flag: Vec<T>, file: Option<OneOrMany<T>>, default: Vec<T>) -> Vec<T> {
    if !flag.is_empty() {
        flag
    } else {
        file.map(OneOrMany::into_vec).unwrap_or(default)
    }
}
