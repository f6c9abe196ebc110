//! Synthetic cases shipped with the crate.
//!
//! Both networks are hand-made test systems: `case5_demo` is a small meshed
//! five-bus grid, `case14_like` reuses the well-known 14-bus topology (taps
//! dropped) with made-up cost, storage and wind data. Neither reproduces any
//! published dataset. Each case comes with a 144-interval (10-minute) day of
//! load scaling and wind; `case5_demo` also has a short valley-then-peak
//! series for horizon experiments.

use crate::partition::Partition;
use crate::system::{parse_case, parse_timeseries, PowerSystem, TimeSeries};

const CASE5_DEMO: &str = include_str!("../data/case5_demo.json");
const CASE14_LIKE: &str = include_str!("../data/case14_like.json");
const CASE5_SERIES: &str = include_str!("../data/case5_demo_series.csv");
const CASE14_SERIES: &str = include_str!("../data/case14_like_series.csv");
const CASE5_VALLEY_PEAK: &str = include_str!("../data/case5_valley_peak.csv");

// Hand-picked contiguous splits used as baselines; they are illustrative
// choices, not a reconstruction of any published partition.
const ARBITRARY: &[(&str, usize, &str)] = &[
    (
        "case5_demo",
        2,
        include_str!("../data/partitions/case5_demo_arbitrary_k2.json"),
    ),
    (
        "case5_demo",
        3,
        include_str!("../data/partitions/case5_demo_arbitrary_k3.json"),
    ),
    (
        "case14_like",
        2,
        include_str!("../data/partitions/case14_like_arbitrary_k2.json"),
    ),
    (
        "case14_like",
        3,
        include_str!("../data/partitions/case14_like_arbitrary_k3.json"),
    ),
];

/// Names accepted by [`bundled_case`].
pub const CASE_NAMES: &[&str] = &["case5_demo", "case14_like"];

pub fn case5_demo() -> PowerSystem {
    parse_case(CASE5_DEMO).expect("bundled case5_demo is valid")
}

pub fn case14_like() -> PowerSystem {
    parse_case(CASE14_LIKE).expect("bundled case14_like is valid")
}

/// Two electrically separate copies of `case5_demo`; the second has its bus
/// ids shifted by 10. Not loadable from a case file, which must be connected.
pub fn two_island_demo() -> PowerSystem {
    let a = case5_demo();
    let shift = 10;
    let mut buses = a.buses.clone();
    buses.extend(a.buses.iter().cloned().map(|mut b| {
        b.id += shift;
        b
    }));
    let mut branches = a.branches.clone();
    branches.extend(a.branches.iter().cloned().map(|mut l| {
        l.from_bus += shift;
        l.to_bus += shift;
        l
    }));
    let mut generators = a.generators.clone();
    generators.extend(a.generators.iter().cloned().map(|mut g| {
        g.bus += shift;
        g
    }));
    let mut storages = a.storages.clone();
    storages.extend(a.storages.iter().cloned().map(|mut s| {
        s.bus += shift;
        s
    }));
    let wind: Vec<usize> = a
        .wind_buses
        .iter()
        .copied()
        .chain(a.wind_buses.iter().map(|w| w + shift))
        .collect();
    PowerSystem::with_islands(a.base_mva, buses, branches, generators, storages, wind)
        .expect("two copies of a valid case form a valid system")
}

/// Look up a bundled case by name.
pub fn bundled_case(name: &str) -> Option<PowerSystem> {
    match name {
        "case5_demo" => Some(case5_demo()),
        "case14_like" => Some(case14_like()),
        _ => None,
    }
}

/// The day-long series bundled with the named case.
pub fn bundled_series(name: &str) -> Option<TimeSeries> {
    let (text, sys) = match name {
        "case5_demo" => (CASE5_SERIES, case5_demo()),
        "case14_like" => (CASE14_SERIES, case14_like()),
        _ => return None,
    };
    Some(parse_timeseries(text, &sys).expect("bundled series is valid"))
}

/// 24 intervals on `case5_demo`: six at 60 % load, six at 130 %, then back
/// to 60 %, so every horizon up to 12 can empty the storage inside the peak.
pub fn valley_peak_series() -> TimeSeries {
    parse_timeseries(CASE5_VALLEY_PEAK, &case5_demo()).expect("bundled series is valid")
}

/// The committed baseline partition of a bundled case into `k` regions.
pub fn arbitrary_partition(name: &str, k: usize) -> Option<Partition> {
    let (_, _, text) = ARBITRARY.iter().find(|(n, kk, _)| *n == name && *kk == k)?;
    let sys = bundled_case(name)?;
    Some(Partition::from_json(text, &sys).expect("bundled partition is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_data_parses() {
        for name in CASE_NAMES {
            let sys = bundled_case(name).unwrap();
            let series = bundled_series(name).unwrap();
            assert_eq!(series.len(), 144);
            assert!(sys.n_buses() >= 5);
        }
        assert_eq!(case14_like().n_buses(), 14);
        assert_eq!(valley_peak_series().len(), 24);
        assert!(bundled_case("case9").is_none());
    }

    #[test]
    fn arbitrary_partitions_cover_every_bus() {
        for name in CASE_NAMES {
            let sys = bundled_case(name).unwrap();
            for k in [2, 3] {
                let p = arbitrary_partition(name, k).unwrap();
                assert_eq!(p.k(), k);
                assert_eq!(p.assignments().len(), sys.n_buses());
            }
        }
        assert!(arbitrary_partition("case5_demo", 4).is_none());
    }

    #[test]
    fn bundled_storage_has_the_documented_round_trip_efficiency() {
        for name in CASE_NAMES {
            for s in &bundled_case(name).unwrap().storages {
                assert!((s.eta_c * s.eta_d - 0.95).abs() < 1e-12);
            }
        }
    }
}
