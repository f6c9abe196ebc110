//! Bus affinity from the Lagrangian Hessian and normalized spectral clustering.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::formulation::{KktSystem, VariableLayout};
use crate::system::PowerSystem;

const RESTARTS: u64 = 50;
const RESEEDS: u64 = 10;
const LLOYD_MAX_ITER: usize = 300;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("region count must be between 1 and {buses}, got {k}")]
    RegionCount { k: usize, buses: usize },
    #[error("k-means kept producing an empty cluster for K = {k}")]
    EmptyCluster { k: usize },
    #[error("region {region} has no buses")]
    EmptyRegion { region: usize },
    #[error("bus {bus} is not assigned to a region")]
    Unassigned { bus: usize },
    #[error("bus {bus} is not part of the system")]
    UnknownBus { bus: usize },
    #[error("region {region} of bus {bus} is out of range for K = {k}")]
    RegionOutOfRange { bus: usize, region: usize, k: usize },
    #[error("invalid partition document: {0}")]
    Json(String),
}

/// Symmetric bus-to-bus affinity; the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub a: DMatrix<f64>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// CSV with a header row of bus ids.
    pub fn to_csv(&self, system: &PowerSystem) -> String {
        let mut out = String::from("bus");
        for b in &system.buses {
            out.push_str(&format!(",{}", b.id));
        }
        out.push('\n');
        for (m, b) in system.buses.iter().enumerate() {
            out.push_str(&b.id.to_string());
            for n in 0..self.n() {
                out.push_str(&format!(",{:e}", self.a[(m, n)]));
            }
            out.push('\n');
        }
        out
    }
}

/// `A[m][n] = Σ_{i∈S_m} Σ_{j∈S_n} |H_ij| + |Y_mn|` with a zeroed diagonal.
///
/// Only the upper triangle is accumulated and then mirrored, so the result
/// is exactly symmetric regardless of summation order.
pub fn compute_affinity(
    kkt: &KktSystem,
    admittance: &DMatrix<Complex64>,
    layout: &VariableLayout,
) -> AffinityMatrix {
    let nb = layout.n_bus;
    let mut a = DMatrix::zeros(nb, nb);
    for (i, j, v) in kkt.hessian.iter() {
        let (m, n) = (layout.bus_of(i), layout.bus_of(j));
        if m != n {
            a[(m.min(n), m.max(n))] += v.abs();
        }
    }
    for m in 0..nb {
        for n in m + 1..nb {
            // both (m, n) and (n, m) blocks of H were folded into the upper
            // triangle above; each contributes half of the symmetric pair
            let v = 0.5 * a[(m, n)] + admittance[(m, n)].norm();
            a[(m, n)] = v;
            a[(n, m)] = v;
        }
    }
    AffinityMatrix { a }
}

/// Assignment of every bus to one of `k` regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    /// Region per bus id.
    region_of: BTreeMap<usize, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDocument {
    #[serde(rename = "K")]
    k: usize,
    region_of: BTreeMap<String, usize>,
}

impl Partition {
    /// Validates the assignment against `system` and relabels regions in
    /// order of their smallest bus id.
    pub fn new(
        system: &PowerSystem,
        k: usize,
        region_of: BTreeMap<usize, usize>,
    ) -> Result<Self, PartitionError> {
        if k == 0 || k > system.n_buses() {
            return Err(PartitionError::RegionCount {
                k,
                buses: system.n_buses(),
            });
        }
        for (&bus, &region) in &region_of {
            if system.bus_index(bus).is_none() {
                return Err(PartitionError::UnknownBus { bus });
            }
            if region >= k {
                return Err(PartitionError::RegionOutOfRange { bus, region, k });
            }
        }
        for b in &system.buses {
            if !region_of.contains_key(&b.id) {
                return Err(PartitionError::Unassigned { bus: b.id });
            }
        }
        let mut relabel = vec![usize::MAX; k];
        let mut next = 0;
        for &r in region_of.values() {
            if relabel[r] == usize::MAX {
                relabel[r] = next;
                next += 1;
            }
        }
        if let Some(region) = relabel.iter().position(|&r| r == usize::MAX) {
            return Err(PartitionError::EmptyRegion { region });
        }
        let region_of = region_of
            .into_iter()
            .map(|(b, r)| (b, relabel[r]))
            .collect();
        Ok(Partition { k, region_of })
    }

    /// From labels indexed like `system.buses`.
    pub fn from_labels(
        system: &PowerSystem,
        k: usize,
        labels: &[usize],
    ) -> Result<Self, PartitionError> {
        let map = system
            .buses
            .iter()
            .zip(labels)
            .map(|(b, &r)| (b.id, r))
            .collect();
        Self::new(system, k, map)
    }

    /// Everything in one region.
    pub fn single(system: &PowerSystem) -> Self {
        Partition {
            k: 1,
            region_of: system.buses.iter().map(|b| (b.id, 0)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn region_of(&self, bus_id: usize) -> usize {
        self.region_of[&bus_id]
    }

    pub fn assignments(&self) -> &BTreeMap<usize, usize> {
        &self.region_of
    }

    /// Region per bus index of `system`.
    pub fn labels(&self, system: &PowerSystem) -> Vec<usize> {
        system.buses.iter().map(|b| self.region_of[&b.id]).collect()
    }

    /// Bus ids of each region.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (&b, &r) in &self.region_of {
            out[r].push(b);
        }
        out
    }

    /// `{"K": k, "region_of": {"<bus>": r, ...}}` with buses in numeric order.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = self
            .region_of
            .iter()
            .map(|(b, r)| format!("    \"{b}\": {r}"))
            .collect();
        format!(
            "{{\n  \"K\": {},\n  \"region_of\": {{\n{}\n  }}\n}}\n",
            self.k,
            body.join(",\n")
        )
    }

    pub fn from_json(text: &str, system: &PowerSystem) -> Result<Self, PartitionError> {
        let doc: PartitionDocument =
            serde_json::from_str(text).map_err(|e| PartitionError::Json(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (key, r) in doc.region_of {
            let bus = key
                .trim()
                .parse()
                .map_err(|_| PartitionError::Json(format!("bus key {key:?} is not an integer")))?;
            map.insert(bus, r);
        }
        Self::new(system, doc.k, map)
    }
}

/// Branches crossing regions and their endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    /// Indices into `system.branches`.
    pub tie_lines: Vec<usize>,
    /// Bus ids.
    pub boundary_buses: BTreeSet<usize>,
}

pub fn derive_boundary(partition: &Partition, system: &PowerSystem) -> Boundary {
    let mut tie_lines = Vec::new();
    let mut boundary_buses = BTreeSet::new();
    for (k, br) in system.branches.iter().enumerate() {
        if partition.region_of(br.from_bus) != partition.region_of(br.to_bus) {
            tie_lines.push(k);
            boundary_buses.insert(br.from_bus);
            boundary_buses.insert(br.to_bus);
        }
    }
    Boundary {
        tie_lines,
        boundary_buses,
    }
}

/// Normalized spectral clustering of the buses into `k` regions.
pub fn spectral_partition(
    affinity: &AffinityMatrix,
    system: &PowerSystem,
    k: usize,
    seed: u64,
) -> Result<Partition, PartitionError> {
    if k == 1 {
        return Ok(Partition::single(system));
    }
    let labels = spectral_labels(&affinity.a, k, seed, Some(&system.admittance()))?;
    for (m, bus) in system.buses.iter().enumerate() {
        if affinity.a.row(m).sum() == 0.0 {
            log::warn!(
                "bus {} has no affinity to any other bus; placed in region {}",
                bus.id,
                labels[m]
            );
        }
    }
    Partition::from_labels(system, k, &labels)
}

/// Cluster labels per row of `a`.
///
/// Rows that sum to zero are left out of the embedding and attached
/// afterwards to the cluster of the row they share the largest `|Y|` with
/// (cluster 0 if none or if `y` is not given).
pub fn spectral_labels(
    a: &DMatrix<f64>,
    k: usize,
    seed: u64,
    y: Option<&DMatrix<Complex64>>,
) -> Result<Vec<usize>, PartitionError> {
    let nb = a.nrows();
    if k == 0 || k > nb {
        return Err(PartitionError::RegionCount { k, buses: nb });
    }
    if k == 1 {
        return Ok(vec![0; nb]);
    }
    let degree: Vec<f64> = (0..nb).map(|m| a.row(m).sum()).collect();
    let active: Vec<usize> = (0..nb).filter(|&m| degree[m] > 0.0).collect();
    if active.len() < k {
        return Err(PartitionError::RegionCount {
            k,
            buses: active.len(),
        });
    }
    let n = active.len();
    let scale: Vec<f64> = active.iter().map(|&m| 1.0 / degree[m].sqrt()).collect();
    let mut l = DMatrix::zeros(n, n);
    for (p, &m) in active.iter().enumerate() {
        for (q, &o) in active.iter().enumerate() {
            l[(p, q)] = scale[p] * a[(m, o)] * scale[q];
        }
    }
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let mut points = DMatrix::zeros(n, k);
    for (c, &e) in order.iter().take(k).enumerate() {
        points.set_column(c, &eig.eigenvectors.column(e));
    }
    for mut row in points.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let local = kmeans(&points, k, seed)?;

    let mut labels = vec![usize::MAX; nb];
    for (p, &m) in active.iter().enumerate() {
        labels[m] = local[p];
    }
    for m in 0..nb {
        if labels[m] == usize::MAX {
            let nearest = y.and_then(|y| {
                active
                    .iter()
                    .copied()
                    .filter(|&o| y[(m, o)].norm() > 0.0)
                    .max_by(|&p, &q| {
                        y[(m, p)]
                            .norm()
                            .total_cmp(&y[(m, q)].norm())
                            .then(q.cmp(&p))
                    })
            });
            labels[m] = nearest.map(|o| labels[o]).unwrap_or(0);
        }
    }
    Ok(labels)
}

fn sq_dist(points: &DMatrix<f64>, i: usize, center: &[f64]) -> f64 {
    center
        .iter()
        .enumerate()
        .map(|(c, v)| (points[(i, c)] - v).powi(2))
        .sum()
}

/// k-means++ seeding.
fn seed_centers(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let row = |i: usize| points.row(i).iter().copied().collect::<Vec<f64>>();
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd iterations; `None` if a cluster empties.
fn lloyd(points: &DMatrix<f64>, mut centers: Vec<Vec<f64>>) -> Option<(Vec<usize>, f64)> {
    let (n, dim) = points.shape();
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..LLOYD_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(points, i, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for c in 0..dim {
                sums[labels[i]][c] += points[(i, c)];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            for d in 0..dim {
                center[d] = sums[c][d] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(points, i, &centers[labels[i]]))
        .sum();
    Some((labels, inertia))
}

/// Best of several seeded k-means++ runs; ties keep the earlier restart.
fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>, PartitionError> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..RESTARTS {
        let outcome = (0..RESEEDS).find_map(|attempt| {
            let offset = restart + attempt * RESTARTS;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset));
            lloyd(points, seed_centers(points, k, &mut rng))
        });
        let Some((labels, inertia)) = outcome else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l)
        .ok_or(PartitionError::EmptyCluster { k })
}
