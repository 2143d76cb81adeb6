//! Proximity matrices and structured precision matrices for the spatial
//! (independent, ICAR, proper CAR, BYM) and cyclic monthly random effects.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::SparseSym;

#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error("region `{0}` is paired with itself")]
    SelfPair(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("regions without any neighbour: {0:?}")]
    IsolatedRegions(Vec<String>),
    #[error("proximity graph has {} components: {components:?}", components.len())]
    Disconnected { components: Vec<Vec<String>> },
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("distance between regions {0} and {1} must be positive")]
    NonPositiveDistance(usize, usize),
    #[error("proper CAR offset d must be positive, got {0}")]
    NonPositiveOffset(f64),
    #[error("cyclic random walk needs a period of at least 3, got {0}")]
    PeriodTooShort(usize),
    #[error("{file}: row {row}: {message}")]
    Parse {
        file: String,
        row: u64,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityKind {
    Neighbor,
    Distance,
}

/// Symmetric 0/1 adjacency over regions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMatrix {
    regions: Vec<String>,
    kind: ProximityKind,
    w: Vec<u8>,
}

impl ProximityMatrix {
    pub fn n(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn kind(&self) -> ProximityKind {
        self.kind
    }

    pub fn w(&self, i: usize, j: usize) -> u8 {
        self.w[i * self.n() + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(move |&j| self.w(i, j) == 1)
    }

    /// Neighbour counts `n_i`.
    pub fn counts(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.neighbors(i).count()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.n(), |i, j| self.w(i, j) as f64)
    }

    pub fn isolated(&self) -> Vec<String> {
        self.counts()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == 0)
            .map(|(i, _)| self.regions[i].clone())
            .collect()
    }

    /// Connected components, each listed by region id in index order.
    pub fn components(&self) -> Vec<Vec<String>> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                for u in self.neighbors(v) {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp.into_iter().map(|k| self.regions[k].clone()).collect());
        }
        out
    }

    /// Checks the conditions CAR-family structures need.
    pub fn require_connected(&self) -> Result<(), StructureError> {
        let isolated = self.isolated();
        if !isolated.is_empty() {
            return Err(StructureError::IsolatedRegions(isolated));
        }
        let components = self.components();
        if components.len() > 1 {
            return Err(StructureError::Disconnected { components });
        }
        Ok(())
    }

    /// `D - W`.
    pub fn laplacian(&self) -> SparseSym {
        let n = self.n();
        let counts = self.counts();
        let mut t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, counts[i] as f64)).collect();
        for i in 0..n {
            for j in self.neighbors(i).filter(|&j| j < i) {
                t.push((i, j, -1.0));
            }
        }
        SparseSym::from_triplets(n, &t)
    }
}

pub fn adjacency_from_neighbor_list(
    pairs: &[(String, String)],
    regions: &[String],
) -> Result<ProximityMatrix, StructureError> {
    let n = regions.len();
    let index: BTreeMap<&str, usize> = regions
        .iter()
        .enumerate()
        .map(|(k, r)| (r.as_str(), k))
        .collect();
    let mut w = vec![0u8; n * n];
    for (a, b) in pairs {
        if a == b {
            return Err(StructureError::SelfPair(a.clone()));
        }
        let i = *index
            .get(a.as_str())
            .ok_or_else(|| StructureError::UnknownRegion(a.clone()))?;
        let j = *index
            .get(b.as_str())
            .ok_or_else(|| StructureError::UnknownRegion(b.clone()))?;
        w[i * n + j] = 1;
        w[j * n + i] = 1;
    }
    Ok(ProximityMatrix {
        regions: regions.to_vec(),
        kind: ProximityKind::Neighbor,
        w,
    })
}

/// `w_ij = 1` iff the distance is strictly below the median of the
/// off-diagonal upper-triangle distances.
pub fn distance_threshold_matrix(
    dist: &DMatrix<f64>,
    regions: &[String],
) -> Result<ProximityMatrix, StructureError> {
    let n = regions.len();
    assert_eq!(dist.nrows(), n);
    assert_eq!(dist.ncols(), n);
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[(i, j)] != dist[(j, i)] {
                return Err(StructureError::Asymmetric(i, j));
            }
            if !(dist[(i, j)] > 0.0) {
                return Err(StructureError::NonPositiveDistance(i, j));
            }
            upper.push(dist[(i, j)]);
        }
    }
    upper.sort_by(f64::total_cmp);
    let median = if upper.is_empty() {
        0.0
    } else if upper.len() % 2 == 1 {
        upper[upper.len() / 2]
    } else {
        0.5 * (upper[upper.len() / 2 - 1] + upper[upper.len() / 2])
    };
    let mut w = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dist[(i, j)] < median {
                w[i * n + j] = 1;
            }
        }
    }
    Ok(ProximityMatrix {
        regions: regions.to_vec(),
        kind: ProximityKind::Distance,
        w,
    })
}

/// Which hyperparameter scales a structure matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierRole {
    /// Spatial precision `tau_theta`.
    TauTheta,
    /// Unstructured BYM precision `tau_v`.
    TauV,
    /// Inverse cyclic random-walk variance `1 / sigma2_phi`.
    PhiPrecision,
}

/// Structure matrix of one latent Gaussian block, up to its precision
/// multiplier, with the constraints spanning its null space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionStructure {
    pub q: SparseSym,
    pub rank_deficiency: usize,
    pub constraints: Vec<Vec<f64>>,
    pub multiplier_role: MultiplierRole,
}

impl PrecisionStructure {
    pub fn size(&self) -> usize {
        self.q.n()
    }

    pub fn rank(&self) -> usize {
        self.size() - self.rank_deficiency
    }

    /// Block-diagonal replication sharing one multiplier; constraints are
    /// imposed per copy.
    pub fn replicate(&self, copies: usize) -> Self {
        let n = self.size();
        let mut constraints = Vec::with_capacity(self.constraints.len() * copies);
        for c in 0..copies {
            for v in &self.constraints {
                let mut full = vec![0.0; n * copies];
                full[c * n..(c + 1) * n].copy_from_slice(v);
                constraints.push(full);
            }
        }
        Self {
            q: self.q.replicate(copies),
            rank_deficiency: self.rank_deficiency * copies,
            constraints,
            multiplier_role: self.multiplier_role,
        }
    }

    /// Eigenvalues of `q`, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.q.to_dense().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Log pseudo-determinant: sum of the logs of the non-null eigenvalues.
    pub fn log_pdet(&self) -> f64 {
        self.eigenvalues()[self.rank_deficiency..]
            .iter()
            .map(|v| v.ln())
            .sum()
    }
}

fn sum_to_zero(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

pub fn iid_precision(n: usize, role: MultiplierRole) -> PrecisionStructure {
    PrecisionStructure {
        q: SparseSym::identity(n),
        rank_deficiency: 0,
        constraints: Vec::new(),
        multiplier_role: role,
    }
}

/// `q = D - W` with a sum-to-zero constraint.
pub fn icar_precision(prox: &ProximityMatrix) -> Result<PrecisionStructure, StructureError> {
    prox.require_connected()?;
    Ok(PrecisionStructure {
        q: prox.laplacian(),
        rank_deficiency: 1,
        constraints: vec![sum_to_zero(prox.n())],
        multiplier_role: MultiplierRole::TauTheta,
    })
}

/// `q = D + dI - W`, unconstrained and positive definite.
pub fn proper_car_precision(
    prox: &ProximityMatrix,
    d: f64,
) -> Result<PrecisionStructure, StructureError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(StructureError::NonPositiveOffset(d));
    }
    prox.require_connected()?;
    let lap = prox.laplacian();
    let mut t: Vec<_> = lap.iter().collect();
    t.extend((0..prox.n()).map(|i| (i, i, d)));
    Ok(PrecisionStructure {
        q: SparseSym::from_triplets(prox.n(), &t),
        rank_deficiency: 0,
        constraints: Vec::new(),
        multiplier_role: MultiplierRole::TauTheta,
    })
}

/// Structured (ICAR, `tau_theta`) and unstructured (identity, `tau_v`) parts.
pub fn bym_structure(
    prox: &ProximityMatrix,
) -> Result<(PrecisionStructure, PrecisionStructure), StructureError> {
    Ok((
        icar_precision(prox)?,
        iid_precision(prox.n(), MultiplierRole::TauV),
    ))
}

/// First-order random walk on a cycle of `period` months.
pub fn cyclic_rw1_precision(period: usize) -> Result<PrecisionStructure, StructureError> {
    if period < 3 {
        return Err(StructureError::PeriodTooShort(period));
    }
    let mut t = Vec::with_capacity(2 * period);
    for i in 0..period {
        t.push((i, i, 2.0));
        let j = (i + 1) % period;
        t.push((i, j, -1.0));
    }
    Ok(PrecisionStructure {
        q: SparseSym::from_triplets(period, &t),
        rank_deficiency: 1,
        constraints: vec![sum_to_zero(period)],
        multiplier_role: MultiplierRole::PhiPrecision,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum SpatialStructure {
    Independent,
    Icar,
    ProperCar,
    Bym,
}

impl SpatialStructure {
    pub fn needs_proximity(self) -> bool {
        self != SpatialStructure::Independent
    }

    pub fn label(self) -> &'static str {
        match self {
            SpatialStructure::Independent => "independent",
            SpatialStructure::Icar => "icar",
            SpatialStructure::ProperCar => "proper_car",
            SpatialStructure::Bym => "bym",
        }
    }
}

impl std::str::FromStr for SpatialStructure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "independent" => SpatialStructure::Independent,
            "icar" | "car" => SpatialStructure::Icar,
            "proper_car" => SpatialStructure::ProperCar,
            "bym" => SpatialStructure::Bym,
            other => return Err(format!("unknown spatial structure `{other}`")),
        })
    }
}

/// Spatial prior for one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpec {
    pub structure: SpatialStructure,
    pub proximity: Option<ProximityMatrix>,
    /// Initial (or fixed) proper CAR offset.
    pub d: Option<f64>,
}

impl SpatialSpec {
    pub fn new(
        structure: SpatialStructure,
        proximity: Option<ProximityMatrix>,
        d: Option<f64>,
    ) -> Result<Self, StructureError> {
        if structure == SpatialStructure::ProperCar {
            let d = d.unwrap_or(1.0);
            if !(d > 0.0) {
                return Err(StructureError::NonPositiveOffset(d));
            }
        }
        if let Some(p) = proximity.as_ref().filter(|_| structure.needs_proximity()) {
            p.require_connected()?;
        }
        Ok(Self {
            structure,
            proximity,
            d: (structure == SpatialStructure::ProperCar).then(|| d.unwrap_or(1.0)),
        })
    }
}

// ---------------------------------------------------------------------------
// CSV inputs

fn records<R: Read>(
    reader: R,
    file: &str,
    header: &[&str],
) -> Result<Vec<(u64, csv::StringRecord)>, StructureError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| StructureError::Parse {
            file: file.into(),
            row: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    if found != header {
        return Err(StructureError::Parse {
            file: file.into(),
            row: 1,
            message: format!("expected header `{}`", header.join(",")),
        });
    }
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| StructureError::Parse {
                file: file.into(),
                row: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            Ok((r.position().map_or(0, |p| p.line()), r))
        })
        .collect()
}

/// Reads `region_a,region_b` edges.
pub fn read_neighbors<R: Read>(reader: R, file: &str) -> Result<Vec<(String, String)>, StructureError> {
    Ok(records(reader, file, &["region_a", "region_b"])?
        .into_iter()
        .map(|(_, r)| (r[0].to_string(), r[1].to_string()))
        .collect())
}

/// Reads `region_a,region_b,km` and symmetrizes; every pair must appear at
/// least once and repeated pairs must agree.
pub fn read_distances<R: Read>(
    reader: R,
    file: &str,
    regions: &[String],
) -> Result<DMatrix<f64>, StructureError> {
    let n = regions.len();
    let index: BTreeMap<&str, usize> = regions
        .iter()
        .enumerate()
        .map(|(k, r)| (r.as_str(), k))
        .collect();
    let mut d = DMatrix::from_element(n, n, f64::NAN);
    for (row, r) in records(reader, file, &["region_a", "region_b", "km"])? {
        let parse_err = |message: String| StructureError::Parse {
            file: file.into(),
            row,
            message,
        };
        let i = *index
            .get(&r[0])
            .ok_or_else(|| StructureError::UnknownRegion(r[0].to_string()))?;
        let j = *index
            .get(&r[1])
            .ok_or_else(|| StructureError::UnknownRegion(r[1].to_string()))?;
        let km: f64 = r[2]
            .parse()
            .map_err(|_| parse_err(format!("cannot parse km `{}`", &r[2])))?;
        if i == j {
            continue;
        }
        if d[(i, j)].is_finite() && d[(i, j)] != km {
            return Err(parse_err(format!("conflicting distances for ({}, {})", &r[0], &r[1])));
        }
        d[(i, j)] = km;
        d[(j, i)] = km;
    }
    let mut missing = BTreeSet::new();
    for i in 0..n {
        d[(i, i)] = 0.0;
        for j in (i + 1)..n {
            if !d[(i, j)].is_finite() {
                missing.insert((regions[i].clone(), regions[j].clone()));
            }
        }
    }
    if let Some((a, b)) = missing.into_iter().next() {
        return Err(StructureError::Parse {
            file: file.into(),
            row: 0,
            message: format!("no distance for pair ({a}, {b})"),
        });
    }
    Ok(d)
}
