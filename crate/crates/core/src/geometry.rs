//! Site layouts for triangular ladders and 2D triangular clusters.
//!
//! Positions are in micrometers. Ladder sites wind along the zig-zag: index
//! `i` sits at `(i·a/2, (i mod 2)·h)`, so even sites form one leg and odd
//! sites the other. Two-dimensional clusters are centered hexagons (or any
//! explicit coordinate list) on a triangular Bravais lattice with spacing `a`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used to decide that two distances are equal.
const DIST_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    Ladder,
    Triangular2d,
}

/// How separations between sites are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// [`LatticeGeometry::lattice_distance`].
    #[default]
    Lattice,
    /// Euclidean distance in units of `a`.
    Euclidean,
}

#[derive(Debug, Clone)]
pub struct LatticeGeometry {
    kind: LatticeKind,
    positions: Vec<[f64; 2]>,
    a: f64,
    h: f64,
    hops: Vec<u32>,
}

/// Serialized form of a geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub kind: LatticeKind,
    pub n_sites: usize,
    pub a: f64,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinates: Option<Vec<[f64; 2]>>,
}

/// Integer key for a displacement vector, rounded to a nanometer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DisplacementKey(pub i64, pub i64);

impl DisplacementKey {
    pub fn from_vector(d: [f64; 2]) -> Self {
        DisplacementKey((d[0] * 1e3).round() as i64, (d[1] * 1e3).round() as i64)
    }

    pub fn to_vector(self) -> [f64; 2] {
        [self.0 as f64 * 1e-3, self.1 as f64 * 1e-3]
    }

    pub fn norm(self) -> f64 {
        let [x, y] = self.to_vector();
        x.hypot(y)
    }
}

pub fn build_ladder(n_sites: usize, a: f64, h: f64) -> Result<LatticeGeometry> {
    if n_sites < 2 {
        return Err(Error::Geometry(format!("ladder needs at least 2 sites, got {n_sites}")));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Geometry(format!("spacing a must be positive, got {a}")));
    }
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::Geometry(format!("inter-leg spacing h must be non-negative, got {h}")));
    }
    let positions = (0..n_sites)
        .map(|i| [i as f64 * a / 2.0, (i % 2) as f64 * h])
        .collect();
    LatticeGeometry::new(LatticeKind::Ladder, positions, a, h)
}

/// Centered hexagonal cluster. Supported sizes are `3k(k+1)+1` (1, 7, 19, 37, ...).
pub fn build_triangular2d(n_sites: usize, a: f64) -> Result<LatticeGeometry> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Geometry(format!("spacing a must be positive, got {a}")));
    }
    let shells = (0..64usize)
        .find(|&k| 3 * k * (k + 1) + 1 == n_sites)
        .ok_or_else(|| {
            Error::Geometry(format!(
                "{n_sites} sites is not a centered hexagon; supply explicit coordinates"
            ))
        })?;
    let k = shells as i64;
    let mut positions = Vec::with_capacity(n_sites);
    for r in -k..=k {
        for q in -k..=k {
            let s = -q - r;
            if q.abs().max(r.abs()).max(s.abs()) <= k {
                positions.push(axial_to_cartesian(q, r, a));
            }
        }
    }
    LatticeGeometry::new(LatticeKind::Triangular2d, positions, a, 0.0)
}

/// All triangular-lattice sites within Euclidean distance `radius` of a central site.
/// Radius `a` gives 7 sites, `√3·a` gives 13, `2a` gives 19.
pub fn build_triangular_disk(radius: f64, a: f64) -> Result<LatticeGeometry> {
    if !(a > 0.0) || !(radius >= 0.0) {
        return Err(Error::Geometry("disk radius and spacing must be positive".into()));
    }
    let k = (radius / a).ceil() as i64 + 2;
    let mut positions = Vec::new();
    for r in -k..=k {
        for q in -k..=k {
            let p = axial_to_cartesian(q, r, a);
            if p[0].hypot(p[1]) <= radius * (1.0 + DIST_TOL) {
                positions.push(p);
            }
        }
    }
    LatticeGeometry::new(LatticeKind::Triangular2d, positions, a, 0.0)
}

fn axial_to_cartesian(q: i64, r: i64, a: f64) -> [f64; 2] {
    [a * (q as f64 + r as f64 / 2.0), a * r as f64 * 3f64.sqrt() / 2.0]
}

impl LatticeGeometry {
    /// Explicit coordinate list. Sites are kept in the given order.
    pub fn from_coordinates(kind: LatticeKind, positions: Vec<[f64; 2]>, a: f64, h: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::Geometry(format!("spacing a must be positive, got {a}")));
        }
        Self::new(kind, positions, a, h)
    }

    fn new(kind: LatticeKind, positions: Vec<[f64; 2]>, a: f64, h: f64) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::Geometry("geometry has no sites".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclid(positions[i], positions[j]);
                if d <= a * 1e-9 {
                    return Err(Error::Geometry(format!("sites {i} and {j} coincide")));
                }
            }
        }
        let mut g = LatticeGeometry { kind, positions, a, h, hops: Vec::new() };
        g.hops = match kind {
            LatticeKind::Ladder => {
                let mut hops = vec![0u32; n * n];
                for i in 0..n {
                    for j in 0..n {
                        hops[i * n + j] = i.abs_diff(j) as u32;
                    }
                }
                hops
            }
            LatticeKind::Triangular2d => g.bfs_hops(),
        };
        Ok(g)
    }

    fn bfs_hops(&self) -> Vec<u32> {
        let n = self.n_sites();
        let adjacency = self.neighbor_lists(self.a);
        let mut hops = vec![u32::MAX; n * n];
        for src in 0..n {
            let row = &mut hops[src * n..(src + 1) * n];
            row[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &v in &adjacency[u] {
                    if row[v] == u32::MAX {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        hops
    }

    fn neighbor_lists(&self, bond_length: f64) -> Vec<Vec<usize>> {
        let n = self.n_sites();
        let mut adj = vec![Vec::new(); n];
        for (i, j) in self.bonds_at(bond_length) {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn n_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn position(&self, site: usize) -> [f64; 2] {
        self.positions[site]
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn check_site(&self, site: usize) -> Result<()> {
        if site < self.n_sites() {
            Ok(())
        } else {
            Err(Error::SiteOutOfRange { site, n_sites: self.n_sites() })
        }
    }

    /// Euclidean distance between two distinct sites.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_site(i)?;
        self.check_site(j)?;
        if i == j {
            return Err(Error::CoincidentSites(i));
        }
        Ok(euclid(self.positions[i], self.positions[j]))
    }

    /// Index difference on ladders, nearest-neighbour hop count on 2D clusters.
    /// Sites disconnected from each other by the bond graph report `u32::MAX`.
    pub fn lattice_distance(&self, i: usize, j: usize) -> usize {
        self.hops[i * self.n_sites() + j] as usize
    }

    /// Separation under `metric`; zero for `i == j`.
    pub fn separation(&self, i: usize, j: usize, metric: DistanceMetric) -> f64 {
        match metric {
            DistanceMetric::Lattice => self.lattice_distance(i, j) as f64,
            DistanceMetric::Euclidean => euclid(self.positions[i], self.positions[j]) / self.a,
        }
    }

    pub fn displacement(&self, i: usize, j: usize) -> [f64; 2] {
        let (p, q) = (self.positions[i], self.positions[j]);
        [p[0] - q[0], p[1] - q[1]]
    }

    /// Site sitting at `position`, if any.
    pub fn site_at(&self, position: [f64; 2]) -> Option<usize> {
        let tol = self.a * 1e-6;
        self.positions
            .iter()
            .position(|&p| euclid(p, position) <= tol)
    }

    /// Site at `positions[origin] + offset`, if it exists.
    pub fn offset_site(&self, origin: usize, offset: [f64; 2]) -> Option<usize> {
        let p = self.positions[origin];
        self.site_at([p[0] + offset[0], p[1] + offset[1]])
    }

    /// Unordered pairs `i < j` separated by `length` (to relative tolerance).
    pub fn bonds_at(&self, length: f64) -> Vec<(usize, usize)> {
        let n = self.n_sites();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclid(self.positions[i], self.positions[j]);
                if (d - length).abs() <= length * DIST_TOL {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Smallest pairwise distance in the array.
    pub fn min_distance(&self) -> f64 {
        let n = self.n_sites();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(euclid(self.positions[i], self.positions[j]));
            }
        }
        best
    }

    pub fn nearest_neighbor_bonds(&self) -> Vec<(usize, usize)> {
        if self.n_sites() < 2 {
            return Vec::new();
        }
        self.bonds_at(self.min_distance())
    }

    /// Ladder rung bond length `sqrt((a/2)² + h²)`.
    pub fn rung_length(&self) -> f64 {
        (self.a * self.a / 4.0 + self.h * self.h).sqrt()
    }

    pub fn to_spec(&self) -> GeometrySpec {
        GeometrySpec {
            kind: self.kind,
            n_sites: self.n_sites(),
            a: self.a,
            h: (self.kind == LatticeKind::Ladder).then_some(self.h),
            coordinates: Some(self.positions.clone()),
        }
    }

    pub fn from_spec(spec: &GeometrySpec) -> Result<Self> {
        if spec.n_sites == 0 {
            return Err(Error::Geometry("n_sites must be positive".into()));
        }
        if let Some(coords) = &spec.coordinates {
            if coords.len() != spec.n_sites {
                return Err(Error::Geometry(format!(
                    "coordinate list has {} entries but n_sites = {}",
                    coords.len(),
                    spec.n_sites
                )));
            }
            return Self::from_coordinates(spec.kind, coords.clone(), spec.a, spec.h.unwrap_or(0.0));
        }
        match spec.kind {
            LatticeKind::Ladder => {
                let h = spec
                    .h
                    .ok_or_else(|| Error::Geometry("ladder geometry needs h".into()))?;
                build_ladder(spec.n_sites, spec.a, h)
            }
            LatticeKind::Triangular2d => build_triangular2d(spec.n_sites, spec.a),
        }
    }
}

fn euclid(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KLabel {
    Gamma,
    K,
}

/// Wavevectors covering the first Brillouin zone of a triangular lattice.
#[derive(Debug, Clone)]
pub struct BrillouinGrid {
    pub k_points: Vec<[f64; 2]>,
    pub labels: Vec<Option<KLabel>>,
}

impl BrillouinGrid {
    /// Uniform `resolution × resolution` mesh clipped to the hexagonal zone, with
    /// Γ and the six zone corners always present exactly.
    pub fn triangular(a: f64, resolution: usize) -> Self {
        let corner = 4.0 * PI / (3.0 * a);
        let apothem = 2.0 * PI / (3f64.sqrt() * a);
        let mut k_points = vec![[0.0, 0.0]];
        let mut labels = vec![Some(KLabel::Gamma)];
        for m in 0..6 {
            let ang = m as f64 * PI / 3.0;
            k_points.push([corner * ang.cos(), corner * ang.sin()]);
            labels.push(Some(KLabel::K));
        }
        let inside = |k: [f64; 2]| {
            (0..6).all(|m| {
                let ang = PI / 6.0 + m as f64 * PI / 3.0;
                k[0] * ang.cos() + k[1] * ang.sin() <= apothem * (1.0 + 1e-9)
            })
        };
        let res = resolution.max(2);
        for ix in 0..res {
            for iy in 0..res {
                let kx = -corner + 2.0 * corner * ix as f64 / (res - 1) as f64;
                let ky = -corner + 2.0 * corner * iy as f64 / (res - 1) as f64;
                let k = [kx, ky];
                let dup = k_points
                    .iter()
                    .any(|p| (p[0] - kx).hypot(p[1] - ky) < corner * 1e-9);
                if inside(k) && !dup {
                    k_points.push(k);
                    labels.push(None);
                }
            }
        }
        BrillouinGrid { k_points, labels }
    }

    pub fn default_for(a: f64) -> Self {
        Self::triangular(a, 25)
    }

    pub fn gamma_index(&self) -> usize {
        0
    }

    pub fn k_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(KLabel::K))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilateral_ladder_has_single_bond_length() {
        let a = 14.7;
        let g = build_ladder(19, a, 3f64.sqrt() / 2.0 * a).unwrap();
        assert!((g.distance(0, 1).unwrap() - a).abs() < 1e-12);
        assert!((g.distance(0, 2).unwrap() - a).abs() < 1e-12);
        let nn = g.nearest_neighbor_bonds();
        // 18 rungs + 17 leg bonds
        assert_eq!(nn.len(), 35);
    }

    #[test]
    fn rung_distance_for_half_ratio() {
        let g = build_ladder(19, 19.6, 9.8).unwrap();
        let d = g.distance(0, 1).unwrap();
        assert!((d - 19.6 / 2f64.sqrt()).abs() < 1e-12);
        assert!((d - 13.859).abs() < 1e-3);
        assert!((g.distance(0, 2).unwrap() - 19.6).abs() < 1e-12);
    }

    #[test]
    fn zero_height_is_a_chain() {
        let g = build_ladder(19, 2.0, 0.0).unwrap();
        for i in 0..18 {
            assert!((g.distance(i, i + 1).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(g.position(i)[1], 0.0);
        }
    }

    #[test]
    fn ladder_rejects_bad_input() {
        assert!(build_ladder(1, 1.0, 1.0).is_err());
        assert!(build_ladder(5, 0.0, 1.0).is_err());
        assert!(build_ladder(5, -1.0, 1.0).is_err());
        assert!(build_ladder(5, 1.0, -0.1).is_err());
    }

    #[test]
    fn hexagon_bond_counts() {
        let g = build_triangular2d(37, 1.0).unwrap();
        assert_eq!(g.nearest_neighbor_bonds().len(), 90);
        let g7 = build_triangular2d(7, 3.0).unwrap();
        let center = g7.site_at([0.0, 0.0]).unwrap();
        let neighbours = g7
            .nearest_neighbor_bonds()
            .iter()
            .filter(|(i, j)| *i == center || *j == center)
            .count();
        assert_eq!(neighbours, 6);
        let g1 = build_triangular2d(1, 1.0).unwrap();
        assert!(g1.nearest_neighbor_bonds().is_empty());
        assert!(build_triangular2d(8, 1.0).is_err());
    }

    #[test]
    fn disk_sizes() {
        assert_eq!(build_triangular_disk(1.0, 1.0).unwrap().n_sites(), 7);
        assert_eq!(build_triangular_disk(3f64.sqrt(), 1.0).unwrap().n_sites(), 13);
        assert_eq!(build_triangular_disk(2.0, 1.0).unwrap().n_sites(), 19);
    }

    #[test]
    fn distance_errors() {
        let g = build_ladder(4, 1.0, 1.0).unwrap();
        assert!(matches!(g.distance(1, 1), Err(Error::CoincidentSites(1))));
        assert!(g.distance(0, 9).is_err());
    }

    #[test]
    fn ladder_lattice_distance_is_index_difference() {
        let g = build_ladder(19, 1.0, 0.8).unwrap();
        assert_eq!(g.lattice_distance(8, 11), 3);
        assert_eq!(g.lattice_distance(11, 8), 3);
    }

    fn bfs_oracle(g: &LatticeGeometry, src: usize) -> Vec<usize> {
        let n = g.n_sites();
        let mut dist = vec![usize::MAX; n];
        dist[src] = 0;
        let mut frontier = vec![src];
        let mut level = 0;
        while !frontier.is_empty() {
            level += 1;
            let mut next = Vec::new();
            for &u in &frontier {
                for v in 0..n {
                    if dist[v] == usize::MAX && (g.distance(u, v).unwrap() - g.a()).abs() < 1e-9 {
                        dist[v] = level;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    #[test]
    fn rhombus_corners_are_two_hops() {
        let g = build_triangular2d(19, 1.0).unwrap();
        let p = g.site_at([0.0, 0.0]).unwrap();
        let q = g.site_at([1.5, 3f64.sqrt() / 2.0]).unwrap();
        assert_eq!(g.lattice_distance(p, q), 2);
        assert_eq!(g.lattice_distance(p, p), 0);
        assert_eq!(bfs_oracle(&g, p)[q], 2);
    }

    #[test]
    fn metric_properties_exhaustive() {
        for g in [
            build_triangular2d(37, 1.0).unwrap(),
            build_triangular_disk(3f64.sqrt(), 2.0).unwrap(),
            build_ladder(19, 1.0, 0.5).unwrap(),
        ] {
            let n = g.n_sites();
            for i in 0..n {
                let oracle = (g.kind() == LatticeKind::Triangular2d).then(|| bfs_oracle(&g, i));
                for j in 0..n {
                    if i != j {
                        assert_eq!(g.distance(i, j).unwrap(), g.distance(j, i).unwrap());
                        assert!(g.distance(i, j).unwrap() > 0.0);
                    }
                    if let Some(o) = &oracle {
                        assert_eq!(g.lattice_distance(i, j), o[j]);
                    }
                    for k in 0..n {
                        assert!(g.lattice_distance(i, k) <= g.lattice_distance(i, j) + g.lattice_distance(j, k));
                    }
                }
            }
        }
    }

    #[test]
    fn brillouin_grid_contains_special_points() {
        let a = 14.7;
        let grid = BrillouinGrid::default_for(a);
        assert_eq!(grid.k_points[grid.gamma_index()], [0.0, 0.0]);
        let ks = grid.k_indices();
        assert_eq!(ks.len(), 6);
        for &i in &ks {
            let k = grid.k_points[i];
            assert!((k[0].hypot(k[1]) - 4.0 * PI / (3.0 * a)).abs() < 1e-12);
        }
        assert!(grid.k_points.len() > 300);
    }

    #[test]
    fn spec_round_trip() {
        let g = build_ladder(7, 2.0, 1.0).unwrap();
        let spec = g.to_spec();
        let back = LatticeGeometry::from_spec(&spec).unwrap();
        assert_eq!(back.positions(), g.positions());
        let plain = GeometrySpec { kind: LatticeKind::Triangular2d, n_sites: 7, a: 1.0, h: None, coordinates: None };
        assert_eq!(LatticeGeometry::from_spec(&plain).unwrap().n_sites(), 7);
    }
}
