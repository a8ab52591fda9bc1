//! Exact expectation values on state vectors.
//!
//! Pair correlators between the hole and the up spins are collected once into
//! a [`HoleMagnonPairs`] record, which can also be filled from reconstructed
//! shot statistics. The map, distance and COM observables consume that record.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::geometry::{BrillouinGrid, DisplacementKey, LatticeGeometry, LatticeKind};
use crate::hilbert::{set_site, site_state, LocalState, SectorBasis};

const PAR_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Down,
    Up,
    Hole,
}

impl Species {
    fn local(self) -> LocalState {
        match self {
            Species::Down => LocalState::Down,
            Species::Up => LocalState::Up,
            Species::Hole => LocalState::Hole,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinAxis {
    X,
    Z,
}

/// Single-site operators that can be multiplied on distinct sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteOp {
    Occupation(Species),
    Sz,
    Sx,
}

impl SiteOp {
    pub fn spin(axis: SpinAxis) -> Self {
        match axis {
            SpinAxis::X => SiteOp::Sx,
            SpinAxis::Z => SiteOp::Sz,
        }
    }

    pub fn hole() -> Self {
        SiteOp::Occupation(Species::Hole)
    }
}

fn check_distinct(n_sites: usize, sites: &[usize]) -> Result<()> {
    for (k, &s) in sites.iter().enumerate() {
        if s >= n_sites {
            return Err(Error::SiteOutOfRange { site: s, n_sites });
        }
        if sites[..k].contains(&s) {
            return Err(Error::CoincidentSites(s));
        }
    }
    Ok(())
}

/// `⟨ψ| Π_k op_k(site_k) |ψ⟩` for operators on distinct sites.
///
/// Off-diagonal factors (`S^x`) may leave the sector; such terms vanish.
pub fn product_expectation(psi: &StateVector, basis: &SectorBasis, ops: &[(usize, SiteOp)]) -> Result<f64> {
    psi.check_dim(basis)?;
    let sites: Vec<usize> = ops.iter().map(|o| o.0).collect();
    check_distinct(basis.n_sites(), &sites)?;
    let amps = psi.amplitudes();
    let term = |m: usize| -> f64 {
        let a = amps[m];
        if a.norm_sqr() == 0.0 {
            return 0.0;
        }
        let w = basis.word(m);
        let mut w2 = w;
        let mut coeff = 1.0;
        for &(site, op) in ops {
            let s = site_state(w, site);
            match op {
                SiteOp::Occupation(sp) => {
                    if s != sp.local() {
                        return 0.0;
                    }
                }
                SiteOp::Sz => {
                    if !s.is_spin() {
                        return 0.0;
                    }
                    coeff *= s.sz();
                }
                SiteOp::Sx => {
                    let flipped = match s {
                        LocalState::Up => LocalState::Down,
                        LocalState::Down => LocalState::Up,
                        _ => return 0.0,
                    };
                    w2 = set_site(w2, site, flipped);
                    coeff *= 0.5;
                }
            }
        }
        if w2 == w {
            return coeff * a.norm_sqr();
        }
        match basis.rank_word(w2) {
            Some(m2) => coeff * (amps[m2].conj() * a).re,
            None => 0.0,
        }
    };
    let dim = basis.dim();
    Ok(if dim > PAR_DIM { (0..dim).into_par_iter().map(term).sum() } else { (0..dim).map(term).sum() })
}

pub fn density(psi: &StateVector, basis: &SectorBasis, species: Species, site: usize) -> Result<f64> {
    product_expectation(psi, basis, &[(site, SiteOp::Occupation(species))])
}

/// Densities of one species on every site, in one pass.
pub fn densities(psi: &StateVector, basis: &SectorBasis, species: Species) -> Result<Vec<f64>> {
    psi.check_dim(basis)?;
    let n = basis.n_sites();
    let target = species.local();
    let mut out = vec![0.0; n];
    for (m, a) in psi.amplitudes().iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        let w = basis.word(m);
        for (i, o) in out.iter_mut().enumerate() {
            if site_state(w, i) == target {
                *o += p;
            }
        }
    }
    Ok(out)
}

/// Hole and up-spin densities with the joint `⟨n^h_i n^↑_j⟩`.
///
/// `joint` holds the symmetrized value `(⟨n^h_i n^↑_j⟩ + ⟨n^↑_i n^h_j⟩)/2`,
/// which is what single-basis shots can reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleMagnonPairs {
    pub n_hole: Vec<f64>,
    pub n_up: Vec<f64>,
    pub joint: DMatrix<f64>,
}

impl HoleMagnonPairs {
    pub fn from_state(psi: &StateVector, basis: &SectorBasis) -> Result<Self> {
        psi.check_dim(basis)?;
        let n = basis.n_sites();
        let mut nh = vec![0.0; n];
        let mut nu = vec![0.0; n];
        let mut x = DMatrix::<f64>::zeros(n, n);
        let mut holes = Vec::with_capacity(n);
        let mut ups = Vec::with_capacity(n);
        for (m, a) in psi.amplitudes().iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let w = basis.word(m);
            holes.clear();
            ups.clear();
            for i in 0..n {
                match site_state(w, i) {
                    LocalState::Hole => holes.push(i),
                    LocalState::Up => ups.push(i),
                    _ => {}
                }
            }
            for &h in &holes {
                nh[h] += p;
                for &u in &ups {
                    x[(h, u)] += p;
                }
            }
            for &u in &ups {
                nu[u] += p;
            }
        }
        let joint = (&x + x.transpose()) * 0.5;
        Ok(HoleMagnonPairs { n_hole: nh, n_up: nu, joint })
    }

    pub fn from_symmetric(n_hole: Vec<f64>, n_up: Vec<f64>, joint: DMatrix<f64>) -> Result<Self> {
        let n = n_hole.len();
        if n_up.len() != n || joint.nrows() != n || joint.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: n_up.len().max(joint.nrows()) });
        }
        Ok(HoleMagnonPairs { n_hole, n_up, joint })
    }

    pub fn n_sites(&self) -> usize {
        self.n_hole.len()
    }

    /// `⟨n^h_i n^↑_j⟩^s`, connected or not.
    pub fn symmetrized(&self, i: usize, j: usize, connected: bool) -> f64 {
        let mut v = self.joint[(i, j)];
        if connected {
            v -= 0.5 * (self.n_hole[i] * self.n_up[j] + self.n_up[i] * self.n_hole[j]);
        }
        v
    }

    pub fn matrix(&self, connected: bool) -> DMatrix<f64> {
        let n = self.n_sites();
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { self.symmetrized(i, j, connected) })
    }
}

/// `(⟨n^h_i n^↑_j⟩_c + ⟨n^↑_i n^h_j⟩_c)/2`.
pub fn sym_connected_pair(psi: &StateVector, basis: &SectorBasis, i: usize, j: usize) -> Result<f64> {
    check_distinct(basis.n_sites(), &[i, j])?;
    let h = SiteOp::hole();
    let u = SiteOp::Occupation(Species::Up);
    let mut v = 0.0;
    for (a, b) in [(i, j), (j, i)] {
        let ab = product_expectation(psi, basis, &[(a, h), (b, u)])?;
        let na = product_expectation(psi, basis, &[(a, h)])?;
        let nb = product_expectation(psi, basis, &[(b, u)])?;
        v += 0.5 * (ab - na * nb);
    }
    Ok(v)
}

/// How a [`CorrelatorTable`] is indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorrelatorIndex {
    Pair(usize, usize),
    Displacement(DisplacementKey),
    Distance(usize),
    Triple(usize, usize, usize),
}

impl CorrelatorIndex {
    fn scheme(&self) -> &'static str {
        match self {
            CorrelatorIndex::Pair(..) => "pair",
            CorrelatorIndex::Displacement(_) => "displacement",
            CorrelatorIndex::Distance(_) => "distance",
            CorrelatorIndex::Triple(..) => "triple",
        }
    }

    fn header(scheme: &str) -> Option<&'static str> {
        Some(match scheme {
            "pair" => "i\tj",
            "displacement" => "dx\tdy",
            "distance" => "d",
            "triple" => "i\tj\tk",
            _ => return None,
        })
    }
}

impl fmt::Display for CorrelatorIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CorrelatorIndex::Pair(i, j) => write!(f, "{i}\t{j}"),
            CorrelatorIndex::Displacement(k) => {
                let [x, y] = k.to_vector();
                write!(f, "{x:.3}\t{y:.3}")
            }
            CorrelatorIndex::Distance(d) => write!(f, "{d}"),
            CorrelatorIndex::Triple(i, j, k) => write!(f, "{i}\t{j}\t{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelatorEntry {
    pub index: CorrelatorIndex,
    pub value: f64,
    /// Number of site tuples averaged into `value`.
    pub count: usize,
}

/// A labeled table of correlator values over one index scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorTable {
    pub label: String,
    pub entries: Vec<CorrelatorEntry>,
}

impl CorrelatorTable {
    pub fn new(label: impl Into<String>, mut entries: Vec<CorrelatorEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let s = first.index.scheme();
            if entries.iter().any(|e| e.index.scheme() != s) {
                return Err(Error::Parameter("correlator table mixes index schemes".into()));
            }
        }
        entries.sort_by(|a, b| a.index.cmp(&b.index));
        Ok(CorrelatorTable { label: label.into(), entries })
    }

    pub fn get(&self, index: CorrelatorIndex) -> Option<f64> {
        self.entries
            .binary_search_by(|e| e.index.cmp(&index))
            .ok()
            .map(|k| self.entries[k].value)
    }

    pub fn displacement(&self, d: [f64; 2]) -> Option<f64> {
        self.get(CorrelatorIndex::Displacement(DisplacementKey::from_vector(d)))
    }

    pub fn distance(&self, d: usize) -> Option<f64> {
        self.get(CorrelatorIndex::Distance(d))
    }

    /// Writes `# label`, a header row and one tab-separated row per entry.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let scheme = self.entries.first().map(|e| e.index.scheme()).unwrap_or("pair");
        writeln!(w, "# {}", self.label)?;
        writeln!(w, "# scheme: {scheme}")?;
        writeln!(w, "{}\tvalue\tcount", CorrelatorIndex::header(scheme).unwrap_or("i\tj"))?;
        for e in &self.entries {
            writeln!(w, "{}\t{:.17e}\t{}", e.index, e.value, e.count)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut label = String::new();
        let mut scheme = String::new();
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(s) = rest.strip_prefix("scheme: ") {
                    scheme = s.trim().to_string();
                } else if label.is_empty() {
                    label = rest.to_string();
                }
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse(format!("line {}: malformed correlator row", ln + 1));
            let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let x = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let width = match scheme.as_str() {
                "pair" | "displacement" => 2,
                "distance" => 1,
                "triple" => 3,
                other => return Err(Error::Parse(format!("unknown index scheme '{other}'"))),
            };
            if f.len() != width + 2 {
                return Err(bad());
            }
            let index = match scheme.as_str() {
                "pair" => CorrelatorIndex::Pair(u(f[0])?, u(f[1])?),
                "displacement" => CorrelatorIndex::Displacement(DisplacementKey::from_vector([x(f[0])?, x(f[1])?])),
                "distance" => CorrelatorIndex::Distance(u(f[0])?),
                _ => CorrelatorIndex::Triple(u(f[0])?, u(f[1])?, u(f[2])?),
            };
            entries.push(CorrelatorEntry { index, value: x(f[width])?, count: u(f[width + 1])? });
        }
        CorrelatorTable::new(label, entries)
    }
}

/// Pair table `(i, j, C^s_ij)` for all `i ≠ j`.
pub fn pair_table(pairs: &HoleMagnonPairs, connected: bool) -> CorrelatorTable {
    let n = pairs.n_sites();
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                entries.push(CorrelatorEntry {
                    index: CorrelatorIndex::Pair(i, j),
                    value: pairs.symmetrized(i, j, connected),
                    count: 1,
                });
            }
        }
    }
    let label = if connected { "hole-up connected symmetrized" } else { "hole-up symmetrized" };
    CorrelatorTable { label: label.into(), entries }
}

/// Probability mass of the hole-magnon midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ComDistribution {
    pub mass: BTreeMap<DisplacementKey, f64>,
}

impl ComDistribution {
    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn at(&self, point: [f64; 2]) -> f64 {
        self.mass.get(&DisplacementKey::from_vector(point)).copied().unwrap_or(0.0)
    }

    /// Points on the ladder midline `y = h/2`, sorted along the ladder.
    pub fn midline_profile(&self, g: &LatticeGeometry) -> Result<Vec<(f64, f64)>> {
        if g.kind() != LatticeKind::Ladder {
            return Err(Error::Geometry("midline profile needs a ladder".into()));
        }
        let y0 = DisplacementKey::from_vector([0.0, g.h() / 2.0]).1;
        let mut out: Vec<(f64, f64)> = self
            .mass
            .iter()
            .filter(|(k, _)| k.1 == y0)
            .map(|(k, &m)| (k.to_vector()[0], m))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(out)
    }
}

/// Lowest particle-in-a-box density sampled at equally spaced points, with
/// walls one spacing beyond the outermost points, normalized to `total`.
pub fn particle_in_box(xs: &[f64], total: f64) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    if xs.len() == 1 {
        return vec![total];
    }
    let lo = xs[0];
    let hi = xs[xs.len() - 1];
    let step = (hi - lo) / (xs.len() - 1) as f64;
    let len = hi - lo + 2.0 * step;
    let raw: Vec<f64> = xs
        .iter()
        .map(|&x| (std::f64::consts::PI * (x - lo + step) / len).sin().powi(2))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v * total / s).collect()
}

/// Mass at `(r_i + r_j)/2` summed over ordered pairs `i ≠ j` of `⟨n^h_i n^↑_j⟩^s`.
pub fn com_distribution(pairs: &HoleMagnonPairs, g: &LatticeGeometry) -> Result<ComDistribution> {
    let n = pairs.n_sites();
    if n != g.n_sites() {
        return Err(Error::DimensionMismatch { expected: g.n_sites(), got: n });
    }
    let mut mass = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let (p, q) = (g.position(i), g.position(j));
            let key = DisplacementKey::from_vector([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]);
            *mass.entry(key).or_insert(0.0) += 2.0 * pairs.symmetrized(i, j, false);
        }
    }
    Ok(ComDistribution { mass })
}

/// `C^s(𝐝)` or `C^{c,s}(𝐝)` averaged over ordered pairs with `r_i − r_j = 𝐝`.
pub fn relative_correlation_map(pairs: &HoleMagnonPairs, g: &LatticeGeometry, connected: bool) -> Result<CorrelatorTable> {
    let n = pairs.n_sites();
    if n != g.n_sites() {
        return Err(Error::DimensionMismatch { expected: g.n_sites(), got: n });
    }
    let mut acc: BTreeMap<DisplacementKey, (f64, usize)> = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = acc.entry(DisplacementKey::from_vector(g.displacement(i, j))).or_insert((0.0, 0));
            e.0 += pairs.symmetrized(i, j, connected);
            e.1 += 1;
        }
    }
    let entries = acc
        .into_iter()
        .map(|(k, (s, c))| CorrelatorEntry { index: CorrelatorIndex::Displacement(k), value: s / c as f64, count: c })
        .collect();
    let label = if connected { "C^{c,s}(d vector)" } else { "C^s(d vector)" };
    CorrelatorTable::new(label, entries)
}

/// `C^s(d)` at one lattice distance. Errors if no pair sits at `d`.
pub fn distance_correlation_at(pairs: &HoleMagnonPairs, g: &LatticeGeometry, d: usize, connected: bool) -> Result<f64> {
    let n = pairs.n_sites();
    let mut s = 0.0;
    let mut c = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && g.lattice_distance(i, j) == d {
                s += pairs.symmetrized(i, j, connected);
                c += 1;
            }
        }
    }
    if c == 0 {
        return Err(Error::EmptyDistanceClass(d));
    }
    Ok(s / c as f64)
}

/// `C^s(d)` for every `d` from 1 to the largest lattice distance.
pub fn distance_correlation(pairs: &HoleMagnonPairs, g: &LatticeGeometry, connected: bool) -> Result<CorrelatorTable> {
    let n = pairs.n_sites();
    if n != g.n_sites() {
        return Err(Error::DimensionMismatch { expected: g.n_sites(), got: n });
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            let d = g.lattice_distance(i, j);
            if i != j && d != u32::MAX as usize {
                let e = acc.entry(d).or_insert((0.0, 0));
                e.0 += pairs.symmetrized(i, j, connected);
                e.1 += 1;
            }
        }
    }
    let dmax = acc.keys().next_back().copied().unwrap_or(0);
    let mut entries = Vec::with_capacity(dmax);
    for d in 1..=dmax {
        let (s, c) = acc.get(&d).copied().ok_or(Error::EmptyDistanceClass(d))?;
        entries.push(CorrelatorEntry { index: CorrelatorIndex::Distance(d), value: s / c as f64, count: c });
    }
    let label = if connected { "C^{c,s}(d)" } else { "C^s(d)" };
    CorrelatorTable::new(label, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub amplitude: f64,
    pub decay_length: f64,
    pub points: usize,
}

/// Fits `A exp(-d/ξ)` by least squares on `ln C` over `d ≥ 1`, skipping values
/// at or below `noise_floor`.
pub fn fit_exponential(table: &CorrelatorTable, noise_floor: f64) -> Result<ExponentialFit> {
    let pts: Vec<(f64, f64)> = table
        .entries
        .iter()
        .filter_map(|e| match e.index {
            CorrelatorIndex::Distance(d) if d >= 1 && e.value > noise_floor.max(0.0) => Some((d as f64, e.value.ln())),
            _ => None,
        })
        .collect();
    if pts.len() < 2 {
        return Err(Error::MissingData("exponential fit needs two points above the noise floor".into()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Parameter(format!("correlations do not decay (log slope {slope})")));
    }
    Ok(ExponentialFit { amplitude: (my - slope * mx).exp(), decay_length: -1.0 / slope, points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectedConvention {
    /// Full third-order cumulant.
    #[default]
    Cumulant,
    /// `⟨n S S⟩/⟨n⟩ − ⟨S S⟩`.
    Conditional,
}

fn hole_spin_spin_single(
    psi: &StateVector,
    basis: &SectorBasis,
    r: usize,
    a: usize,
    b: usize,
    axis: SpinAxis,
    convention: ConnectedConvention,
) -> Result<f64> {
    let n = SiteOp::hole();
    let s = SiteOp::spin(axis);
    let e = |ops: &[(usize, SiteOp)]| product_expectation(psi, basis, ops);
    let nss = e(&[(r, n), (a, s), (b, s)])?;
    let nr = e(&[(r, n)])?;
    let ss = e(&[(a, s), (b, s)])?;
    Ok(match convention {
        ConnectedConvention::Conditional => {
            if nr.abs() < 1e-14 {
                0.0
            } else {
                nss / nr - ss
            }
        }
        ConnectedConvention::Cumulant => {
            let sa = e(&[(a, s)])?;
            let sb = e(&[(b, s)])?;
            let nsa = e(&[(r, n), (a, s)])?;
            let nsb = e(&[(r, n), (b, s)])?;
            nss - nr * ss - sa * nsb - sb * nsa + 2.0 * nr * sa * sb
        }
    })
}

/// Connected hole-spin-spin correlator on three sites, averaged over which of
/// the three sites carries `n^h`.
pub fn three_body_at_sites(
    psi: &StateVector,
    basis: &SectorBasis,
    sites: [usize; 3],
    axis: SpinAxis,
    convention: ConnectedConvention,
) -> Result<f64> {
    check_distinct(basis.n_sites(), &sites)?;
    let [r, a, b] = sites;
    let v = hole_spin_spin_single(psi, basis, r, a, b, axis, convention)?
        + hole_spin_spin_single(psi, basis, a, r, b, axis, convention)?
        + hole_spin_spin_single(psi, basis, b, r, a, axis, convention)?;
    Ok(v / 3.0)
}

/// `⟨n^h_{r0} S_{r0+d_i} S_{r0+d_j}⟩_c^s` with displacements in µm.
pub fn three_body_hole_spin_spin(
    psi: &StateVector,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    r0: usize,
    d_i: [f64; 2],
    d_j: [f64; 2],
    axis: SpinAxis,
    convention: ConnectedConvention,
) -> Result<f64> {
    g.check_site(r0)?;
    let off = |d: [f64; 2]| {
        g.offset_site(r0, d)
            .ok_or_else(|| Error::Geometry(format!("no site at offset ({}, {}) from {r0}", d[0], d[1])))
    };
    three_body_at_sites(psi, basis, [r0, off(d_i)?, off(d_j)?], axis, convention)
}

/// Hole-frame sum over every anchor where both displaced sites exist.
pub fn hole_frame_sum(
    psi: &StateVector,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    d_i: [f64; 2],
    d_j: [f64; 2],
    axis: SpinAxis,
    convention: ConnectedConvention,
) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for r in 0..g.n_sites() {
        if let (Some(a), Some(b)) = (g.offset_site(r, d_i), g.offset_site(r, d_j)) {
            if a != r && b != r && a != b {
                total += three_body_at_sites(psi, basis, [r, a, b], axis, convention)?;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::NoAnchor);
    }
    Ok(total)
}

/// Whether two sites are nearest neighbours: index offsets 1 and 2 on
/// ladders, one hop on 2D clusters.
pub fn are_neighbors(g: &LatticeGeometry, i: usize, j: usize) -> bool {
    let d = g.lattice_distance(i, j);
    match g.kind() {
        LatticeKind::Ladder => d == 1 || d == 2,
        LatticeKind::Triangular2d => d == 1,
    }
}

/// Elementary triangles `(i, j, k)`, `i < j < k`, with all three sides nearest-neighbour bonds.
pub fn neighbor_triangles(g: &LatticeGeometry) -> Vec<[usize; 3]> {
    let n = g.n_sites();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if !are_neighbors(g, i, j) {
                continue;
            }
            for k in (j + 1)..n {
                if are_neighbors(g, i, k) && are_neighbors(g, j, k) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Hole-frame correlator summed over all nearest-neighbour bond pairs around
/// the hole: every triangle contributes once per choice of anchor vertex.
pub fn hole_frame_nearest_neighbor(
    psi: &StateVector,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    axis: SpinAxis,
    convention: ConnectedConvention,
) -> Result<f64> {
    let tris = neighbor_triangles(g);
    if tris.is_empty() {
        return Err(Error::NoAnchor);
    }
    let vals = tris
        .par_iter()
        .map(|&t| three_body_at_sites(psi, basis, t, axis, convention))
        .collect::<Result<Vec<f64>>>()?;
    Ok(3.0 * vals.iter().sum::<f64>())
}

/// `⟨S^α_i S^α_j⟩` averaged over nearest-neighbour bonds.
pub fn mean_neighbor_spin_correlation(psi: &StateVector, basis: &SectorBasis, g: &LatticeGeometry, axis: SpinAxis) -> Result<f64> {
    let n = g.n_sites();
    let bonds: Vec<(usize, usize)> =
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).filter(|&(i, j)| are_neighbors(g, i, j)).collect();
    if bonds.is_empty() {
        return Err(Error::MissingData("geometry has no nearest-neighbour bonds".into()));
    }
    let s = SiteOp::spin(axis);
    let vals = bonds
        .par_iter()
        .map(|&(i, j)| product_expectation(psi, basis, &[(i, s), (j, s)]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / bonds.len() as f64)
}

/// `C_ij = ⟨S^x_i S^x_j⟩ − ⟨S^x_i⟩⟨S^x_j⟩` off the diagonal and
/// `C_ii = ⟨(S^x_i)²⟩ = (1 − n^h_i)/4` on it.
pub fn sx_correlation_matrix(psi: &StateVector, basis: &SectorBasis) -> Result<DMatrix<f64>> {
    psi.check_dim(basis)?;
    let n = basis.n_sites();
    let sx: Vec<f64> = (0..n)
        .map(|i| product_expectation(psi, basis, &[(i, SiteOp::Sx)]))
        .collect::<Result<_>>()?;
    let nh = densities(psi, basis, Species::Hole)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let vals = pairs
        .par_iter()
        .map(|&(i, j)| product_expectation(psi, basis, &[(i, SiteOp::Sx), (j, SiteOp::Sx)]))
        .collect::<Result<Vec<f64>>>()?;
    let mut c = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let cv = v - sx[i] * sx[j];
        c[(i, j)] = cv;
        c[(j, i)] = cv;
    }
    for i in 0..n {
        c[(i, i)] = 0.25 * (1.0 - nh[i]);
    }
    Ok(c)
}

/// `|S(k)| = |(1/N) Σ_ij e^{ik·(r_i−r_j)} C_ij|` on every grid point.
pub fn structure_factor(c: &DMatrix<f64>, g: &LatticeGeometry, grid: &BrillouinGrid) -> Result<Vec<f64>> {
    let n = g.n_sites();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: c.nrows() });
    }
    if let Some(k) = c.iter().position(|v| !v.is_finite()) {
        return Err(Error::MissingData(format!("spin correlation for pair ({}, {})", k % n, k / n)));
    }
    let pos = g.positions();
    Ok(grid
        .k_points
        .par_iter()
        .map(|k| {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let ph = k[0] * (pos[i][0] - pos[j][0]) + k[1] * (pos[i][1] - pos[j][1]);
                    s += Complex64::from_polar(c[(i, j)], ph);
                }
            }
            s.norm() / n as f64
        })
        .collect())
}

/// Builds the correlation matrix from a pair table; every pair, diagonal
/// included, must be present.
pub fn spin_matrix_from_table(table: &CorrelatorTable, n_sites: usize) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::from_element(n_sites, n_sites, f64::NAN);
    for e in &table.entries {
        match e.index {
            CorrelatorIndex::Pair(i, j) if i < n_sites && j < n_sites => {
                c[(i, j)] = e.value;
                if c[(j, i)].is_nan() {
                    c[(j, i)] = e.value;
                }
            }
            _ => return Err(Error::Parameter("spin table must be indexed by in-range site pairs".into())),
        }
    }
    if let Some(k) = c.iter().position(|v| v.is_nan()) {
        return Err(Error::MissingData(format!("spin correlation for pair ({}, {})", k % n_sites, k / n_sites)));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    /// Lattice distance between the two marked sites.
    MagnonPair,
    /// Arrangement of exactly three marked sites.
    ThreeDefect,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HistogramKey {
    Separation(usize),
    /// Marked sites in ascending order interleaved with index gaps, e.g. `h1u2u`.
    Pattern(String),
}

impl fmt::Display for HistogramKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistogramKey::Separation(d) => write!(f, "{d}"),
            HistogramKey::Pattern(p) => f.write_str(p),
        }
    }
}

impl FromStr for HistogramKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(d) = s.parse::<usize>() {
            return Ok(HistogramKey::Separation(d));
        }
        if s.is_empty() {
            return Err(Error::Parse("empty histogram key".into()));
        }
        Ok(HistogramKey::Pattern(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationHistogram {
    pub mode: HistogramMode,
    pub probabilities: BTreeMap<HistogramKey, f64>,
    /// Total weight of events matching the mode before normalization.
    pub accepted_weight: f64,
}

impl ConfigurationHistogram {
    pub fn most_probable(&self) -> Option<(&HistogramKey, f64)> {
        self.probabilities
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, &p)| (k, p))
    }

    pub fn get(&self, key: &HistogramKey) -> f64 {
        self.probabilities.get(key).copied().unwrap_or(0.0)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "key\tprobability")?;
        for (k, p) in &self.probabilities {
            writeln!(w, "{k}\t{p:.17e}")?;
        }
        Ok(())
    }
}

/// Accumulates a histogram from weighted events, each a list of marked sites
/// with a one-character tag per site.
pub fn histogram_from_marks<I>(events: I, g: &LatticeGeometry, mode: HistogramMode) -> Result<ConfigurationHistogram>
where
    I: IntoIterator<Item = (Vec<(usize, char)>, f64)>,
{
    let mut acc: BTreeMap<HistogramKey, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (mut marks, w) in events {
        marks.sort_by_key(|m| m.0);
        let key = match (mode, marks.len()) {
            (HistogramMode::MagnonPair, 2) => HistogramKey::Separation(g.lattice_distance(marks[0].0, marks[1].0)),
            (HistogramMode::ThreeDefect, 3) => {
                let mut s = String::new();
                s.push(marks[0].1);
                for k in 1..3 {
                    s.push_str(&g.lattice_distance(marks[k - 1].0, marks[k].0).to_string());
                    s.push(marks[k].1);
                }
                HistogramKey::Pattern(s)
            }
            _ => continue,
        };
        *acc.entry(key).or_insert(0.0) += w;
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::MissingData("no events match the histogram mode".into()));
    }
    acc.values_mut().for_each(|v| *v /= total);
    Ok(ConfigurationHistogram { mode, probabilities: acc, accepted_weight: total })
}

/// Ideal full-counting histogram of a state. Magnon pairs mark up spins;
/// three-defect patterns mark every non-down site, tagged `h` or `u`.
pub fn configuration_histogram(
    psi: &StateVector,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    mode: HistogramMode,
) -> Result<ConfigurationHistogram> {
    psi.check_dim(basis)?;
    let n = basis.n_sites();
    let events = psi.amplitudes().iter().enumerate().filter(|(_, a)| a.norm_sqr() > 0.0).map(|(m, a)| {
        let w = basis.word(m);
        let marks: Vec<(usize, char)> = (0..n)
            .filter_map(|i| {
                let s = site_state(w, i);
                match mode {
                    HistogramMode::MagnonPair => (s == LocalState::Up).then_some((i, 'u')),
                    HistogramMode::ThreeDefect => (s != LocalState::Down).then(|| (i, s.to_char())),
                }
            })
            .collect();
        (marks, a.norm_sqr())
    });
    histogram_from_marks(events, g, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_ladder, build_triangular2d};
    use crate::hilbert::Configuration;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn product(basis: &SectorBasis, s: &str) -> StateVector {
        StateVector::basis_state(basis, &s.parse::<Configuration>().unwrap()).unwrap()
    }

    fn superpose(basis: &SectorBasis, terms: &[(&str, f64)]) -> StateVector {
        let mut v = vec![0.0; basis.dim()];
        for (s, c) in terms {
            v[basis.rank(&s.parse().unwrap()).unwrap()] += c;
        }
        StateVector::from_real(&v, 0.0).unwrap()
    }

    fn random_state(basis: &SectorBasis, seed: u64) -> StateVector {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let amps = (0..basis.dim()).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        StateVector::normalized(amps, 0.0).unwrap()
    }

    /// Dense single-site operators in the (down, up, hole) basis.
    fn local_matrix(op: SiteOp) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        match op {
            SiteOp::Occupation(s) => m[s.local().index()][s.local().index()] = 1.0,
            SiteOp::Sz => {
                m[0][0] = -0.5;
                m[1][1] = 0.5;
            }
            SiteOp::Sx => {
                m[0][1] = 0.5;
                m[1][0] = 0.5;
            }
        }
        m
    }

    /// Oracle: expand the state into the full 3^N product space and apply the
    /// operators as dense local matrices.
    fn dense_expectation(psi: &StateVector, basis: &SectorBasis, ops: &[(usize, SiteOp)]) -> f64 {
        let n = basis.n_sites();
        let full = 3usize.pow(n as u32);
        let idx = |w: u128| (0..n).fold(0usize, |acc, i| acc * 3 + site_state(w, i).index());
        let mut v = vec![Complex64::new(0.0, 0.0); full];
        for (m, a) in psi.amplitudes().iter().enumerate() {
            v[idx(basis.word(m))] = *a;
        }
        let mut out = v.clone();
        for &(site, op) in ops {
            let mat = local_matrix(op);
            let stride = 3usize.pow((n - 1 - site) as u32);
            let mut next = vec![Complex64::new(0.0, 0.0); full];
            for (k, amp) in out.iter().enumerate() {
                let s = (k / stride) % 3;
                for (r, row) in mat.iter().enumerate() {
                    if row[s] != 0.0 {
                        next[k - s * stride + r * stride] += amp * row[s];
                    }
                }
            }
            out = next;
        }
        v.iter().zip(&out).map(|(a, b)| (a.conj() * b).re).sum()
    }

    #[test]
    fn product_expectation_matches_dense_oracle() {
        for (nh, nu) in [(1, Some(2)), (1, None), (2, Some(1))] {
            let basis = SectorBasis::new(5, nh, nu).unwrap();
            let psi = random_state(&basis, 7 + nh as u64);
            let cases: Vec<Vec<(usize, SiteOp)>> = vec![
                vec![(0, SiteOp::hole())],
                vec![(1, SiteOp::Sz), (3, SiteOp::Sz)],
                vec![(1, SiteOp::Sx), (4, SiteOp::Sx)],
                vec![(2, SiteOp::hole()), (0, SiteOp::Sx), (3, SiteOp::Sx)],
                vec![(2, SiteOp::Sx)],
                vec![(4, SiteOp::Occupation(Species::Up)), (0, SiteOp::Occupation(Species::Down)), (1, SiteOp::Sz)],
            ];
            for ops in cases {
                let a = product_expectation(&psi, &basis, &ops).unwrap();
                let b = dense_expectation(&psi, &basis, &ops);
                assert!((a - b).abs() < 1e-12, "{ops:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn coincident_sites_rejected() {
        let basis = SectorBasis::new(4, 1, Some(1)).unwrap();
        let psi = product(&basis, "hudd");
        assert!(matches!(
            product_expectation(&psi, &basis, &[(1, SiteOp::Sz), (1, SiteOp::Sz)]),
            Err(Error::CoincidentSites(1))
        ));
        assert!(sym_connected_pair(&psi, &basis, 2, 2).is_err());
        assert!(three_body_at_sites(&psi, &basis, [0, 1, 0], SpinAxis::Z, ConnectedConvention::Cumulant).is_err());
    }

    #[test]
    fn densities_of_products_and_superpositions() {
        let basis = SectorBasis::new(19, 1, Some(1)).unwrap();
        let mut s = vec!['d'; 19];
        s[8] = 'h';
        s[9] = 'u';
        let psi = product(&basis, &s.iter().collect::<String>());
        assert_eq!(density(&psi, &basis, Species::Hole, 8).unwrap(), 1.0);
        let small = SectorBasis::new(3, 1, Some(0)).unwrap();
        let sup = superpose(&small, &[("hdd", 1.0), ("dhd", 1.0)]);
        assert_relative_eq!(density(&sup, &small, Species::Hole, 0).unwrap(), 0.5, epsilon = 1e-14);
        assert_relative_eq!(density(&sup, &small, Species::Hole, 1).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn bell_pair_connected_correlation() {
        let basis = SectorBasis::new(2, 1, Some(1)).unwrap();
        let psi = superpose(&basis, &[("hu", 1.0), ("uh", 1.0)]);
        assert_relative_eq!(sym_connected_pair(&psi, &basis, 0, 1).unwrap(), 0.25, epsilon = 1e-14);
        let pairs = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
        assert_relative_eq!(pairs.symmetrized(0, 1, true), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn com_of_product_is_unit_mass_at_midpoint() {
        let g = build_ladder(19, 14.7, 14.7 * 3f64.sqrt() / 2.0).unwrap();
        let basis = SectorBasis::new(19, 1, Some(1)).unwrap();
        let cfg = Configuration::with_defects(19, &[8], &[9]).unwrap();
        let psi = StateVector::basis_state(&basis, &cfg).unwrap();
        let com = com_distribution(&HoleMagnonPairs::from_state(&psi, &basis).unwrap(), &g).unwrap();
        let (p, q) = (g.position(8), g.position(9));
        assert_relative_eq!(com.at([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]), 1.0, epsilon = 1e-14);
        assert_relative_eq!(com.total(), 1.0, epsilon = 1e-14);
        let profile = com.midline_profile(&g).unwrap();
        assert_relative_eq!(profile.iter().map(|p| p.1).sum::<f64>(), 1.0, epsilon = 1e-14);
        assert_eq!(profile.iter().filter(|p| p.1 > 0.0).count(), 1);
    }

    #[test]
    fn distance_correlation_of_product_on_ladder() {
        let g = build_ladder(19, 14.7, 14.7 * 3f64.sqrt() / 2.0).unwrap();
        let basis = SectorBasis::new(19, 1, Some(1)).unwrap();
        let psi = StateVector::basis_state(&basis, &Configuration::with_defects(19, &[8], &[9]).unwrap()).unwrap();
        let pairs = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
        let t = distance_correlation(&pairs, &g, false).unwrap();
        // Ordered pairs at index distance 1: 2·18.
        assert_eq!(t.entries[0].count, 36);
        assert_relative_eq!(t.distance(1).unwrap(), 1.0 / 36.0, epsilon = 1e-15);
        for d in 2..=18 {
            assert_eq!(t.distance(d).unwrap(), 0.0);
        }
        assert!(matches!(distance_correlation_at(&pairs, &g, 19, false), Err(Error::EmptyDistanceClass(19))));
    }

    #[test]
    fn exponential_fit_recovers_decay_length() {
        let entries = (1..8)
            .map(|d| CorrelatorEntry {
                index: CorrelatorIndex::Distance(d),
                value: 0.3 * (-(d as f64) / 1.7).exp(),
                count: 1,
            })
            .chain(std::iter::once(CorrelatorEntry { index: CorrelatorIndex::Distance(8), value: 1e-6, count: 1 }))
            .collect();
        let t = CorrelatorTable::new("c", entries).unwrap();
        let f = fit_exponential(&t, 1e-4).unwrap();
        assert_relative_eq!(f.decay_length, 1.7, epsilon = 1e-10);
        assert_relative_eq!(f.amplitude, 0.3, epsilon = 1e-10);
        assert_eq!(f.points, 7);
    }

    #[test]
    fn conditional_three_body_hand_values() {
        // Hole on site 0 with probability 1/2; the spin pair on 1, 2 is a singlet
        // when the hole is present and ↑↓ otherwise (hole then on site 3).
        let basis = SectorBasis::new(4, 1, Some(1)).unwrap();
        let s = 0.5f64.sqrt();
        let psi = superpose(&basis, &[("hudd", 0.5), ("hdud", -0.5), ("dudh", s)]);
        // ⟨n0 Sz1 Sz2⟩ = 1/2·(−1/4), ⟨n0⟩ = 1/2, ⟨Sz1 Sz2⟩ = 1/2·(−1/4) + 1/2·(−1/4).
        let nss = product_expectation(&psi, &basis, &[(0, SiteOp::hole()), (1, SiteOp::Sz), (2, SiteOp::Sz)]).unwrap();
        assert_relative_eq!(nss, -0.125, epsilon = 1e-14);
        let single = hole_spin_spin_single(&psi, &basis, 0, 1, 2, SpinAxis::Z, ConnectedConvention::Conditional).unwrap();
        assert_relative_eq!(single, -0.25 - (-0.25), epsilon = 1e-14);
        // Singlet ⟨Sx Sx⟩ = −1/4; the ↑↓ product contributes nothing.
        let sxx = product_expectation(&psi, &basis, &[(1, SiteOp::Sx), (2, SiteOp::Sx)]).unwrap();
        assert_relative_eq!(sxx, -0.125, epsilon = 1e-14);
        let single = hole_spin_spin_single(&psi, &basis, 0, 1, 2, SpinAxis::X, ConnectedConvention::Conditional).unwrap();
        assert_relative_eq!(single, -0.25 - (-0.125), epsilon = 1e-14);
    }

    #[test]
    fn symmetrized_three_body_averages_assignments() {
        let basis = SectorBasis::new(4, 1, Some(2)).unwrap();
        let psi = random_state(&basis, 3);
        for conv in [ConnectedConvention::Cumulant, ConnectedConvention::Conditional] {
            let v = three_body_at_sites(&psi, &basis, [0, 2, 3], SpinAxis::X, conv).unwrap();
            let w = three_body_at_sites(&psi, &basis, [3, 0, 2], SpinAxis::X, conv).unwrap();
            assert_relative_eq!(v, w, epsilon = 1e-14);
            let manual = (hole_spin_spin_single(&psi, &basis, 0, 2, 3, SpinAxis::X, conv).unwrap()
                + hole_spin_spin_single(&psi, &basis, 2, 0, 3, SpinAxis::X, conv).unwrap()
                + hole_spin_spin_single(&psi, &basis, 3, 0, 2, SpinAxis::X, conv).unwrap())
                / 3.0;
            assert_relative_eq!(v, manual, epsilon = 1e-14);
        }
    }

    #[test]
    fn hole_frame_single_anchor_equals_three_body() {
        let tri = vec![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        let g = LatticeGeometry::from_coordinates(LatticeKind::Triangular2d, tri, 1.0, 0.0).unwrap();
        let basis = SectorBasis::new(3, 1, Some(1)).unwrap();
        let psi = random_state(&basis, 11);
        let d1 = g.displacement(1, 0);
        let d2 = g.displacement(2, 0);
        let sum = hole_frame_sum(&psi, &basis, &g, d1, d2, SpinAxis::Z, ConnectedConvention::Cumulant).unwrap();
        let one = three_body_at_sites(&psi, &basis, [0, 1, 2], SpinAxis::Z, ConnectedConvention::Cumulant).unwrap();
        assert_relative_eq!(sum, one, epsilon = 1e-14);
        assert!(matches!(
            hole_frame_sum(&psi, &basis, &g, [10.0, 0.0], d2, SpinAxis::Z, ConnectedConvention::Cumulant),
            Err(Error::NoAnchor)
        ));
    }

    #[test]
    fn plus_x_product_has_flat_structure_factor() {
        let n = 7;
        let g = build_triangular2d(n, 1.0).unwrap();
        let basis = SectorBasis::new(n, 0, None).unwrap();
        let amps = vec![1.0; basis.dim()];
        let psi = StateVector::from_real(&amps, 0.0).unwrap();
        let c = sx_correlation_matrix(&psi, &basis).unwrap();
        let grid = BrillouinGrid::default_for(1.0);
        for s in structure_factor(&c, &g, &grid).unwrap() {
            assert_relative_eq!(s, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn structure_factor_is_even_in_k() {
        let g = build_triangular2d(7, 1.0).unwrap();
        let basis = SectorBasis::new(7, 1, Some(3)).unwrap();
        let psi = random_state(&basis, 5);
        let c = sx_correlation_matrix(&psi, &basis).unwrap();
        let ks: Vec<[f64; 2]> = vec![[0.7, 0.3], [-0.7, -0.3], [2.1, -1.0], [-2.1, 1.0]];
        let grid = BrillouinGrid { k_points: ks, labels: vec![None; 4] };
        let s = structure_factor(&c, &g, &grid).unwrap();
        assert_relative_eq!(s[0], s[1], epsilon = 1e-12);
        assert_relative_eq!(s[2], s[3], epsilon = 1e-12);
    }

    #[test]
    fn structure_factor_rejects_missing_pairs() {
        let entries = vec![
            CorrelatorEntry { index: CorrelatorIndex::Pair(0, 0), value: 0.25, count: 1 },
            CorrelatorEntry { index: CorrelatorIndex::Pair(0, 1), value: 0.1, count: 1 },
        ];
        let t = CorrelatorTable::new("sxsx", entries).unwrap();
        assert!(matches!(spin_matrix_from_table(&t, 2), Err(Error::MissingData(_))));
    }

    #[test]
    fn histograms_of_products() {
        let g = build_ladder(19, 14.7, 14.7 * 3f64.sqrt() / 2.0).unwrap();
        let basis = SectorBasis::new(19, 1, Some(2)).unwrap();
        let psi = StateVector::basis_state(&basis, &Configuration::with_defects(19, &[8], &[7, 9]).unwrap()).unwrap();
        let h = configuration_histogram(&psi, &basis, &g, HistogramMode::MagnonPair).unwrap();
        assert_eq!(h.get(&HistogramKey::Separation(2)), 1.0);
        let t = configuration_histogram(&psi, &basis, &g, HistogramMode::ThreeDefect).unwrap();
        assert_eq!(t.most_probable().unwrap().0, &HistogramKey::Pattern("u1h1u".into()));
    }

    #[test]
    fn correlator_table_round_trip() {
        let g = build_triangular2d(7, 14.7).unwrap();
        let basis = SectorBasis::new(7, 1, Some(1)).unwrap();
        let psi = random_state(&basis, 2);
        let pairs = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
        for t in [
            relative_correlation_map(&pairs, &g, true).unwrap(),
            distance_correlation(&pairs, &g, false).unwrap(),
            pair_table(&pairs, true),
        ] {
            let mut buf = Vec::new();
            t.write_tsv(&mut buf).unwrap();
            let back = CorrelatorTable::read_tsv(buf.as_slice()).unwrap();
            assert_eq!(back.label, t.label);
            assert_eq!(back.entries.len(), t.entries.len());
            for (a, b) in back.entries.iter().zip(&t.entries) {
                assert_eq!(a.index, b.index);
                assert_eq!(a.count, b.count);
                assert!((a.value - b.value).abs() <= 1e-15 * b.value.abs().max(1.0));
            }
        }
    }

    #[test]
    fn particle_in_box_is_normalized_and_symmetric() {
        let xs: Vec<f64> = (0..9).map(|k| k as f64).collect();
        let p = particle_in_box(&xs, 0.8);
        assert_relative_eq!(p.iter().sum::<f64>(), 0.8, epsilon = 1e-14);
        assert_relative_eq!(p[0], p[8], epsilon = 1e-14);
        assert!(p[4] > p[3]);
    }

    proptest! {
        #[test]
        fn connected_correlators_vanish_on_products(seed in 0u64..1000) {
            let n = 6;
            let g = build_ladder(n, 1.0, 3f64.sqrt() / 2.0).unwrap();
            let basis = SectorBasis::new(n, 1, Some(2)).unwrap();
            let m = (seed as usize) % basis.dim();
            let psi = StateVector::basis_state(&basis, &basis.unrank(m).unwrap()).unwrap();
            let pairs = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        prop_assert!(pairs.symmetrized(i, j, true).abs() < 1e-15);
                    }
                }
            }
            for t in neighbor_triangles(&g) {
                for axis in [SpinAxis::X, SpinAxis::Z] {
                    for conv in [ConnectedConvention::Cumulant, ConnectedConvention::Conditional] {
                        prop_assert!(three_body_at_sites(&psi, &basis, t, axis, conv).unwrap().abs() < 1e-15);
                    }
                }
            }
        }

        #[test]
        fn densities_sum_to_one_and_com_matches_pairs(seed in 0u64..200) {
            let n = 6;
            let g = build_ladder(n, 1.0, 0.5).unwrap();
            let basis = SectorBasis::new(n, 1, Some(1)).unwrap();
            let psi = random_state(&basis, seed);
            let d = densities(&psi, &basis, Species::Down).unwrap();
            let u = densities(&psi, &basis, Species::Up).unwrap();
            let h = densities(&psi, &basis, Species::Hole).unwrap();
            for i in 0..n {
                prop_assert!((d[i] + u[i] + h[i] - 1.0).abs() < 1e-12);
            }
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let pairs = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
            let com = com_distribution(&pairs, &g).unwrap();
            let direct: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j)
                .map(|(i, j)| pairs.symmetrized(i, j, false)).sum();
            prop_assert!((com.total() - direct).abs() < 1e-12);
            prop_assert!((com.total() - 1.0).abs() < 1e-12);
        }
    }
}
