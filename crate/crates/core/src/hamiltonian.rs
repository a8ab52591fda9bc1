//! Long-range bosonic t-J operator, addressing light shifts and their ramp.
//!
//! Units: ħ = 1, energies in rad/µs (2π × MHz), distances in µm, times in µs.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LatticeGeometry;
use crate::hilbert::{site_code, swap_sites, LocalState, SectorBasis};

/// Converts a frequency in MHz to an angular frequency in rad/µs.
pub fn mhz(f: f64) -> f64 {
    2.0 * PI * f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Hopping enters with `+t` (kinetically frustrated on triangles).
    #[default]
    Frustrated,
    /// Only the hopping terms change sign.
    Reversed,
    /// The whole operator is negated.
    Negated,
}

/// Couplings of one bond, already evaluated at that bond's distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondCouplings {
    pub t_up: f64,
    pub t_dn: f64,
    pub j_perp: f64,
    pub j_z: f64,
}

impl BondCouplings {
    pub fn from_mhz(t_up: f64, t_dn: f64, j_perp: f64, j_z: f64) -> Self {
        BondCouplings { t_up: mhz(t_up), t_dn: mhz(t_dn), j_perp: mhz(j_perp), j_z: mhz(j_z) }
    }

    /// Measured rung couplings of the equilateral ladder (`h/a = √3/2`).
    pub fn rung_equilateral() -> Self {
        Self::from_mhz(1.1, 1.2, 0.107, -0.071)
    }

    /// Measured leg couplings of the equilateral ladder.
    pub fn leg_equilateral() -> Self {
        Self::from_mhz(0.95, 1.0, 0.075, -0.05)
    }

    /// Measured rung couplings at `h/a = 0.5`.
    pub fn rung_half() -> Self {
        Self::from_mhz(1.1, 1.2, 0.110, -0.076)
    }

    /// Measured leg couplings at `h/a = 0.5`.
    pub fn leg_half() -> Self {
        Self::from_mhz(0.40, 0.42, 0.013, -0.008)
    }

    fn is_finite(&self) -> bool {
        self.t_up.is_finite() && self.t_dn.is_finite() && self.j_perp.is_finite() && self.j_z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondOverride {
    pub i: usize,
    pub j: usize,
    #[serde(flatten)]
    pub couplings: BondCouplings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSet {
    pub t_up: f64,
    pub t_dn: f64,
    pub j_perp: f64,
    pub j_z: f64,
    /// Distance at which the amplitudes above apply.
    pub a_ref: f64,
    #[serde(default = "default_hop_power")]
    pub hop_power: f64,
    #[serde(default = "default_spin_power")]
    pub spin_power: f64,
    #[serde(default)]
    pub sign_mode: SignMode,
    #[serde(default)]
    pub overrides: Vec<BondOverride>,
    /// Pairs farther apart than this are dropped. `None` keeps every pair.
    #[serde(default)]
    pub cutoff: Option<f64>,
}

fn default_hop_power() -> f64 {
    3.0
}

fn default_spin_power() -> f64 {
    6.0
}

impl CouplingSet {
    pub fn from_bond(b: BondCouplings, a_ref: f64) -> Self {
        CouplingSet {
            t_up: b.t_up,
            t_dn: b.t_dn,
            j_perp: b.j_perp,
            j_z: b.j_z,
            a_ref,
            hop_power: 3.0,
            spin_power: 6.0,
            sign_mode: SignMode::Frustrated,
            overrides: Vec::new(),
            cutoff: None,
        }
    }

    /// Measured rung couplings referenced to `a_ref`, ideal power-law scaling elsewhere.
    pub fn table_default(a_ref: f64) -> Self {
        Self::from_bond(BondCouplings::rung_equilateral(), a_ref)
    }

    /// Pure hopping with equal amplitude for both spin species.
    pub fn hopping_only(t: f64, a_ref: f64) -> Self {
        Self::from_bond(BondCouplings { t_up: t, t_dn: t, j_perp: 0.0, j_z: 0.0 }, a_ref)
    }

    pub fn with_sign_mode(mut self, mode: SignMode) -> Self {
        self.sign_mode = mode;
        self
    }

    /// Replace rung (`|i-j| = 1`) and leg (`|i-j| = 2`) bonds of a ladder with fixed values.
    pub fn with_ladder_table(mut self, n_sites: usize, rung: BondCouplings, leg: BondCouplings) -> Self {
        for i in 0..n_sites {
            if i + 1 < n_sites {
                self.overrides.push(BondOverride { i, j: i + 1, couplings: rung });
            }
            if i + 2 < n_sites {
                self.overrides.push(BondOverride { i, j: i + 2, couplings: leg });
            }
        }
        self
    }

    /// Mean hopping amplitude `(t_up + t_dn) / 2` at `a_ref`.
    pub fn t_mean(&self) -> f64 {
        0.5 * (self.t_up + self.t_dn)
    }

    pub fn validate(&self) -> Result<()> {
        let base = BondCouplings { t_up: self.t_up, t_dn: self.t_dn, j_perp: self.j_perp, j_z: self.j_z };
        if !base.is_finite() {
            return Err(Error::Parameter("coupling amplitudes must be finite".into()));
        }
        if !(self.a_ref > 0.0) || !self.a_ref.is_finite() {
            return Err(Error::Parameter(format!("a_ref must be positive, got {}", self.a_ref)));
        }
        if !self.hop_power.is_finite() || !self.spin_power.is_finite() {
            return Err(Error::Parameter("power-law exponents must be finite".into()));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!("cutoff must be positive, got {c}")));
            }
        }
        for o in &self.overrides {
            if o.i == o.j || !o.couplings.is_finite() {
                return Err(Error::Parameter(format!("invalid bond override ({}, {})", o.i, o.j)));
            }
        }
        Ok(())
    }

    /// Couplings on bond `(i, j)` before the sign mode is applied. `None` if the pair is cut off.
    pub fn bond(&self, g: &LatticeGeometry, i: usize, j: usize) -> Result<Option<BondCouplings>> {
        let r = g.distance(i, j)?;
        if let Some(o) = self
            .overrides
            .iter()
            .rev()
            .find(|o| (o.i == i && o.j == j) || (o.i == j && o.j == i))
        {
            return Ok(Some(o.couplings));
        }
        if self.cutoff.is_some_and(|c| r > c * (1.0 + 1e-12)) {
            return Ok(None);
        }
        let x = self.a_ref / r;
        let f3 = x.powf(self.hop_power);
        let f6 = x.powf(self.spin_power);
        Ok(Some(BondCouplings {
            t_up: self.t_up * f3,
            t_dn: self.t_dn * f3,
            j_perp: self.j_perp * f6,
            j_z: self.j_z * f6,
        }))
    }

    fn signed_bond(&self, b: BondCouplings) -> BondCouplings {
        match self.sign_mode {
            SignMode::Frustrated => b,
            SignMode::Reversed => BondCouplings { t_up: -b.t_up, t_dn: -b.t_dn, ..b },
            SignMode::Negated => BondCouplings { t_up: -b.t_up, t_dn: -b.t_dn, j_perp: -b.j_perp, j_z: -b.j_z },
        }
    }
}

/// Real symmetric operator on a sector: explicit diagonal plus CSR off-diagonal part.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

const PAR_THRESHOLD: usize = 4096;

impl SparseOperator {
    pub fn zeros(dim: usize) -> Self {
        Self::from_diagonal(vec![0.0; dim])
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Self {
        let dim = diag.len();
        SparseOperator { dim, diag, row_ptr: vec![0; dim + 1], cols: Vec::new(), vals: Vec::new() }
    }

    /// Assemble from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut diag = vec![0.0; dim];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.max(c) });
            }
            if r == c {
                diag[r] += v;
            } else {
                rows[r].push((c, v));
            }
        }
        Ok(Self::from_rows(diag, rows))
    }

    fn from_rows(diag: Vec<f64>, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = diag.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        SparseOperator { dim, diag, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn nnz_offdiag(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Entry `(r, c)`, zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if r == c {
            return self.diag[r];
        }
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = H x` for complex vectors.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        let kernel = |(r, out): (usize, &mut Complex64)| {
            let mut acc = x[r] * self.diag[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.cols[k]] * self.vals[k];
            }
            *out = acc;
        };
        if self.dim >= PAR_THRESHOLD {
            y.par_iter_mut().enumerate().for_each(kernel);
        } else {
            y.iter_mut().enumerate().for_each(kernel);
        }
    }

    /// `y = H x` for real vectors.
    pub fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        let kernel = |(r, out): (usize, &mut f64)| {
            let mut acc = x[r] * self.diag[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.cols[k]] * self.vals[k];
            }
            *out = acc;
        };
        if self.dim >= PAR_THRESHOLD {
            y.par_iter_mut().enumerate().for_each(kernel);
        } else {
            y.iter_mut().enumerate().for_each(kernel);
        }
    }

    /// `⟨x|H|x⟩` (real because H is symmetric).
    pub fn expectation(&self, x: &[Complex64]) -> f64 {
        let mut y = vec![Complex64::new(0.0, 0.0); self.dim];
        self.apply(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum()
    }

    /// Upper bound on the spectral norm (maximum absolute row sum).
    pub fn norm_bound(&self) -> f64 {
        (0..self.dim)
            .map(|r| self.diag[r].abs() + self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `max |H_rc − H_cr|` over stored entries.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, other: &SparseOperator, s: f64) -> Result<SparseOperator> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let diag = self.diag.iter().zip(&other.diag).map(|(a, b)| a + s * b).collect();
        let rows = (0..self.dim)
            .map(|r| self.row(r).chain(other.row(r).map(|(c, v)| (c, s * v))).collect())
            .collect();
        Ok(Self::from_rows(diag, rows))
    }

    /// Operator plus an extra diagonal `s·d`.
    pub fn with_diagonal_shift(&self, d: &[f64], s: f64) -> Result<SparseOperator> {
        if d.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: d.len() });
        }
        let mut out = self.clone();
        for (x, y) in out.diag.iter_mut().zip(d) {
            *x += s * y;
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> SparseOperator {
        let mut out = self.clone();
        out.diag.iter_mut().for_each(|x| *x *= s);
        out.vals.iter_mut().for_each(|x| *x *= s);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            m[(r, r)] = self.diag[r];
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// All nonzero entries in row-major order, diagonal included.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.dim + self.vals.len());
        for r in 0..self.dim {
            let mut row: Vec<(usize, f64)> = self.row(r).collect();
            if self.diag[r] != 0.0 {
                row.push((r, self.diag[r]));
            }
            row.sort_by_key(|e| e.0);
            out.extend(row.into_iter().map(|(c, v)| (r, c, v)));
        }
        out
    }

    /// Coordinate-format text: a `# dim` header then `row col value` lines.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# dim {}", self.dim)?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r} {c} {v:.17e}")?;
        }
        Ok(())
    }
}

/// Bosonic t-J operator on `basis` with every pair of sites coupled.
pub fn build_tj(g: &LatticeGeometry, basis: &SectorBasis, c: &CouplingSet) -> Result<SparseOperator> {
    c.validate()?;
    let n = g.n_sites();
    if basis.n_sites() != n {
        return Err(Error::DimensionMismatch { expected: n, got: basis.n_sites() });
    }
    for o in &c.overrides {
        g.check_site(o.i)?;
        g.check_site(o.j)?;
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            if let Some(b) = c.bond(g, i, j)? {
                pairs.push((i, j, c.signed_bond(b)));
            }
        }
    }
    let up = LocalState::Up as u128;
    let hole = LocalState::Hole as u128;
    let rows: Vec<(f64, Vec<(usize, f64)>)> = (0..basis.dim())
        .into_par_iter()
        .map(|m| {
            let w = basis.word(m);
            let mut diag = 0.0;
            let mut row = Vec::new();
            for &(i, j, b) in &pairs {
                let (si, sj) = (site_code(w, i), site_code(w, j));
                if si != hole && sj != hole {
                    let zi = if si == up { 0.5 } else { -0.5 };
                    let zj = if sj == up { 0.5 } else { -0.5 };
                    diag += b.j_z * zi * zj;
                    if si != sj && b.j_perp != 0.0 {
                        let target = basis.rank_word(swap_sites(w, i, j)).expect("flip-flop stays in sector");
                        row.push((target, 0.5 * b.j_perp));
                    }
                } else if si != sj {
                    let spin = if si == hole { sj } else { si };
                    let t = if spin == up { b.t_up } else { b.t_dn };
                    if t != 0.0 {
                        let target = basis.rank_word(swap_sites(w, i, j)).expect("hop stays in sector");
                        row.push((target, t));
                    }
                }
            }
            (diag, row)
        })
        .collect();
    let (diag, rows): (Vec<f64>, Vec<Vec<(usize, f64)>>) = rows.into_iter().unzip();
    Ok(SparseOperator::from_rows(diag, rows))
}

/// Ramp of a light-shift magnitude: linear from `delta0` to `delta_knee` over
/// `[0, t_knee]`, then exponential decay with time constant `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampProfile {
    pub delta0: f64,
    pub delta_knee: f64,
    pub t_knee: f64,
    pub tau: f64,
    #[serde(default = "default_sign")]
    pub sign: f64,
}

fn default_sign() -> f64 {
    1.0
}

impl Default for RampProfile {
    fn default() -> Self {
        RampProfile { delta0: mhz(25.0), delta_knee: mhz(5.0), t_knee: 1.0, tau: 1.0, sign: 1.0 }
    }
}

impl RampProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0.abs() >= self.delta_knee.abs()) {
            return Err(Error::Parameter("ramp needs |delta0| >= |delta_knee|".into()));
        }
        if !(self.tau > 0.0) || !(self.t_knee >= 0.0) {
            return Err(Error::Parameter("ramp needs tau > 0 and t_knee >= 0".into()));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::Parameter(format!("ramp sign must be +1 or -1, got {}", self.sign)));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Parameter(format!("ramp time must be non-negative, got {t}")));
        }
        let v = if t <= self.t_knee {
            if self.t_knee == 0.0 {
                self.delta_knee
            } else {
                self.delta0 + (self.delta_knee - self.delta0) * t / self.t_knee
            }
        } else {
            self.delta_knee * (-(t - self.t_knee) / self.tau).exp()
        };
        Ok(self.sign * v)
    }
}

/// Site-resolved addressing light shifts used to prepare product states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightShiftProgram {
    /// Sites meant to end up `Up`; they are penalized for holding `Down`.
    pub magnon_sites: Vec<usize>,
    /// Sites meant to end up empty; penalized for holding either spin.
    pub hole_sites: Vec<usize>,
    #[serde(default)]
    pub profile: RampProfile,
    /// Separate profile for the `Up` penalty on hole sites. Defaults to `profile`.
    #[serde(default)]
    pub up_profile: Option<RampProfile>,
}

impl LightShiftProgram {
    pub fn new(magnon_sites: Vec<usize>, hole_sites: Vec<usize>, profile: RampProfile) -> Self {
        LightShiftProgram { magnon_sites, hole_sites, profile, up_profile: None }
    }

    pub fn validate(&self, n_sites: usize) -> Result<()> {
        self.profile.validate()?;
        if let Some(p) = &self.up_profile {
            p.validate()?;
        }
        for &s in self.magnon_sites.iter().chain(&self.hole_sites) {
            if s >= n_sites {
                return Err(Error::SiteOutOfRange { site: s, n_sites });
            }
        }
        for s in &self.magnon_sites {
            if self.hole_sites.contains(s) {
                return Err(Error::Parameter(format!("site {s} addressed as both magnon and hole")));
            }
        }
        Ok(())
    }

    /// `(δ_dn(T), δ_up(T))`.
    pub fn values(&self, t: f64) -> Result<(f64, f64)> {
        let dn = self.profile.value(t)?;
        let up = match &self.up_profile {
            Some(p) => p.value(t)?,
            None => dn,
        };
        Ok((dn, up))
    }

    /// Per-configuration counts of penalized `Down` and `Up` occupations.
    pub fn penalty_counts(&self, basis: &SectorBasis) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate(basis.n_sites())?;
        let mut dn = vec![0.0; basis.dim()];
        let mut up = vec![0.0; basis.dim()];
        for m in 0..basis.dim() {
            for &s in self.magnon_sites.iter().chain(&self.hole_sites) {
                if basis.state(m, s) == LocalState::Down {
                    dn[m] += 1.0;
                }
            }
            for &s in &self.hole_sites {
                if basis.state(m, s) == LocalState::Up {
                    up[m] += 1.0;
                }
            }
        }
        Ok((dn, up))
    }

    /// Times where the profile has a kink.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![self.profile.t_knee];
        if let Some(p) = &self.up_profile {
            b.push(p.t_knee);
        }
        b
    }
}

pub fn ramp_value(p: &LightShiftProgram, t: f64) -> Result<f64> {
    p.profile.value(t)
}

/// Diagonal light-shift operator at time `t`.
pub fn build_light_shift(basis: &SectorBasis, p: &LightShiftProgram, t: f64) -> Result<SparseOperator> {
    let (dn, up) = p.penalty_counts(basis)?;
    let (ddn, dup) = p.values(t)?;
    Ok(SparseOperator::from_diagonal(
        dn.iter().zip(&up).map(|(a, b)| ddn * a + dup * b).collect(),
    ))
}
