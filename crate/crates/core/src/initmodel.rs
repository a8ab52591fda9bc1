//! Correlated state-preparation errors as a classical Boltzmann machine over
//! the five local states.
//!
//! Sites inside the region `Ω` carry pair couplings and are enumerated
//! exactly inside a restricted configuration space. Sites outside only carry
//! fields and factorize.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::geometry::LatticeGeometry;
use crate::hamiltonian::CouplingSet;
use crate::hilbert::{site_state, Configuration, LocalState, SectorBasis};
use crate::measurement::{column, ErrorChannel, MeasurementBasis, ShotBatch};

pub const N_STATES: usize = 5;

/// Bases entering the one- and two-point data, in storage order.
pub const FIT_BASES: [MeasurementBasis; 4] =
    [MeasurementBasis::Down, MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Ground];

pub const DEFAULT_REGION_SIZE: usize = 6;
pub const DEFAULT_CAP: usize = 2_000_000;

fn state_of(code: u8) -> LocalState {
    LocalState::ALL[code as usize]
}

/// Limits on the configurations admitted inside `Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConstraints {
    pub max_holes: usize,
    pub sz_min: f64,
    pub sz_max: f64,
    pub max_ground: usize,
}

impl RegionConstraints {
    /// At most three holes and two ground-state atoms, `−|Ω|/2 ≤ S^z ≤ 1/2`.
    pub fn for_region(width: usize) -> Self {
        RegionConstraints { max_holes: 3, sz_min: -(width as f64) / 2.0, sz_max: 0.5, max_ground: 2 }
    }

    pub fn unrestricted(width: usize) -> Self {
        RegionConstraints { max_holes: width, sz_min: -(width as f64), sz_max: width as f64, max_ground: width }
    }

    pub fn admits(&self, states: impl IntoIterator<Item = LocalState>) -> bool {
        let (mut holes, mut ground, mut sz) = (0, 0, 0.0);
        for s in states {
            match s {
                LocalState::Hole => holes += 1,
                LocalState::Ground => ground += 1,
                _ => {}
            }
            sz += s.sz();
        }
        holes <= self.max_holes
            && ground <= self.max_ground
            && sz >= self.sz_min - 1e-9
            && sz <= self.sz_max + 1e-9
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sz_min <= self.sz_max) {
            return Err(Error::Parameter(format!(
                "empty magnetization window [{}, {}]",
                self.sz_min, self.sz_max
            )));
        }
        Ok(())
    }
}

/// Admissible configurations of `Ω`, one state code per region site.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpace {
    width: usize,
    codes: Vec<u8>,
}

impl RegionSpace {
    pub fn enumerate(width: usize, c: &RegionConstraints, cap: usize) -> Result<Self> {
        c.validate()?;
        let mut codes = Vec::new();
        let mut cur = vec![0u8; width];
        fn rec(
            pos: usize,
            holes: usize,
            ground: usize,
            cur: &mut Vec<u8>,
            out: &mut Vec<u8>,
            c: &RegionConstraints,
            cap: usize,
        ) -> Result<()> {
            if pos == cur.len() {
                if c.admits(cur.iter().map(|&k| state_of(k))) {
                    if out.len() / cur.len().max(1) >= cap {
                        return Err(Error::Capacity { n_sites: cur.len(), n_holes: c.max_holes, n_up: None, cap });
                    }
                    out.extend_from_slice(cur);
                }
                return Ok(());
            }
            for (k, s) in LocalState::ALL.iter().enumerate() {
                let h = holes + usize::from(*s == LocalState::Hole);
                let g = ground + usize::from(*s == LocalState::Ground);
                if h > c.max_holes || g > c.max_ground {
                    continue;
                }
                cur[pos] = k as u8;
                rec(pos + 1, h, g, cur, out, c, cap)?;
            }
            Ok(())
        }
        if width == 0 {
            return Ok(RegionSpace { width, codes: Vec::new() });
        }
        rec(0, 0, 0, &mut cur, &mut codes, c, cap)?;
        Ok(RegionSpace { width, codes })
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            1
        } else {
            self.codes.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn config(&self, k: usize) -> &[u8] {
        &self.codes[k * self.width..(k + 1) * self.width]
    }

    fn find(&self, codes: &[u8]) -> Option<usize> {
        (0..self.len()).find(|&k| self.config(k) == codes)
    }
}

/// `E(s) = −Σ_{i<j∈Ω} Σ_α J^α_ij n^α_i n^α_j − Σ_j Σ_α h^α_j n^α_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannModel {
    pub n_sites: usize,
    /// Sorted site indices of `Ω`.
    pub region: Vec<usize>,
    /// One entry per region pair `(a, b)`, `a < b` in region order, indexed by local state.
    pub couplings: Vec<[f64; N_STATES]>,
    /// One entry per site, indexed by local state.
    pub fields: Vec<[f64; N_STATES]>,
    pub constraints: RegionConstraints,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

fn pair_count(w: usize) -> usize {
    w * w.saturating_sub(1) / 2
}

fn pair_index(w: usize, a: usize, b: usize) -> usize {
    debug_assert!(a < b && b < w);
    a * w - a * (a + 1) / 2 + (b - a - 1)
}

impl BoltzmannModel {
    /// All couplings and fields zero, default constraints.
    pub fn new(n_sites: usize, mut region: Vec<usize>) -> Result<Self> {
        region.sort_unstable();
        region.dedup();
        if let Some(&s) = region.iter().find(|&&s| s >= n_sites) {
            return Err(Error::SiteOutOfRange { site: s, n_sites });
        }
        let w = region.len();
        Ok(BoltzmannModel {
            n_sites,
            couplings: vec![[0.0; N_STATES]; pair_count(w)],
            fields: vec![[0.0; N_STATES]; n_sites],
            constraints: RegionConstraints::for_region(w),
            region,
            cap: DEFAULT_CAP,
        })
    }

    pub fn with_constraints(mut self, c: RegionConstraints) -> Self {
        self.constraints = c;
        self
    }

    /// Fields that put weight `1 − ε` on `target` at every site, no couplings.
    pub fn peaked_at(target: &Configuration, region: Vec<usize>, strength: f64) -> Result<Self> {
        let mut m = Self::new(target.n_sites(), region)?;
        for (j, s) in target.0.iter().enumerate() {
            m.fields[j][s.index()] = strength;
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.region.len();
        if self.couplings.len() != pair_count(w) {
            return Err(Error::DimensionMismatch { expected: pair_count(w), got: self.couplings.len() });
        }
        if self.fields.len() != self.n_sites {
            return Err(Error::DimensionMismatch { expected: self.n_sites, got: self.fields.len() });
        }
        if self.region.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Parameter("region must be sorted without repeats".into()));
        }
        if let Some(&s) = self.region.iter().find(|&&s| s >= self.n_sites) {
            return Err(Error::SiteOutOfRange { site: s, n_sites: self.n_sites });
        }
        let finite = |v: &[f64; N_STATES]| v.iter().all(|x| x.is_finite());
        if !self.couplings.iter().all(finite) || !self.fields.iter().all(finite) {
            return Err(Error::Parameter("couplings and fields must be finite".into()));
        }
        self.constraints.validate()
    }

    fn region_slot(&self, site: usize) -> Option<usize> {
        self.region.binary_search(&site).ok()
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&[f64; N_STATES]> {
        let (a, b) = (self.region_slot(i)?, self.region_slot(j)?);
        if a == b {
            return None;
        }
        Some(&self.couplings[pair_index(self.region.len(), a.min(b), a.max(b))])
    }

    pub fn set_coupling(&mut self, i: usize, j: usize, s: LocalState, value: f64) -> Result<()> {
        let (a, b) = match (self.region_slot(i), self.region_slot(j)) {
            (Some(a), Some(b)) if a != b => (a.min(b), a.max(b)),
            _ => return Err(Error::Parameter(format!("({i}, {j}) is not a pair inside the region"))),
        };
        let k = pair_index(self.region.len(), a, b);
        self.couplings[k][s.index()] = value;
        Ok(())
    }

    pub fn set_field(&mut self, j: usize, s: LocalState, value: f64) -> Result<()> {
        let n = self.n_sites;
        self.fields.get_mut(j).ok_or(Error::SiteOutOfRange { site: j, n_sites: n })?[s.index()] = value;
        Ok(())
    }

    pub fn energy(&self, c: &Configuration) -> Result<f64> {
        if c.n_sites() != self.n_sites {
            return Err(Error::DimensionMismatch { expected: self.n_sites, got: c.n_sites() });
        }
        let mut e = -(0..self.n_sites).map(|j| self.fields[j][c.0[j].index()]).sum::<f64>();
        let w = self.region.len();
        for a in 0..w {
            for b in (a + 1)..w {
                let (sa, sb) = (c.0[self.region[a]], c.0[self.region[b]]);
                if sa == sb {
                    e -= self.couplings[pair_index(w, a, b)][sa.index()];
                }
            }
        }
        Ok(e)
    }

    pub fn admissible(&self, c: &Configuration) -> bool {
        c.n_sites() == self.n_sites && self.constraints.admits(self.region.iter().map(|&j| c.0[j]))
    }

    pub fn region_space(&self) -> Result<RegionSpace> {
        RegionSpace::enumerate(self.region.len(), &self.constraints, self.cap)
    }

    pub fn gibbs(&self) -> Result<Gibbs> {
        self.validate()?;
        Ok(Gibbs::new(self, Arc::new(self.region_space()?)))
    }

    pub fn n_params(&self) -> usize {
        N_STATES * (self.couplings.len() + self.n_sites)
    }

    /// Couplings (pair-major) followed by fields (site-major).
    pub fn params(&self) -> Vec<f64> {
        self.couplings.iter().chain(&self.fields).flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: p.len() });
        }
        let nc = self.couplings.len();
        for (k, v) in self.couplings.iter_mut().chain(self.fields.iter_mut()).enumerate() {
            v.copy_from_slice(&p[N_STATES * k..N_STATES * (k + 1)]);
        }
        debug_assert_eq!(nc * N_STATES + self.n_sites * N_STATES, p.len());
        Ok(())
    }

    fn coupling_param(&self, pair: usize, s: usize) -> usize {
        N_STATES * pair + s
    }

    fn field_param(&self, site: usize, s: usize) -> usize {
        N_STATES * (self.couplings.len() + site) + s
    }
}

fn softmax(h: &[f64; N_STATES]) -> ([f64; N_STATES], f64) {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; N_STATES];
    let mut z = 0.0;
    for (pk, hk) in p.iter_mut().zip(h) {
        *pk = (hk - m).exp();
        z += *pk;
    }
    p.iter_mut().for_each(|x| *x /= z);
    (p, m + z.ln())
}

/// Exact Gibbs distribution of a model.
#[derive(Debug, Clone)]
pub struct Gibbs {
    pub region: Vec<usize>,
    space: Arc<RegionSpace>,
    /// Probability of each admissible region configuration.
    pub region_probabilities: Vec<f64>,
    /// Single-site marginals for every site.
    pub marginals: Vec<[f64; N_STATES]>,
    log_z: f64,
}

impl Gibbs {
    fn new(m: &BoltzmannModel, space: Arc<RegionSpace>) -> Self {
        let w = m.region.len();
        let mut log_w: Vec<f64> = (0..space.len())
            .map(|k| {
                let cfg = space.config(k);
                let mut x = 0.0;
                for a in 0..w {
                    x += m.fields[m.region[a]][cfg[a] as usize];
                    for b in (a + 1)..w {
                        if cfg[a] == cfg[b] {
                            x += m.couplings[pair_index(w, a, b)][cfg[a] as usize];
                        }
                    }
                }
                x
            })
            .collect();
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_w.iter().map(|x| (x - top).exp()).sum();
        let mut log_z = top + z.ln();
        log_w.iter_mut().for_each(|x| *x = (*x - log_z).exp());
        let region_probabilities = log_w;
        let mut marginals = vec![[0.0; N_STATES]; m.n_sites];
        for j in 0..m.n_sites {
            if m.region.binary_search(&j).is_err() {
                let (p, lz) = softmax(&m.fields[j]);
                marginals[j] = p;
                log_z += lz;
            }
        }
        for (k, p) in region_probabilities.iter().enumerate() {
            for (a, &c) in space.config(k).iter().enumerate() {
                marginals[m.region[a]][c as usize] += p;
            }
        }
        Gibbs { region: m.region.clone(), space, region_probabilities, marginals, log_z }
    }

    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    pub fn space(&self) -> &RegionSpace {
        &self.space
    }

    pub fn n_sites(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginal(&self, site: usize) -> [f64; N_STATES] {
        self.marginals[site]
    }

    /// Joint distribution of two distinct sites, `[s_i][s_j]`.
    pub fn pair_marginal(&self, i: usize, j: usize) -> Result<[[f64; N_STATES]; N_STATES]> {
        let n = self.n_sites();
        for s in [i, j] {
            if s >= n {
                return Err(Error::SiteOutOfRange { site: s, n_sites: n });
            }
        }
        if i == j {
            return Err(Error::CoincidentSites(i));
        }
        let mut out = [[0.0; N_STATES]; N_STATES];
        match (self.region.binary_search(&i), self.region.binary_search(&j)) {
            (Ok(a), Ok(b)) => {
                for (k, p) in self.region_probabilities.iter().enumerate() {
                    let c = self.space.config(k);
                    out[c[a] as usize][c[b] as usize] += p;
                }
            }
            _ => {
                let (pi, pj) = (self.marginals[i], self.marginals[j]);
                for x in 0..N_STATES {
                    for y in 0..N_STATES {
                        out[x][y] = pi[x] * pj[y];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `p(s)`; zero outside the restricted space.
    pub fn probability(&self, c: &Configuration) -> Result<f64> {
        if c.n_sites() != self.n_sites() {
            return Err(Error::DimensionMismatch { expected: self.n_sites(), got: c.n_sites() });
        }
        let codes: Vec<u8> = self.region.iter().map(|&j| c.0[j].index() as u8).collect();
        let Some(k) = self.space.find(&codes) else { return Ok(0.0) };
        let mut p = self.region_probabilities[k];
        for (j, s) in c.0.iter().enumerate() {
            if self.region.binary_search(&j).is_err() {
                p *= self.marginals[j][s.index()];
            }
        }
        Ok(p)
    }
}

/// One-point data per site and two-point data per region pair, one value per
/// basis in [`FIT_BASES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointData {
    pub n_sites: usize,
    pub region: Vec<usize>,
    pub one: Vec<[f64; 4]>,
    /// Region pairs in `(a, b)`, `a < b` order.
    pub two: Vec<[f64; 4]>,
}

impl PointData {
    /// Estimates from one shot batch per basis in [`FIT_BASES`].
    pub fn from_shots(batches: &[ShotBatch], mut region: Vec<usize>) -> Result<Self> {
        region.sort_unstable();
        region.dedup();
        let mut found: [Option<&ShotBatch>; 4] = [None; 4];
        for b in batches {
            if let Some(k) = FIT_BASES.iter().position(|&f| f == b.basis) {
                found[k] = Some(b);
            }
        }
        let mut runs = Vec::with_capacity(4);
        for (k, f) in found.iter().enumerate() {
            match f {
                Some(b) if !b.is_empty() => runs.push(*b),
                _ => return Err(Error::MissingData(format!("no shots in the {} basis", FIT_BASES[k]))),
            }
        }
        let n = runs[0].n_sites;
        if let Some(b) = runs.iter().find(|b| b.n_sites != n) {
            return Err(Error::DimensionMismatch { expected: n, got: b.n_sites });
        }
        if let Some(&s) = region.iter().find(|&&s| s >= n) {
            return Err(Error::SiteOutOfRange { site: s, n_sites: n });
        }
        let means: Vec<Vec<f64>> = runs.iter().map(|b| b.signal_means()).collect();
        let one = (0..n).map(|j| [means[0][j], means[1][j], means[2][j], means[3][j]]).collect();
        let w = region.len();
        let mut two = Vec::with_capacity(pair_count(w));
        for a in 0..w {
            for b in (a + 1)..w {
                let mut v = [0.0; 4];
                for (k, run) in runs.iter().enumerate() {
                    v[k] = run.joint_signal(&[region[a], region[b]], &[true, true])?;
                }
                two.push(v);
            }
        }
        Ok(PointData { n_sites: n, region, one, two })
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<[f64; 4]> {
        let a = self.region.binary_search(&i).ok()?;
        let b = self.region.binary_search(&j).ok()?;
        if a == b {
            return None;
        }
        Some(self.two[pair_index(self.region.len(), a.min(b), a.max(b))])
    }

    fn check_against(&self, m: &BoltzmannModel) -> Result<()> {
        if self.n_sites == 0 || self.one.is_empty() {
            return Err(Error::MissingData("no one-point data".into()));
        }
        if self.n_sites != m.n_sites || self.one.len() != m.n_sites {
            return Err(Error::DimensionMismatch { expected: m.n_sites, got: self.n_sites });
        }
        if self.region != m.region || self.two.len() != m.couplings.len() {
            return Err(Error::MissingData("two-point data must cover every region pair".into()));
        }
        Ok(())
    }
}

fn signal_rows(ch: &ErrorChannel) -> [[f64; N_STATES]; 4] {
    // Reindexed from error-matrix columns to local-state order.
    FIT_BASES.map(|b| {
        let row = ch.row(b);
        LocalState::ALL.map(|s| row[column(s)])
    })
}

/// `⟨n^α_i⟩` and `⟨n^α_i n^α_j⟩` with every true state passed through the
/// detection channel of basis `α`.
pub fn dressed_expectations(m: &BoltzmannModel, ch: &ErrorChannel) -> Result<PointData> {
    let g = m.gibbs()?;
    Ok(dressed_from_gibbs(m, &g, &signal_rows(ch)))
}

fn dressed_from_gibbs(m: &BoltzmannModel, g: &Gibbs, rows: &[[f64; N_STATES]; 4]) -> PointData {
    let one = g
        .marginals
        .iter()
        .map(|p| std::array::from_fn(|b| (0..N_STATES).map(|s| rows[b][s] * p[s]).sum()))
        .collect();
    let w = m.region.len();
    let mut two = vec![[0.0; 4]; pair_count(w)];
    for (k, p) in g.region_probabilities.iter().enumerate() {
        let c = g.space.config(k);
        for a in 0..w {
            for b in (a + 1)..w {
                let t = &mut two[pair_index(w, a, b)];
                for (r, row) in rows.iter().enumerate() {
                    t[r] += p * row[c[a] as usize] * row[c[b] as usize];
                }
            }
        }
    }
    PointData { n_sites: m.n_sites, region: m.region.clone(), one, two }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Damped Gauss-Newton with the exact covariance Jacobian.
    #[default]
    LevenbergMarquardt,
    /// Derivative-free, per-parameter adaptive steps.
    CoordinateSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub w_one: f64,
    pub w_two: f64,
    pub w_lost: f64,
    pub w_target: f64,
    /// Intended configuration, as a string of `d u h g L`.
    #[serde(default)]
    pub target: Option<String>,
    /// Iterations per restart (LM) or cost evaluations per restart (coordinate search).
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Relative cost decrease below which a restart counts as converged.
    pub tolerance: f64,
    /// Spread of the random initial parameters of restarts after the first.
    pub init_spread: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            w_one: 1.0,
            w_two: 1.0,
            w_lost: 0.0,
            w_target: 0.0,
            target: None,
            max_iterations: 200,
            restarts: 4,
            seed: 0,
            optimizer: Optimizer::LevenbergMarquardt,
            tolerance: 1e-10,
            init_spread: 0.5,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_one", self.w_one), ("w_two", self.w_two), ("w_lost", self.w_lost), ("w_target", self.w_target)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Parameter(format!("{name} must be a nonnegative number, got {w}")));
            }
        }
        if self.restarts == 0 {
            return Err(Error::Parameter("at least one restart is needed".into()));
        }
        Ok(())
    }

    fn target_config(&self) -> Result<Option<Configuration>> {
        self.target.as_deref().map(|t| t.parse()).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub one: f64,
    pub two: f64,
    pub lost: f64,
    pub target: f64,
    pub fit: f64,
    pub truth: f64,
}

/// All cost terms of `model` against `data`.
pub fn evaluate_costs(
    m: &BoltzmannModel,
    data: &PointData,
    ch: &ErrorChannel,
    settings: &FitSettings,
) -> Result<CostBreakdown> {
    data.check_against(m)?;
    let ev = Evaluator::new(m, data, ch, settings, Arc::new(m.region_space()?))?;
    Ok(ev.costs(m))
}

struct Evaluator<'a> {
    data: &'a PointData,
    rows: [[f64; N_STATES]; 4],
    weights: [f64; 4],
    target: Option<Configuration>,
    target_slot: Option<usize>,
    space: Arc<RegionSpace>,
}

impl<'a> Evaluator<'a> {
    fn new(
        m: &BoltzmannModel,
        data: &'a PointData,
        ch: &ErrorChannel,
        s: &FitSettings,
        space: Arc<RegionSpace>,
    ) -> Result<Self> {
        let target = s.target_config()?;
        if let Some(t) = &target {
            if t.n_sites() != m.n_sites {
                return Err(Error::DimensionMismatch { expected: m.n_sites, got: t.n_sites() });
            }
        }
        let target_slot = target.as_ref().and_then(|t| {
            let codes: Vec<u8> = m.region.iter().map(|&j| t.0[j].index() as u8).collect();
            space.find(&codes)
        });
        Ok(Evaluator {
            data,
            rows: signal_rows(ch),
            weights: [s.w_one, s.w_two, s.w_lost, s.w_target],
            target,
            target_slot,
            space,
        })
    }

    fn gibbs(&self, m: &BoltzmannModel) -> Gibbs {
        Gibbs::new(m, self.space.clone())
    }

    fn target_probability(&self, m: &BoltzmannModel, g: &Gibbs) -> f64 {
        let Some(t) = &self.target else { return 0.0 };
        let Some(k) = self.target_slot else { return 0.0 };
        let mut p = g.region_probabilities[k];
        for (j, s) in t.0.iter().enumerate() {
            if m.region.binary_search(&j).is_err() {
                p *= g.marginals[j][s.index()];
            }
        }
        p
    }

    fn costs_with(&self, m: &BoltzmannModel, g: &Gibbs) -> CostBreakdown {
        let fit = dressed_from_gibbs(m, g, &self.rows);
        let sq = |a: &[[f64; 4]], b: &[[f64; 4]]| -> f64 {
            a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q))).sum()
        };
        let one = sq(&fit.one, &self.data.one);
        let two = sq(&fit.two, &self.data.two);
        let lost = g.marginals.iter().map(|p| p[LocalState::Lost.index()]).sum();
        let target = if self.target.is_some() { 1.0 - self.target_probability(m, g) } else { 0.0 };
        let [w1, w2, wl, wt] = self.weights;
        CostBreakdown { one, two, lost, target, fit: w1 * one + w2 * two + wl * lost + wt * target, truth: one + two }
    }

    fn costs(&self, m: &BoltzmannModel) -> CostBreakdown {
        self.costs_with(m, &self.gibbs(m))
    }

    fn uses_lost(&self) -> bool {
        self.weights[2] > 0.0
    }

    fn uses_target(&self) -> bool {
        self.weights[3] > 0.0 && self.target.is_some()
    }

    /// Residuals whose squared norm is `cost^fit`.
    fn residuals(&self, m: &BoltzmannModel, g: &Gibbs) -> (DVector<f64>, CostBreakdown) {
        let fit = dressed_from_gibbs(m, g, &self.rows);
        let c = self.costs_with(m, g);
        let [w1, w2, wl, wt] = self.weights.map(f64::sqrt);
        let mut r = Vec::with_capacity(4 * (fit.one.len() + fit.two.len()) + 2);
        for (x, y) in fit.one.iter().zip(&self.data.one) {
            r.extend((0..4).map(|b| w1 * (x[b] - y[b])));
        }
        for (x, y) in fit.two.iter().zip(&self.data.two) {
            r.extend((0..4).map(|b| w2 * (x[b] - y[b])));
        }
        if self.uses_lost() {
            r.push(wl * c.lost.max(0.0).sqrt());
        }
        if self.uses_target() {
            r.push(wt * c.target.max(0.0).sqrt());
        }
        (DVector::from_vec(r), c)
    }

    /// Jacobian of [`Self::residuals`] with respect to [`BoltzmannModel::params`].
    fn jacobian(&self, m: &BoltzmannModel, g: &Gibbs, r: &DVector<f64>) -> DMatrix<f64> {
        let n = m.n_sites;
        let w = m.region.len();
        let np = pair_count(w);
        let n_rows = r.len();
        let mut jac = DMatrix::zeros(n_rows, m.n_params());
        let [w1, w2, wl, wt] = self.weights.map(f64::sqrt);
        let lost_row = self.uses_lost().then_some(4 * (n + np));
        let target_row = self.uses_target().then(|| 4 * (n + np) + usize::from(self.uses_lost()));
        let p_target = self.target_probability(m, g);

        // Region: d⟨f⟩/dθ_k = Cov(f, φ_k) with φ the sufficient statistics.
        // Observables: one-point (4w), two-point (4np), lost (w), target (1).
        if w > 0 {
            let n_obs = 4 * w + 4 * np + w + 1;
            let n_feat = N_STATES * (np + w);
            let mut mean_f = vec![0.0; n_obs];
            let mut mean_phi = vec![0.0; n_feat];
            let mut cross = DMatrix::<f64>::zeros(n_obs, n_feat);
            let mut f = vec![0.0; n_obs];
            let mut feats = Vec::with_capacity(np + w);
            for (k, &p) in g.region_probabilities.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let c = self.space.config(k);
                f.iter_mut().for_each(|x| *x = 0.0);
                feats.clear();
                for a in 0..w {
                    let sa = c[a] as usize;
                    for bsn in 0..4 {
                        f[4 * a + bsn] = self.rows[bsn][sa];
                    }
                    f[4 * w + 4 * np + a] = f64::from(u8::from(sa == LocalState::Lost.index()));
                    feats.push(N_STATES * (np + a) + sa);
                    for b in (a + 1)..w {
                        let sb = c[b] as usize;
                        let pi = pair_index(w, a, b);
                        for bsn in 0..4 {
                            f[4 * w + 4 * pi + bsn] = self.rows[bsn][sa] * self.rows[bsn][sb];
                        }
                        if sa == sb {
                            feats.push(N_STATES * pi + sa);
                        }
                    }
                }
                f[n_obs - 1] = f64::from(u8::from(Some(k) == self.target_slot));
                for (mf, x) in mean_f.iter_mut().zip(&f) {
                    *mf += p * x;
                }
                for &q in &feats {
                    mean_phi[q] += p;
                    let mut col = cross.column_mut(q);
                    for (o, x) in f.iter().enumerate() {
                        col[o] += p * x;
                    }
                }
            }
            let cov = |o: usize, q: usize| cross[(o, q)] - mean_f[o] * mean_phi[q];
            let param_of = |q: usize| {
                if q < N_STATES * np {
                    m.coupling_param(q / N_STATES, q % N_STATES)
                } else {
                    let a = q / N_STATES - np;
                    m.field_param(m.region[a], q % N_STATES)
                }
            };
            let outside_target: f64 = if self.target_slot.is_some() {
                p_target / mean_f[n_obs - 1].max(f64::MIN_POSITIVE)
            } else {
                0.0
            };
            for q in 0..n_feat {
                let col = param_of(q);
                for a in 0..w {
                    for bsn in 0..4 {
                        jac[(4 * m.region[a] + bsn, col)] = w1 * cov(4 * a + bsn, q);
                    }
                }
                for pi in 0..np {
                    for bsn in 0..4 {
                        jac[(4 * n + 4 * pi + bsn, col)] = w2 * cov(4 * w + 4 * pi + bsn, q);
                    }
                }
                if let Some(row) = lost_row {
                    let d: f64 = (0..w).map(|a| cov(4 * w + 4 * np + a, q)).sum();
                    jac[(row, col)] = wl * wl * d / (2.0 * r[row].max(1e-12));
                }
                if let Some(row) = target_row {
                    let d = -outside_target * cov(n_obs - 1, q);
                    jac[(row, col)] = wt * wt * d / (2.0 * r[row].max(1e-12));
                }
            }
        }

        // Outside sites: independent softmax per site.
        for j in (0..n).filter(|j| m.region.binary_search(j).is_err()) {
            let p = g.marginals[j];
            for gamma in 0..N_STATES {
                let col = m.field_param(j, gamma);
                for bsn in 0..4 {
                    let fval: f64 = (0..N_STATES).map(|s| self.rows[bsn][s] * p[s]).sum();
                    jac[(4 * j + bsn, col)] = w1 * p[gamma] * (self.rows[bsn][gamma] - fval);
                }
                if let Some(row) = lost_row {
                    let l = LocalState::Lost.index();
                    let d = p[l] * (f64::from(u8::from(gamma == l)) - p[gamma]);
                    jac[(row, col)] = wl * wl * d / (2.0 * r[row].max(1e-12));
                }
                if let (Some(row), Some(t)) = (target_row, &self.target) {
                    let tj = t.0[j].index();
                    let d = -p_target * (f64::from(u8::from(gamma == tj)) - p[gamma]);
                    jac[(row, col)] = wt * wt * d / (2.0 * r[row].max(1e-12));
                }
            }
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: BoltzmannModel,
    pub costs: CostBreakdown,
    /// `cost^fit` after each accepted step of the winning restart.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub restart: usize,
    /// Final `cost^true` of every restart.
    pub restart_costs: Vec<f64>,
}

struct RestartOutcome {
    model: BoltzmannModel,
    costs: CostBreakdown,
    trace: Vec<f64>,
    converged: bool,
}

/// Fits fields and couplings of `structure` to `data`. With `w_two = 0` the
/// couplings stay at zero, which is the independent per-site error budget.
pub fn fit(
    data: &PointData,
    structure: &BoltzmannModel,
    ch: &ErrorChannel,
    settings: &FitSettings,
) -> Result<FitResult> {
    settings.validate()?;
    structure.validate()?;
    data.check_against(structure)?;
    let space = Arc::new(structure.region_space()?);
    let ev = Evaluator::new(structure, data, ch, settings, space)?;
    let n_params = structure.n_params();
    let n_coupling = N_STATES * structure.couplings.len();
    let free: Vec<usize> = if settings.w_two > 0.0 { (0..n_params).collect() } else { (n_coupling..n_params).collect() };

    let outcomes: Vec<RestartOutcome> = (0..settings.restarts)
        .into_par_iter()
        .map(|r| {
            let mut m = structure.clone();
            let mut p = m.params();
            if settings.w_two == 0.0 {
                p[..n_coupling].iter_mut().for_each(|x| *x = 0.0);
            }
            if r > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(r as u64);
                for &k in &free {
                    p[k] += settings.init_spread * (2.0 * rng.gen::<f64>() - 1.0);
                }
            }
            m.set_params(&p).expect("length preserved");
            let run = |m: BoltzmannModel, free: &[usize], s: &FitSettings| match settings.optimizer {
                Optimizer::LevenbergMarquardt => levenberg_marquardt(&ev, m, free, s),
                Optimizer::CoordinateSearch => coordinate_search(&ev, m, free, s),
            };
            if free.len() == n_params - n_coupling {
                return run(m, &free, settings);
            }
            // Fields first: starting the couplings against matched marginals keeps
            // them from running into saturated corners.
            let fields: Vec<usize> = (n_coupling..n_params).collect();
            let warm = FitSettings { max_iterations: settings.max_iterations / 4, ..settings.clone() };
            let start = run(m, &fields, &warm);
            let mut out = run(start.model, &free, settings);
            let mut trace = start.trace;
            trace.extend(out.trace.drain(1..));
            out.trace = trace;
            out
        })
        .collect();
    let restart_costs: Vec<f64> = outcomes.iter().map(|o| o.costs.truth).collect();
    let (best, o) = outcomes
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.costs.truth.total_cmp(&b.1.costs.truth))
        .expect("at least one restart");
    Ok(FitResult { model: o.model, costs: o.costs, trace: o.trace, converged: o.converged, restart: best, restart_costs })
}

/// Largest change of any single parameter in one LM step.
const MAX_STEP: f64 = 2.0;

fn levenberg_marquardt(ev: &Evaluator<'_>, mut m: BoltzmannModel, free: &[usize], s: &FitSettings) -> RestartOutcome {
    let mut g = ev.gibbs(&m);
    let (mut r, mut costs) = ev.residuals(&m, &g);
    let mut trace = vec![costs.fit];
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..s.max_iterations {
        if costs.fit < 1e-30 {
            converged = true;
            break;
        }
        let full = ev.jacobian(&m, &g, &r);
        let jac = full.select_columns(free);
        let grad = jac.transpose() * &r;
        if grad.amax() < 1e-15 {
            converged = true;
            break;
        }
        let a = jac.transpose() * &jac;
        let scale = a.diagonal().mean().max(1e-12);
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = a.clone();
            for k in 0..free.len() {
                damped[(k, k)] += lambda * scale;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 4.0;
                continue;
            };
            let mut step = chol.solve(&(-&grad));
            let longest = step.amax();
            if longest > MAX_STEP {
                step *= MAX_STEP / longest;
            }
            let mut trial = m.clone();
            let mut p = trial.params();
            for (k, &idx) in free.iter().enumerate() {
                p[idx] += step[k];
            }
            trial.set_params(&p).expect("length preserved");
            let tg = ev.gibbs(&trial);
            let (tr, tc) = ev.residuals(&trial, &tg);
            if tc.fit.is_finite() && tc.fit < costs.fit {
                let rel = (costs.fit - tc.fit) / costs.fit.max(f64::MIN_POSITIVE);
                m = trial;
                g = tg;
                r = tr;
                costs = tc;
                trace.push(costs.fit);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < s.tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }
    RestartOutcome { model: m, costs, trace, converged }
}

fn coordinate_search(ev: &Evaluator<'_>, mut m: BoltzmannModel, free: &[usize], s: &FitSettings) -> RestartOutcome {
    let mut costs = ev.costs(&m);
    let mut trace = vec![costs.fit];
    let mut steps = vec![0.5; free.len()];
    let mut p = m.params();
    let mut evals = 0;
    let mut converged = false;
    while evals < s.max_iterations {
        if steps.iter().all(|&x| x < 1e-8) {
            converged = true;
            break;
        }
        let before = costs.fit;
        for (k, &idx) in free.iter().enumerate() {
            let mut improved = false;
            for dir in [1.0, -1.0] {
                let old = p[idx];
                p[idx] = old + dir * steps[k];
                m.set_params(&p).expect("length preserved");
                let c = ev.costs(&m);
                evals += 1;
                if c.fit < costs.fit {
                    costs = c;
                    improved = true;
                    break;
                }
                p[idx] = old;
            }
            steps[k] *= if improved { 1.5 } else { 0.5 };
            if evals >= s.max_iterations {
                break;
            }
        }
        m.set_params(&p).expect("length preserved");
        trace.push(costs.fit);
        if before - costs.fit <= s.tolerance * before && steps.iter().all(|&x| x < 1e-6) {
            converged = true;
            break;
        }
    }
    m.set_params(&p).expect("length preserved");
    RestartOutcome { costs: ev.costs(&m), model: m, trace, converged }
}

/// I.i.d. draws from `p(s)`.
pub fn sample_initial_configurations(m: &BoltzmannModel, n: usize, seed: u64) -> Result<Vec<Configuration>> {
    let g = m.gibbs()?;
    let region_dist = WeightedIndex::new(&g.region_probabilities).map_err(|e| Error::Parameter(e.to_string()))?;
    let outside: Vec<Option<WeightedIndex<f64>>> = (0..m.n_sites)
        .map(|j| {
            if m.region.binary_search(&j).is_ok() {
                Ok(None)
            } else {
                WeightedIndex::new(g.marginals[j]).map(Some).map_err(|e| Error::Parameter(e.to_string()))
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let cfg = g.space.config(region_dist.sample(&mut rng));
            let mut states = vec![LocalState::Down; m.n_sites];
            for (a, &j) in m.region.iter().enumerate() {
                states[j] = state_of(cfg[a]);
            }
            for (j, d) in outside.iter().enumerate() {
                if let Some(d) = d {
                    states[j] = LocalState::ALL[d.sample(&mut rng)];
                }
            }
            Configuration(states)
        })
        .collect())
}

/// The `size` sites closest to any of `defects`, ties broken by index.
pub fn default_region(g: &LatticeGeometry, defects: &[usize], size: usize) -> Result<Vec<usize>> {
    for &d in defects {
        g.check_site(d)?;
    }
    if defects.is_empty() {
        return Err(Error::Parameter("a region needs at least one defect site".into()));
    }
    let mut sites: Vec<(f64, usize)> = (0..g.n_sites())
        .map(|i| {
            let d = defects.iter().map(|&k| g.distance(i, k).unwrap_or(0.0)).fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    sites.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = sites.into_iter().take(size).map(|(_, i)| i).collect();
    out.sort_unstable();
    Ok(out)
}

/// A drawn configuration turned into a pure initial state. Ground and lost
/// atoms are removed from the lattice; everything else is a basis state of the
/// sector it happens to land in.
#[derive(Debug, Clone)]
pub struct SeededSystem {
    pub n_sites: usize,
    /// Original indices of the sites that take part in the dynamics.
    pub active: Vec<usize>,
    /// Inert sites and their frozen states.
    pub inert: Vec<(usize, LocalState)>,
    pub geometry: LatticeGeometry,
    pub couplings: CouplingSet,
    pub basis: SectorBasis,
    pub state: StateVector,
}

pub fn seed_dynamics(config: &Configuration, g: &LatticeGeometry, c: &CouplingSet) -> Result<SeededSystem> {
    if config.n_sites() != g.n_sites() {
        return Err(Error::DimensionMismatch { expected: g.n_sites(), got: config.n_sites() });
    }
    let (active, inert): (Vec<usize>, Vec<usize>) = (0..config.n_sites()).partition(|&i| config.0[i].is_physical());
    if active.is_empty() {
        return Err(Error::Parameter("every site is inert".into()));
    }
    let positions: Vec<[f64; 2]> = active.iter().map(|&i| g.position(i)).collect();
    let geometry = LatticeGeometry::from_coordinates(g.kind(), positions, g.a(), g.h())?;
    let mut couplings = c.clone();
    couplings.overrides = c
        .overrides
        .iter()
        .filter_map(|o| {
            let i = active.binary_search(&o.i).ok()?;
            let j = active.binary_search(&o.j).ok()?;
            Some(crate::hamiltonian::BondOverride { i, j, couplings: o.couplings })
        })
        .collect();
    let reduced = Configuration(active.iter().map(|&i| config.0[i]).collect());
    let basis = SectorBasis::new(
        reduced.n_sites(),
        reduced.count(LocalState::Hole),
        Some(reduced.count(LocalState::Up)),
    )?;
    let state = StateVector::basis_state(&basis, &reduced)?;
    Ok(SeededSystem {
        n_sites: config.n_sites(),
        inert: inert.iter().map(|&i| (i, config.0[i])).collect(),
        active,
        geometry,
        couplings,
        basis,
        state,
    })
}

impl SeededSystem {
    /// Reduced indices of the listed original sites; inert ones are dropped.
    pub fn remap_sites(&self, sites: &[usize]) -> Vec<usize> {
        sites.iter().filter_map(|s| self.active.binary_search(s).ok()).collect()
    }

    /// Full configuration from a reduced basis word.
    pub fn embed(&self, word: u128) -> Configuration {
        let mut states = vec![LocalState::Down; self.n_sites];
        for (k, &i) in self.active.iter().enumerate() {
            states[i] = site_state(word, k);
        }
        for &(i, s) in &self.inert {
            states[i] = s;
        }
        Configuration(states)
    }
}
