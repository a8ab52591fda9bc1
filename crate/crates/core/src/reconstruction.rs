//! Correlators from single-basis statistics.
//!
//! Each basis only resolves "σ or not σ" per site, so the nine two-site
//! occupation correlators are seen through a 12×9 linear map of rank 8. A
//! handful of combinations survive that projection in closed form; those are
//! the primary outputs here.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measurement::{column, ErrorChannel, MeasurementBasis, OutcomeModel, ShotBatch};
use crate::hilbert::LocalState;
use crate::observables::{neighbor_triangles, CorrelatorEntry, CorrelatorIndex, CorrelatorTable, HoleMagnonPairs, SpinAxis};
use crate::geometry::LatticeGeometry;

/// Labels of the twelve measured quantities, basis-major: `↑`, `h`, `↓`.
pub const MEASUREMENT_LABELS: [&str; 12] =
    ["↑↑", "↑¬↑", "¬↑↑", "¬↑¬↑", "hh", "h¬h", "¬hh", "¬h¬h", "↓↓", "↓¬↓", "¬↓↓", "¬↓¬↓"];

/// Labels of the nine two-site correlators `⟨n_σ n_τ⟩`.
pub const CORRELATOR_LABELS: [&str; 9] = ["↑↑", "↑h", "↑↓", "h↑", "hh", "h↓", "↓↑", "↓h", "↓↓"];

const A_ROWS: [[u8; 9]; 12] = [
    [1, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 1, 0, 0, 1, 0, 0],
    [0, 0, 0, 0, 1, 1, 0, 1, 1],
    [0, 0, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 1, 0, 1, 0, 0, 0],
    [0, 1, 0, 0, 0, 0, 0, 1, 0],
    [1, 0, 1, 0, 0, 0, 1, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 1, 1, 0],
    [0, 0, 1, 0, 0, 1, 0, 0, 0],
    [1, 1, 0, 1, 1, 0, 0, 0, 0],
];

/// Two-site signal patterns in measurement order.
const PAIR_PATTERNS: [[bool; 2]; 4] = [[true, true], [true, false], [false, true], [false, false]];

const SVD_EPS: f64 = 1e-10;

/// Coefficients over the twelve measurements.
const SPIN_SPIN_M: [f64; 12] = [1., 0., 0., 1., -1., 0., 0., 0., 0., -1., -1., 0.];
const HOLE_SZ_M: [f64; 12] = [-1., 0., 0., -1., 0., 0., 0., 0., 1., 0., 0., 1.];
const HOLE_UP_M: [f64; 12] = [-1., 0., 0., 0., -1., 0., 0., 0., 0., 0., 0., 1.];

/// Coefficients over the nine correlators.
const SPIN_SPIN_C: [f64; 9] = [1., 0., -1., 0., 0., 0., -1., 0., 1.];
const HOLE_SZ_C: [f64; 9] = [0., 1., 0., 1., 0., -1., 0., -1., 0.];
const HOLE_UP_C: [f64; 9] = [0., 1., 0., 1., 0., 0., 0., 0., 0.];

/// Coefficients over the 24 three-site measurements (basis-major, patterns
/// ordered with the first site as the most significant "not" bit).
const THREE_BODY_M: [[f64; 8]; 3] = [
    [0., 1., 1., 0., 1., 0., 0., 1.],
    [-1., 0., 0., 0., 0., 0., 0., 0.],
    [-1., 0., 0., -1., 0., -1., -1., 0.],
];

fn triple_pattern(k: usize) -> [bool; 3] {
    [k & 4 == 0, k & 2 == 0, k & 1 == 0]
}

/// The fixed linear system `M = A C`.
#[derive(Debug, Clone)]
pub struct ReconstructionSystem {
    pub a: DMatrix<f64>,
    pub rank: usize,
    /// Unit vector spanning the null space of `A`.
    pub null_vector: DVector<f64>,
}

pub fn build_system() -> ReconstructionSystem {
    let a = DMatrix::from_fn(12, 9, |r, c| A_ROWS[r][c] as f64);
    let svd = a.clone().svd(false, true);
    let rank = svd.rank(SVD_EPS);
    let v_t = svd.v_t.expect("requested V");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(k, _)| k)
        .expect("nine singular values");
    let mut null_vector = v_t.row(k).transpose().into_owned();
    // Fix the sign so that the ↑h component is positive.
    if null_vector[1] < 0.0 {
        null_vector = -null_vector;
    }
    ReconstructionSystem { a, rank, null_vector }
}

/// Anything that can report joint signal probabilities in one basis.
pub trait SignalSource: Sync {
    fn measurement_basis(&self) -> MeasurementBasis;
    fn n_sites(&self) -> usize;
    fn joint_signal(&self, sites: &[usize], pattern: &[bool]) -> Result<f64>;
    /// Number of shots behind the estimate, `None` for exact probabilities.
    fn shot_count(&self) -> Option<usize> {
        None
    }
}

impl SignalSource for OutcomeModel {
    fn measurement_basis(&self) -> MeasurementBasis {
        OutcomeModel::measurement_basis(self)
    }

    fn n_sites(&self) -> usize {
        OutcomeModel::n_sites(self)
    }

    fn joint_signal(&self, sites: &[usize], pattern: &[bool]) -> Result<f64> {
        OutcomeModel::joint_signal(self, sites, pattern)
    }
}

impl SignalSource for ShotBatch {
    fn measurement_basis(&self) -> MeasurementBasis {
        self.basis
    }

    fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn joint_signal(&self, sites: &[usize], pattern: &[bool]) -> Result<f64> {
        ShotBatch::joint_signal(self, sites, pattern)
    }

    fn shot_count(&self) -> Option<usize> {
        Some(self.len())
    }
}

/// The three runs feeding a reconstruction. For the `z` axis these are the
/// up, hole and down bases; for `x` the `x_+`, hole and `x_−` bases take the
/// roles of up and down.
pub struct BasisTriple<'a> {
    pub up: &'a dyn SignalSource,
    pub hole: &'a dyn SignalSource,
    pub down: &'a dyn SignalSource,
    pub axis: SpinAxis,
}

impl<'a> BasisTriple<'a> {
    pub fn new(
        up: &'a dyn SignalSource,
        hole: &'a dyn SignalSource,
        down: &'a dyn SignalSource,
        axis: SpinAxis,
    ) -> Result<Self> {
        let ok_up = match axis {
            SpinAxis::Z => matches!(up.measurement_basis(), MeasurementBasis::Up | MeasurementBasis::UpPresence),
            SpinAxis::X => up.measurement_basis() == MeasurementBasis::XPlus,
        };
        let ok_down = match axis {
            SpinAxis::Z => down.measurement_basis() == MeasurementBasis::Down,
            SpinAxis::X => down.measurement_basis() == MeasurementBasis::XMinus,
        };
        for (ok, src, role) in [
            (ok_up, up, "up"),
            (hole.measurement_basis() == MeasurementBasis::Hole, hole, "hole"),
            (ok_down, down, "down"),
        ] {
            if !ok {
                return Err(Error::Basis {
                    basis: src.measurement_basis().tag().into(),
                    reason: format!("cannot serve as the {role} run for the {axis:?} axis"),
                });
            }
        }
        let n = up.n_sites();
        for src in [hole, down] {
            if src.n_sites() != n {
                return Err(Error::DimensionMismatch { expected: n, got: src.n_sites() });
            }
        }
        Ok(BasisTriple { up, hole, down, axis })
    }

    pub fn n_sites(&self) -> usize {
        self.up.n_sites()
    }

    fn sources(&self) -> [&'a dyn SignalSource; 3] {
        [self.up, self.hole, self.down]
    }

    /// Shot counts per run, if all three are sampled.
    pub fn shot_counts(&self) -> Option<[usize; 3]> {
        Some([self.up.shot_count()?, self.hole.shot_count()?, self.down.shot_count()?])
    }

    pub fn pair_vector(&self, i: usize, j: usize) -> Result<MeasuredPairVector> {
        if i == j {
            return Err(Error::CoincidentSites(i));
        }
        let mut values = [0.0; 12];
        for (b, src) in self.sources().iter().enumerate() {
            for (k, p) in PAIR_PATTERNS.iter().enumerate() {
                values[4 * b + k] = src.joint_signal(&[i, j], p)?;
            }
        }
        Ok(MeasuredPairVector { values })
    }

    pub fn triple_vector(&self, sites: [usize; 3]) -> Result<ThreeSiteVector> {
        if sites[0] == sites[1] || sites[0] == sites[2] || sites[1] == sites[2] {
            return Err(Error::CoincidentSites(if sites[0] == sites[1] || sites[0] == sites[2] { sites[0] } else { sites[1] }));
        }
        let mut values = [[0.0; 8]; 3];
        for (b, src) in self.sources().iter().enumerate() {
            for (k, v) in values[b].iter_mut().enumerate() {
                *v = src.joint_signal(&sites, &triple_pattern(k))?;
            }
        }
        Ok(ThreeSiteVector { values })
    }

    /// Single-site populations `(n^↑, n^h, n^↓)` (or `(n^+, n^h, n^−)`).
    pub fn populations(&self, site: usize) -> Result<[f64; 3]> {
        Ok([
            self.up.joint_signal(&[site], &[true])?,
            self.hole.joint_signal(&[site], &[true])?,
            self.down.joint_signal(&[site], &[true])?,
        ])
    }
}

/// The twelve two-site outcome probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredPairVector {
    pub values: [f64; 12],
}

impl MeasuredPairVector {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.values)
    }

    /// Largest deviation of a basis's four entries from summing to one.
    pub fn normalization_error(&self) -> f64 {
        (0..3)
            .map(|b| (self.values[4 * b..4 * b + 4].iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// The reconstructable two-site combinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCombos {
    /// `4⟨S S⟩`.
    pub spin_spin: f64,
    /// `2(⟨n^h S⟩ + ⟨S n^h⟩)`.
    pub sym_hole_sz: f64,
    /// `⟨n^h n^↑⟩ + ⟨n^↑ n^h⟩`.
    pub sym_hole_up: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn reconstruct_pair_combos(m: &MeasuredPairVector) -> PairCombos {
    PairCombos {
        spin_spin: dot(&SPIN_SPIN_M, &m.values),
        sym_hole_sz: dot(&HOLE_SZ_M, &m.values),
        sym_hole_up: dot(&HOLE_UP_M, &m.values),
    }
}

/// The same combinations evaluated on a full correlator vector.
pub fn combos_from_correlators(c: &[f64; 9]) -> PairCombos {
    PairCombos {
        spin_spin: dot(&SPIN_SPIN_C, c),
        sym_hole_sz: dot(&HOLE_SZ_C, c),
        sym_hole_up: dot(&HOLE_UP_C, c),
    }
}

/// Standard error of `Σ c_k p̂_k` when each basis's patterns come from an
/// independent multinomial sample.
pub fn linear_stderr(probabilities: &[&[f64]], coefficients: &[&[f64]], shots: &[usize]) -> f64 {
    probabilities
        .iter()
        .zip(coefficients)
        .zip(shots)
        .map(|((p, c), &n)| {
            let mean = dot(p, c);
            let second: f64 = p.iter().zip(c.iter()).map(|(p, c)| p * c * c).sum();
            (second - mean * mean).max(0.0) / n.max(1) as f64
        })
        .sum::<f64>()
        .sqrt()
}

impl PairCombos {
    /// Binomial standard errors of the three combinations.
    pub fn stderr(m: &MeasuredPairVector, shots: [usize; 3]) -> PairCombos {
        let v = &m.values;
        let p: [&[f64]; 3] = [&v[0..4], &v[4..8], &v[8..12]];
        let one = |c: &[f64; 12]| linear_stderr(&p, &[&c[0..4], &c[4..8], &c[8..12]], &shots);
        PairCombos { spin_spin: one(&SPIN_SPIN_M), sym_hole_sz: one(&HOLE_SZ_M), sym_hole_up: one(&HOLE_UP_M) }
    }
}

/// The 24 three-site outcome probabilities, `values[basis][pattern]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeSiteVector {
    pub values: [[f64; 8]; 3],
}

/// `4(⟨n^h S S⟩ + ⟨S n^h S⟩ + ⟨S S n^h⟩)`.
pub fn reconstruct_three_body(m: &ThreeSiteVector) -> f64 {
    (0..3).map(|b| dot(&THREE_BODY_M[b], &m.values[b])).sum()
}

pub fn three_body_stderr(m: &ThreeSiteVector, shots: [usize; 3]) -> f64 {
    let p: Vec<&[f64]> = m.values.iter().map(|r| r.as_slice()).collect();
    let c: Vec<&[f64]> = THREE_BODY_M.iter().map(|r| r.as_slice()).collect();
    linear_stderr(&p, &c, &shots)
}

/// Minimum-norm least-squares correlators. The component along
/// `null_vector` is not determined by the data and is set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    pub correlators: [f64; 9],
    pub residual: f64,
    pub null_vector: DVector<f64>,
    pub undetermined: bool,
}

pub fn solve_min_norm(system: &ReconstructionSystem, m: &MeasuredPairVector) -> Result<MinNormSolution> {
    let b = m.as_vector();
    let svd = system.a.clone().svd(true, true);
    let x = svd.solve(&b, SVD_EPS).map_err(|e| Error::Parameter(e.to_string()))?;
    let residual = (&system.a * &x - &b).norm();
    let mut c = [0.0; 9];
    c.copy_from_slice(x.as_slice());
    Ok(MinNormSolution { correlators: c, residual, null_vector: system.null_vector.clone(), undetermined: system.rank < 9 })
}

/// Norm of the part of `m` outside the column space of `A`.
pub fn consistency_residual(system: &ReconstructionSystem, m: &MeasuredPairVector) -> f64 {
    solve_min_norm(system, m).map(|s| s.residual).unwrap_or(f64::INFINITY)
}

/// Signal probabilities per run and true species, `q[run][species]` with
/// runs `(up, hole, down)` and species in correlator order `(↑, h, ↓)`.
pub type SignalTable = [[f64; 3]; 3];

pub fn ideal_signal_table() -> SignalTable {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// The signal table of a detection channel for the `z` pipeline.
pub fn channel_signal_table(ch: &ErrorChannel) -> SignalTable {
    let species = [LocalState::Up, LocalState::Hole, LocalState::Down];
    let rows = [MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down].map(|b| ch.row(b));
    let mut q = [[0.0; 3]; 3];
    for (r, row) in rows.iter().enumerate() {
        for (s, &sp) in species.iter().enumerate() {
            q[r][s] = row[column(sp)];
        }
    }
    q
}

/// `A_ε`: row `(run, pattern)`, column `(β, γ)` holds the probability that a
/// pair truly in `(β, γ)` shows that pattern.
pub fn dressed_matrix(q: &SignalTable) -> DMatrix<f64> {
    DMatrix::from_fn(12, 9, |r, c| {
        let run = r / 4;
        let [a, b] = PAIR_PATTERNS[r % 4];
        let (beta, gamma) = (c / 3, c % 3);
        let f = |want: bool, p: f64| if want { p } else { 1.0 - p };
        f(a, q[run][beta]) * f(b, q[run][gamma])
    })
}

/// Undoes a known per-site detection channel on pair statistics.
#[derive(Debug, Clone)]
pub struct ErrorInversion {
    a_eps: DMatrix<f64>,
}

impl ErrorInversion {
    pub fn new(q: &SignalTable) -> Self {
        ErrorInversion { a_eps: dressed_matrix(q) }
    }

    pub fn from_channel(ch: &ErrorChannel) -> Self {
        Self::new(&channel_signal_table(ch))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a_eps
    }

    /// Minimum-norm correlators explaining the dressed statistics.
    pub fn correlators(&self, m: &MeasuredPairVector) -> Result<[f64; 9]> {
        let svd = self.a_eps.clone().svd(true, true);
        let x = svd.solve(&m.as_vector(), SVD_EPS).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut c = [0.0; 9];
        c.copy_from_slice(x.as_slice());
        Ok(c)
    }

    pub fn combos(&self, m: &MeasuredPairVector) -> Result<PairCombos> {
        Ok(combos_from_correlators(&self.correlators(m)?))
    }
}

/// Pair-resolved combinations for all `i < j`, as three pair tables
/// (`spin_spin`, `sym_hole_sz`, `sym_hole_up`) with both orderings filled.
pub fn reconstruct_pair_tables(src: &BasisTriple<'_>) -> Result<[CorrelatorTable; 3]> {
    let n = src.n_sites();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let combos = pairs
        .par_iter()
        .map(|&(i, j)| src.pair_vector(i, j).map(|m| reconstruct_pair_combos(&m)))
        .collect::<Result<Vec<_>>>()?;
    let axis = match src.axis {
        SpinAxis::X => "x",
        SpinAxis::Z => "z",
    };
    let mut out: [Vec<CorrelatorEntry>; 3] = Default::default();
    for (&(i, j), c) in pairs.iter().zip(&combos) {
        for (k, v) in [c.spin_spin, c.sym_hole_sz, c.sym_hole_up].into_iter().enumerate() {
            for idx in [CorrelatorIndex::Pair(i, j), CorrelatorIndex::Pair(j, i)] {
                out[k].push(CorrelatorEntry { index: idx, value: v, count: 1 });
            }
        }
    }
    let [a, b, c] = out;
    Ok([
        CorrelatorTable::new(format!("4<S{axis} S{axis}>"), a)?,
        CorrelatorTable::new(format!("2(<nh S{axis}> + <S{axis} nh>)"), b)?,
        CorrelatorTable::new("<nh nu> + <nu nh>", c)?,
    ])
}

/// Hole-up pair record from the `z` runs, ready for the map, distance and COM observables.
pub fn hole_magnon_pairs(src: &BasisTriple<'_>) -> Result<HoleMagnonPairs> {
    if src.axis != SpinAxis::Z {
        return Err(Error::Basis { basis: "x".into(), reason: "hole-up pairs need the z runs".into() });
    }
    let n = src.n_sites();
    let pops = (0..n).map(|s| src.populations(s)).collect::<Result<Vec<_>>>()?;
    let [_, _, table] = reconstruct_pair_tables(src)?;
    let mut joint = DMatrix::zeros(n, n);
    for e in &table.entries {
        if let CorrelatorIndex::Pair(i, j) = e.index {
            joint[(i, j)] = 0.5 * e.value;
        }
    }
    HoleMagnonPairs::from_symmetric(pops.iter().map(|p| p[1]).collect(), pops.iter().map(|p| p[0]).collect(), joint)
}

/// Connected `⟨S_i S_j⟩` matrix with the `(1 − n^h)/4` diagonal, for the structure factor.
pub fn spin_correlation_matrix(src: &BasisTriple<'_>) -> Result<DMatrix<f64>> {
    let n = src.n_sites();
    let pops = (0..n).map(|s| src.populations(s)).collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = pops.iter().map(|p| 0.5 * (p[0] - p[2])).collect();
    let [ss, _, _] = reconstruct_pair_tables(src)?;
    let mut c = DMatrix::zeros(n, n);
    for e in &ss.entries {
        if let CorrelatorIndex::Pair(i, j) = e.index {
            c[(i, j)] = 0.25 * e.value - s[i] * s[j];
        }
    }
    for i in 0..n {
        c[(i, i)] = 0.25 * (1.0 - pops[i][1]);
    }
    Ok(c)
}

/// Symmetrized third-order cumulant of `n^h S S` on a triple. Only the
/// cumulant convention is reconstructable: every lower-order term it needs
/// enters in a symmetric combination.
pub fn connected_three_body(src: &BasisTriple<'_>, sites: [usize; 3]) -> Result<f64> {
    let t = reconstruct_three_body(&src.triple_vector(sites)?);
    let pops = sites.map(|s| src.populations(s));
    let mut nh = [0.0; 3];
    let mut sz = [0.0; 3];
    for (k, p) in pops.into_iter().enumerate() {
        let p = p?;
        nh[k] = p[1];
        sz[k] = 0.5 * (p[0] - p[2]);
    }
    let mut total = 0.25 * t;
    for r in 0..3 {
        let (a, b) = ((r + 1) % 3, (r + 2) % 3);
        let c = reconstruct_pair_combos(&src.pair_vector(sites[a], sites[b])?);
        // ⟨S_a S_b⟩ pairs with n_r; (⟨n_a S_b⟩ + ⟨S_a n_b⟩) pairs with S_r.
        total -= nh[r] * 0.25 * c.spin_spin;
        total -= sz[r] * 0.5 * c.sym_hole_sz;
        total += 2.0 * nh[r] * sz[a] * sz[b];
    }
    Ok(total / 3.0)
}

/// Reconstructed counterpart of the nearest-neighbour hole-frame sum.
pub fn hole_frame_nearest_neighbor(src: &BasisTriple<'_>, g: &LatticeGeometry) -> Result<f64> {
    if g.n_sites() != src.n_sites() {
        return Err(Error::DimensionMismatch { expected: g.n_sites(), got: src.n_sites() });
    }
    let tris = neighbor_triangles(g);
    if tris.is_empty() {
        return Err(Error::NoAnchor);
    }
    let vals = tris.par_iter().map(|&t| connected_three_body(src, t)).collect::<Result<Vec<f64>>>()?;
    Ok(3.0 * vals.iter().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StateVector;
    use crate::hilbert::{Configuration, SectorBasis};
    use crate::measurement::{embed_free, sample_shots};
    use crate::observables::{product_expectation, three_body_at_sites, ConnectedConvention, SiteOp, Species};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_state(basis: &SectorBasis, seed: u64) -> StateVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let amps = (0..basis.dim()).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        StateVector::normalized(amps, 0.0).unwrap()
    }

    fn models(psi: &StateVector, basis: &SectorBasis, axis: SpinAxis, ch: Option<&ErrorChannel>) -> [OutcomeModel; 3] {
        let bases = match axis {
            SpinAxis::Z => [MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down],
            SpinAxis::X => [MeasurementBasis::XPlus, MeasurementBasis::Hole, MeasurementBasis::XMinus],
        };
        bases.map(|b| OutcomeModel::new(psi, basis, b, ch).unwrap())
    }

    #[test]
    fn matrix_is_verbatim_with_rank_eight() {
        let s = build_system();
        assert_eq!(s.rank, 8);
        assert_eq!(s.a.row(0).iter().copied().collect::<Vec<_>>(), vec![1., 0., 0., 0., 0., 0., 0., 0., 0.]);
        for c in 0..9 {
            assert_eq!(s.a.column(c).sum(), 3.0);
        }
        let expected = DVector::from_row_slice(&[0., 1., -1., -1., 0., 1., 1., -1., 0.]) / 6f64.sqrt();
        assert!((&s.null_vector - expected).norm() < 1e-12);
        assert!((&s.a * &s.null_vector).norm() < 1e-12);
    }

    #[test]
    fn dressed_matrix_reduces_to_a_without_errors() {
        let s = build_system();
        assert_eq!(dressed_matrix(&ideal_signal_table()), s.a);
    }

    #[test]
    fn combos_are_blind_to_the_null_direction() {
        let s = build_system();
        for coeffs in [SPIN_SPIN_C, HOLE_SZ_C, HOLE_UP_C] {
            assert!(dot(&coeffs, s.null_vector.as_slice()).abs() < 1e-14);
        }
        let m = MeasuredPairVector { values: [0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.25, 0.25, 0.4, 0.2, 0.2, 0.2] };
        let sol = solve_min_norm(&s, &m).unwrap();
        let base = combos_from_correlators(&sol.correlators);
        let mut shifted = sol.correlators;
        for (k, v) in shifted.iter_mut().enumerate() {
            *v += 0.37 * s.null_vector[k];
        }
        let moved = combos_from_correlators(&shifted);
        assert_relative_eq!(base.spin_spin, moved.spin_spin, epsilon = 1e-14);
        assert_relative_eq!(base.sym_hole_sz, moved.sym_hole_sz, epsilon = 1e-14);
        assert_relative_eq!(base.sym_hole_up, moved.sym_hole_up, epsilon = 1e-14);
        assert!(sol.undetermined);
    }

    #[test]
    fn closed_forms_match_column_space_solution() {
        let s = build_system();
        let basis = SectorBasis::new(2, 1, None).unwrap();
        let psi = random_state(&basis, 3);
        let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
        let m = BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap().pair_vector(0, 1).unwrap();
        let sol = solve_min_norm(&s, &m).unwrap();
        let a = reconstruct_pair_combos(&m);
        let b = combos_from_correlators(&sol.correlators);
        assert_relative_eq!(a.spin_spin, b.spin_spin, epsilon = 1e-12);
        assert_relative_eq!(a.sym_hole_sz, b.sym_hole_sz, epsilon = 1e-12);
        assert_relative_eq!(a.sym_hole_up, b.sym_hole_up, epsilon = 1e-12);
        assert!(consistency_residual(&s, &m) < 1e-12);
        let mut bad = m;
        bad.values[3] += 0.1;
        assert!(consistency_residual(&s, &bad) > 1e-3);
    }

    #[test]
    fn deterministic_pairs() {
        let basis = SectorBasis::new(2, 0, Some(0)).unwrap();
        let psi = StateVector::basis_state(&basis, &"dd".parse().unwrap()).unwrap();
        let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
        let c = reconstruct_pair_combos(&BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap().pair_vector(0, 1).unwrap());
        assert_eq!((c.spin_spin, c.sym_hole_sz, c.sym_hole_up), (1.0, 0.0, 0.0));
        let basis = SectorBasis::new(2, 1, Some(1)).unwrap();
        let psi = StateVector::basis_state(&basis, &"hu".parse().unwrap()).unwrap();
        let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
        let c = reconstruct_pair_combos(&BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap().pair_vector(0, 1).unwrap());
        assert_eq!(c.sym_hole_up, 1.0);
    }

    #[test]
    fn deterministic_triples() {
        for (cfg, want) in [("hdd", 1.0), ("ddd", 0.0), ("duh", -1.0)] {
            let c: Configuration = cfg.parse().unwrap();
            let basis = SectorBasis::new(3, c.count(LocalState::Hole), Some(c.count(LocalState::Up))).unwrap();
            let psi = StateVector::basis_state(&basis, &c).unwrap();
            let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
            let v = BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap().triple_vector([0, 1, 2]).unwrap();
            assert_eq!(reconstruct_three_body(&v), want, "{cfg}");
        }
    }

    fn direct_pair(psi: &StateVector, b: &SectorBasis, i: usize, j: usize, axis: SpinAxis) -> PairCombos {
        let e = |ops: &[(usize, SiteOp)]| product_expectation(psi, b, ops).unwrap();
        let s = SiteOp::spin(axis);
        let n = SiteOp::hole();
        let u = SiteOp::Occupation(Species::Up);
        PairCombos {
            spin_spin: 4.0 * e(&[(i, s), (j, s)]),
            sym_hole_sz: 2.0 * (e(&[(i, n), (j, s)]) + e(&[(i, s), (j, n)])),
            sym_hole_up: e(&[(i, n), (j, u)]) + e(&[(i, u), (j, n)]),
        }
    }

    fn direct_three(psi: &StateVector, b: &SectorBasis, t: [usize; 3], axis: SpinAxis) -> f64 {
        let s = SiteOp::spin(axis);
        let n = SiteOp::hole();
        let e = |ops: &[(usize, SiteOp)]| product_expectation(psi, b, ops).unwrap();
        4.0 * (e(&[(t[0], n), (t[1], s), (t[2], s)]) + e(&[(t[0], s), (t[1], n), (t[2], s)]) + e(&[(t[0], s), (t[1], s), (t[2], n)]))
    }

    #[test]
    fn x_pipeline_matches_direct_operators() {
        let basis = SectorBasis::new(4, 1, Some(1)).unwrap();
        let psi = random_state(&basis, 17);
        let (free, emb) = embed_free(&psi, &basis).unwrap();
        let [p, h, m] = models(&psi, &basis, SpinAxis::X, None);
        let src = BasisTriple::new(&p, &h, &m, SpinAxis::X).unwrap();
        let got = reconstruct_pair_combos(&src.pair_vector(1, 3).unwrap());
        let want = direct_pair(&emb, &free, 1, 3, SpinAxis::X);
        assert_relative_eq!(got.spin_spin, want.spin_spin, epsilon = 1e-10);
        assert_relative_eq!(got.sym_hole_sz, want.sym_hole_sz, epsilon = 1e-10);
        let t = reconstruct_three_body(&src.triple_vector([0, 2, 3]).unwrap());
        assert_relative_eq!(t, direct_three(&emb, &free, [0, 2, 3], SpinAxis::X), epsilon = 1e-10);
        let k = connected_three_body(&src, [0, 2, 3]).unwrap();
        let direct = three_body_at_sites(&emb, &free, [0, 2, 3], SpinAxis::X, ConnectedConvention::Cumulant).unwrap();
        assert_relative_eq!(k, direct, epsilon = 1e-10);
    }

    #[test]
    fn error_inversion_recovers_ideal_combos() {
        let ch = ErrorChannel::default();
        let inv = ErrorInversion::from_channel(&ch);
        for seed in 0..20 {
            let basis = SectorBasis::new(3, 1, None).unwrap();
            let psi = random_state(&basis, 100 + seed);
            let [u, h, d] = models(&psi, &basis, SpinAxis::Z, Some(&ch));
            let dressed = BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap().pair_vector(0, 2).unwrap();
            let got = inv.combos(&dressed).unwrap();
            let want = direct_pair(&psi, &basis, 0, 2, SpinAxis::Z);
            assert!((got.spin_spin - want.spin_spin).abs() < 1e-8);
            assert!((got.sym_hole_sz - want.sym_hole_sz).abs() < 1e-8);
            assert!((got.sym_hole_up - want.sym_hole_up).abs() < 1e-8);
            // Without inversion the dressed statistics are biased.
            let raw = reconstruct_pair_combos(&dressed);
            assert!((raw.spin_spin - want.spin_spin).abs() > 1e-4);
        }
    }

    #[test]
    fn shot_estimates_within_binomial_errors() {
        let basis = SectorBasis::new(5, 1, Some(2)).unwrap();
        let psi = random_state(&basis, 6);
        let n = 10_000;
        let runs = [MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down]
            .map(|b| sample_shots(&psi, &basis, b, None, n, 40).unwrap());
        let src = BasisTriple::new(&runs[0], &runs[1], &runs[2], SpinAxis::Z).unwrap();
        let shots = src.shot_counts().unwrap();
        let [eu, eh, ed] = models(&psi, &basis, SpinAxis::Z, None);
        let exact = BasisTriple::new(&eu, &eh, &ed, SpinAxis::Z).unwrap();
        for (i, j) in [(0, 1), (1, 3), (2, 4)] {
            let m = src.pair_vector(i, j).unwrap();
            let est = reconstruct_pair_combos(&m);
            let err = PairCombos::stderr(&exact.pair_vector(i, j).unwrap(), shots);
            let want = direct_pair(&psi, &basis, i, j, SpinAxis::Z);
            assert!((est.spin_spin - want.spin_spin).abs() < 5.0 * err.spin_spin);
            assert!((est.sym_hole_sz - want.sym_hole_sz).abs() < 5.0 * err.sym_hole_sz);
            assert!((est.sym_hole_up - want.sym_hole_up).abs() < 5.0 * err.sym_hole_up + 1e-12);
        }
        let tv = src.triple_vector([0, 2, 4]).unwrap();
        let err = three_body_stderr(&exact.triple_vector([0, 2, 4]).unwrap(), shots);
        assert!((reconstruct_three_body(&tv) - direct_three(&psi, &basis, [0, 2, 4], SpinAxis::Z)).abs() < 5.0 * err);
    }

    #[test]
    fn wrong_runs_are_rejected() {
        let basis = SectorBasis::new(2, 1, Some(0)).unwrap();
        let psi = random_state(&basis, 1);
        let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
        assert!(BasisTriple::new(&d, &h, &u, SpinAxis::Z).is_err());
        assert!(BasisTriple::new(&u, &h, &d, SpinAxis::X).is_err());
    }

    #[test]
    fn tables_feed_observables() {
        let basis = SectorBasis::new(5, 1, Some(1)).unwrap();
        let psi = random_state(&basis, 9);
        let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
        let src = BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap();
        let rec = hole_magnon_pairs(&src).unwrap();
        let exact = HoleMagnonPairs::from_state(&psi, &basis).unwrap();
        for i in 0..5 {
            assert_relative_eq!(rec.n_hole[i], exact.n_hole[i], epsilon = 1e-12);
            assert_relative_eq!(rec.n_up[i], exact.n_up[i], epsilon = 1e-12);
            for j in 0..5 {
                if i != j {
                    assert_relative_eq!(rec.symmetrized(i, j, true), exact.symmetrized(i, j, true), epsilon = 1e-12);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pair_and_triple_combos_match_operators(seed in 0u64..100_000, nh in 0usize..2) {
            let basis = SectorBasis::new(3, nh, None).unwrap();
            let psi = random_state(&basis, seed);
            let [u, h, d] = models(&psi, &basis, SpinAxis::Z, None);
            let src = BasisTriple::new(&u, &h, &d, SpinAxis::Z).unwrap();
            let got = reconstruct_pair_combos(&src.pair_vector(0, 2).unwrap());
            let want = direct_pair(&psi, &basis, 0, 2, SpinAxis::Z);
            prop_assert!((got.spin_spin - want.spin_spin).abs() < 1e-10);
            prop_assert!((got.sym_hole_sz - want.sym_hole_sz).abs() < 1e-10);
            prop_assert!((got.sym_hole_up - want.sym_hole_up).abs() < 1e-10);
            let t = reconstruct_three_body(&src.triple_vector([0, 1, 2]).unwrap());
            prop_assert!((t - direct_three(&psi, &basis, [0, 1, 2], SpinAxis::Z)).abs() < 1e-10);
            let k = connected_three_body(&src, [2, 0, 1]).unwrap();
            let direct = three_body_at_sites(&psi, &basis, [2, 0, 1], SpinAxis::Z, ConnectedConvention::Cumulant).unwrap();
            prop_assert!((k - direct).abs() < 1e-10);
        }
    }
}
