//! Low-lying eigenpairs, binding energies and bound-state diagnostics.
//!
//! Eigenpairs come from an explicitly restarted Lanczos iteration with full
//! reorthogonalization. Converged vectors are locked one at a time and later
//! searches run in their orthogonal complement, so degenerate levels are
//! found as separate vectors.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::geometry::{build_ladder, DistanceMetric, LatticeGeometry, LatticeKind};
use crate::hamiltonian::{build_tj, CouplingSet, SparseOperator};
use crate::hilbert::{LocalState, SectorBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanczosOptions {
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Residual target relative to the operator norm bound.
    pub tolerance: f64,
    pub seed: u64,
    /// Sectors at most this large are diagonalized densely.
    pub dense_threshold: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions { krylov_dim: 100, max_restarts: 500, tolerance: 1e-9, seed: 0, dense_threshold: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct EigenReport {
    pub eigenvalues: Vec<f64>,
    pub eigenstates: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
}

impl EigenReport {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn state(&self, k: usize) -> StateVector {
        StateVector::from_real(&self.eigenstates[k], 0.0).expect("eigenvectors are normalized")
    }

    pub fn ground_energy(&self) -> f64 {
        self.eigenvalues[0]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, w);
            w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn residual(op: &SparseOperator, v: &[f64], lambda: f64) -> f64 {
    let mut hv = vec![0.0; v.len()];
    op.apply_real(v, &mut hv);
    hv.iter().zip(v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt()
}

fn random_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()
}

/// Lowest eigenpair of `op` restricted to the orthogonal complement of `locked`.
fn lowest_in_complement(
    op: &SparseOperator,
    locked: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    opts: &LanczosOptions,
    tol: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let dim = op.dim();
    let hnorm = op.norm_bound().max(f64::MIN_POSITIVE);
    let m = opts.krylov_dim.max(2).min(dim - locked.len());
    let mut x = random_vector(dim, rng);
    let mut last_res = f64::INFINITY;
    for _ in 0..opts.max_restarts.max(1) {
        orthogonalize(&mut x, locked);
        let nx = norm(&x);
        if nx < 1e-10 {
            x = random_vector(dim, rng);
            continue;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let mut q = vec![x.clone()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta = Vec::with_capacity(m);
        let mut w = vec![0.0; dim];
        loop {
            let j = q.len() - 1;
            op.apply_real(&q[j], &mut w);
            alpha.push(dot(&q[j], &w));
            // Locked vectors go last so the Krylov projection cannot feed them back in.
            orthogonalize(&mut w, &q);
            orthogonalize(&mut w, locked);
            let b = norm(&w);
            if b <= 1e-13 * hnorm || q.len() >= m {
                break;
            }
            beta.push(b);
            q.push(w.iter().map(|v| v / b).collect());
        }
        let k = alpha.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = t.symmetric_eigen();
        let imin = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .expect("nonempty tridiagonal");
        let mut v = vec![0.0; dim];
        for (l, ql) in q.iter().enumerate() {
            let s = eig.eigenvectors[(l, imin)];
            v.iter_mut().zip(ql).for_each(|(a, b)| *a += s * b);
        }
        orthogonalize(&mut v, locked);
        let nv = norm(&v);
        v.iter_mut().for_each(|a| *a /= nv);
        let lambda = {
            let mut hv = vec![0.0; dim];
            op.apply_real(&v, &mut hv);
            dot(&v, &hv)
        };
        last_res = residual(op, &v, lambda);
        if last_res <= tol {
            return Ok((lambda, v, last_res));
        }
        x = v;
    }
    Err(Error::NotConverged { iterations: opts.max_restarts, worst_residual: last_res, residuals: vec![last_res] })
}

fn dense_eigenpairs(op: &SparseOperator, k: usize) -> EigenReport {
    let eig = op.to_dense().symmetric_eigen();
    let mut order: Vec<usize> = (0..op.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut report = EigenReport { eigenvalues: Vec::new(), eigenstates: Vec::new(), residuals: Vec::new() };
    for &l in order.iter().take(k) {
        let v: Vec<f64> = eig.eigenvectors.column(l).iter().copied().collect();
        let lambda = eig.eigenvalues[l];
        report.residuals.push(residual(op, &v, lambda));
        report.eigenvalues.push(lambda);
        report.eigenstates.push(v);
    }
    report
}

/// The `k` smallest eigenpairs with default solver settings.
pub fn lowest_eigenpairs(op: &SparseOperator, k: usize) -> Result<EigenReport> {
    lowest_eigenpairs_with(op, k, &LanczosOptions::default())
}

pub fn lowest_eigenpairs_with(op: &SparseOperator, k: usize, opts: &LanczosOptions) -> Result<EigenReport> {
    let dim = op.dim();
    if k == 0 || k > dim {
        return Err(Error::Parameter(format!("requested {k} eigenpairs of a {dim}-dimensional operator")));
    }
    if dim <= opts.dense_threshold || k == dim {
        return Ok(dense_eigenpairs(op, k));
    }
    let tol = opts.tolerance * op.norm_bound().max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut vals: Vec<f64> = Vec::with_capacity(k);
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut res: Vec<f64> = Vec::with_capacity(k);
    let mut failures = Vec::new();
    for _ in 0..k {
        match lowest_in_complement(op, &vecs, &mut rng, opts, tol) {
            Ok((l, v, r)) => {
                vals.push(l);
                vecs.push(v);
                res.push(r);
            }
            Err(Error::NotConverged { worst_residual, .. }) => failures.push(worst_residual),
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        let mut residuals = res.clone();
        residuals.extend(&failures);
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        return Err(Error::NotConverged { iterations: opts.max_restarts, worst_residual: worst, residuals });
    }
    // A converged vector in the complement that lies below a locked value
    // means a level was skipped; swap it in.
    if k < dim {
        for _ in 0..k {
            let (imax, vmax) = vals
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let (l, v, r) = lowest_in_complement(op, &vecs, &mut rng, opts, tol)?;
            if l < vmax - tol {
                vals[imax] = l;
                vecs[imax] = v;
                res[imax] = r;
            } else {
                break;
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    Ok(EigenReport {
        eigenvalues: order.iter().map(|&i| vals[i]).collect(),
        eigenstates: order.iter().map(|&i| vecs[i].clone()).collect(),
        residuals: order.iter().map(|&i| res[i]).collect(),
    })
}

/// The `k` largest eigenpairs, reported in descending order.
pub fn highest_eigenpairs(op: &SparseOperator, k: usize) -> Result<EigenReport> {
    let mut r = lowest_eigenpairs(&op.scaled(-1.0), k)?;
    r.eigenvalues.iter_mut().for_each(|v| *v = -*v);
    Ok(r)
}

/// Ground energy of the sector `(n_holes, n_up)`.
pub fn ground_energy(g: &LatticeGeometry, c: &CouplingSet, n_holes: usize, n_up: usize) -> Result<f64> {
    let basis = SectorBasis::enumerate_sector(g.n_sites(), n_holes, n_up)?;
    let op = build_tj(g, &basis, c)?;
    Ok(lowest_eigenpairs(&op, 1)?.eigenvalues[0])
}

/// Which hopping amplitude normalizes `E_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Mean `|t|` on the bond between sites 0 and 2 (same leg) for ladders,
    /// on a nearest-neighbour bond for 2D clusters.
    Leg,
    /// Mean `|t|` on the bond between sites 0 and 1.
    Rung,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingReport {
    pub n_magnons: usize,
    pub e_bound: f64,
    pub e_hole: f64,
    pub e_magnons: f64,
    pub e_vacuum: f64,
    pub e_b: f64,
    pub t_norm: f64,
    pub e_b_over_t: f64,
}

fn normalization_t(g: &LatticeGeometry, c: &CouplingSet, norm: Normalization) -> Result<f64> {
    let pair = match (norm, g.kind()) {
        (Normalization::Fixed(t), _) => return Ok(t.abs()),
        (Normalization::Rung, _) => (0, 1),
        (Normalization::Leg, LatticeKind::Ladder) => (0, 2),
        (Normalization::Leg, LatticeKind::Triangular2d) => *g
            .nearest_neighbor_bonds()
            .first()
            .ok_or_else(|| Error::Geometry("no bonds to normalize by".into()))?,
    };
    if pair.1 >= g.n_sites() {
        return Err(Error::Geometry("too few sites for the requested normalization".into()));
    }
    let b = c
        .bond(g, pair.0, pair.1)?
        .ok_or_else(|| Error::Parameter("normalization bond is cut off".into()))?;
    Ok(0.5 * (b.t_up.abs() + b.t_dn.abs()))
}

/// `E_b = E(1H nM) − E(1H) − E(nM) + E(0H0M)`, normalized by the leg hopping.
pub fn binding_energy(g: &LatticeGeometry, c: &CouplingSet, n_magnons: usize) -> Result<BindingReport> {
    binding_energy_with(g, c, n_magnons, Normalization::Leg)
}

pub fn binding_energy_with(
    g: &LatticeGeometry,
    c: &CouplingSet,
    n_magnons: usize,
    norm: Normalization,
) -> Result<BindingReport> {
    if !(1..=2).contains(&n_magnons) {
        return Err(Error::Parameter(format!("binding energy needs 1 or 2 magnons, got {n_magnons}")));
    }
    let e_bound = ground_energy(g, c, 1, n_magnons)?;
    let e_hole = ground_energy(g, c, 1, 0)?;
    let e_magnons = ground_energy(g, c, 0, n_magnons)?;
    let e_vacuum = ground_energy(g, c, 0, 0)?;
    let e_b = e_bound - e_hole - e_magnons + e_vacuum;
    let t_norm = normalization_t(g, c, norm)?;
    Ok(BindingReport { n_magnons, e_bound, e_hole, e_magnons, e_vacuum, e_b, t_norm, e_b_over_t: e_b / t_norm })
}

/// How couplings are referenced while the ladder aspect ratio is swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepReference {
    /// `a_ref` follows the nearest-neighbour distance at every ratio.
    NearestNeighbor,
    /// `a_ref` stays as given.
    Fixed,
}

/// Binding energy along a sweep of `h/a` on an `n_sites` ladder with leg spacing `a`.
pub fn binding_sweep(
    n_sites: usize,
    a: f64,
    ratios: &[f64],
    base: &CouplingSet,
    reference: SweepReference,
    n_magnons: usize,
    norm: Normalization,
) -> Result<Vec<(f64, BindingReport)>> {
    ratios
        .par_iter()
        .map(|&ratio| {
            let g = build_ladder(n_sites, a, ratio * a)?;
            let mut c = base.clone();
            if reference == SweepReference::NearestNeighbor {
                c.a_ref = g.min_distance();
            }
            Ok((ratio, binding_energy_with(&g, &c, n_magnons, norm)?))
        })
        .collect()
}

/// Two-column `h/a  E_b/t` table.
pub fn write_sweep_table<W: Write>(points: &[(f64, BindingReport)], mut w: W) -> Result<()> {
    writeln!(w, "h_over_a\tEb_over_t")?;
    for (r, b) in points {
        writeln!(w, "{r:.6}\t{:.10}", b.e_b_over_t)?;
    }
    Ok(())
}

/// Expected lattice distance between the hole and the up spins, averaged over up spins.
pub fn eigenstate_hole_magnon_distance(state: &StateVector, basis: &SectorBasis, g: &LatticeGeometry) -> Result<f64> {
    hole_magnon_distance_with(state, basis, g, DistanceMetric::Lattice)
}

pub fn hole_magnon_distance_with(
    state: &StateVector,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    metric: DistanceMetric,
) -> Result<f64> {
    state.check_dim(basis)?;
    if basis.n_holes() != 1 || !basis.n_up().is_some_and(|u| u >= 1) {
        return Err(Error::Sector("hole-magnon distance needs one hole and at least one up spin".into()));
    }
    let mut total = 0.0;
    for (m, p) in state.probabilities().into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut hole = 0;
        let mut ups = Vec::new();
        for s in 0..basis.n_sites() {
            match basis.state(m, s) {
                LocalState::Hole => hole = s,
                LocalState::Up => ups.push(s),
                _ => {}
            }
        }
        let mean = ups.iter().map(|&u| g.separation(hole, u, metric)).sum::<f64>() / ups.len() as f64;
        total += p * mean;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct BoundManifold {
    pub indices: Vec<usize>,
    pub energies: Vec<f64>,
    pub distances: Vec<f64>,
    pub threshold: f64,
    pub metric: DistanceMetric,
}

impl BoundManifold {
    pub fn all_bound(&self) -> bool {
        self.distances.iter().all(|&d| d < self.threshold)
    }
}

pub const DEFAULT_BOUND_THRESHOLD: f64 = 1.5;

/// The lowest `size` eigenstates with their hole-magnon distances, measured
/// in units of `a` (Euclidean), so a nearest-neighbour pair counts as one site
/// on rungs and legs alike.
pub fn bound_manifold(
    report: &EigenReport,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    size: usize,
    threshold: f64,
) -> Result<BoundManifold> {
    bound_manifold_with(report, basis, g, size, threshold, DistanceMetric::Euclidean)
}

pub fn bound_manifold_with(
    report: &EigenReport,
    basis: &SectorBasis,
    g: &LatticeGeometry,
    size: usize,
    threshold: f64,
    metric: DistanceMetric,
) -> Result<BoundManifold> {
    if size > report.len() {
        return Err(Error::Parameter(format!("manifold of {size} states from a report of {}", report.len())));
    }
    let distances = (0..size)
        .map(|k| hole_magnon_distance_with(&report.state(k), basis, g, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundManifold {
        indices: (0..size).collect(),
        energies: report.eigenvalues[..size].to_vec(),
        distances,
        threshold,
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_triangular_disk;
    use crate::hamiltonian::{mhz, SignMode};
    use crate::hilbert::Configuration;
    use num_complex::Complex64;

    fn dense_sorted(op: &SparseOperator) -> Vec<f64> {
        let mut e: Vec<f64> = op.to_dense().symmetric_eigen().eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    fn equilateral(n: usize) -> LatticeGeometry {
        build_ladder(n, 14.7, 3f64.sqrt() / 2.0 * 14.7).unwrap()
    }

    #[test]
    fn two_site_ground_energy() {
        let g = LatticeGeometry::from_coordinates(LatticeKind::Ladder, vec![[0.0, 0.0], [3.0, 0.0]], 3.0, 0.0).unwrap();
        let basis = SectorBasis::enumerate_sector(2, 1, 0).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(3.0)).unwrap();
        let r = lowest_eigenpairs(&op, 1).unwrap();
        assert!((r.eigenvalues[0] + mhz(1.2)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_operator_sorted() {
        let d: Vec<f64> = (0..40).map(|i| ((i * 17) % 40) as f64 - 13.5).collect();
        let op = SparseOperator::from_diagonal(d.clone());
        let r = lowest_eigenpairs(&op, 5).unwrap();
        let mut s = d;
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 0..5 {
            assert!((r.eigenvalues[k] - s[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ladder_matches_dense_oracle() {
        let g = equilateral(19);
        let basis = SectorBasis::enumerate_sector(19, 1, 1).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(14.7)).unwrap();
        let r = lowest_eigenpairs(&op, 10).unwrap();
        let exact = dense_sorted(&op);
        let hn = op.norm_bound();
        for k in 0..10 {
            assert!((r.eigenvalues[k] - exact[k]).abs() < 1e-10, "k={k}: {} vs {}", r.eigenvalues[k], exact[k]);
            assert!(r.residuals[k] <= 1e-9 * hn);
            for l in 0..k {
                assert!(dot(&r.eigenstates[k], &r.eigenstates[l]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn locked_vectors_stay_projected_out() {
        // Krylov dimension close to the sector size: locked components used to
        // grow geometrically through the recurrence.
        let g = build_ladder(19, 14.7, 0.5 * 14.7).unwrap();
        let basis = SectorBasis::enumerate_sector(19, 0, 2).unwrap();
        let mut c = CouplingSet::table_default(14.7);
        c.a_ref = g.min_distance();
        let op = build_tj(&g, &basis, &c).unwrap();
        let exact = dense_sorted(&op);
        for krylov_dim in [20, 100, 170] {
            let opts = LanczosOptions { krylov_dim, ..Default::default() };
            let r = lowest_eigenpairs_with(&op, 3, &opts).unwrap();
            for k in 0..3 {
                assert!((r.eigenvalues[k] - exact[k]).abs() < 1e-9, "m={krylov_dim} k={k}");
            }
        }
    }

    #[test]
    fn degenerate_levels_are_all_reported() {
        // Hexagonal 7-site cluster with one hole: dihedral symmetry forces degeneracies.
        let g = build_triangular_disk(1.0, 1.0).unwrap();
        let basis = SectorBasis::enumerate_sector(7, 1, 0).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::hopping_only(1.0, 1.0)).unwrap();
        let exact = dense_sorted(&op);
        let opts = LanczosOptions { dense_threshold: 0, ..Default::default() };
        let r = lowest_eigenpairs_with(&op, 4, &opts).unwrap();
        for k in 0..4 {
            assert!((r.eigenvalues[k] - exact[k]).abs() < 1e-10, "{:?} vs {:?}", r.eigenvalues, exact);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let g = equilateral(9);
        let basis = SectorBasis::enumerate_sector(9, 1, 2).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(14.7)).unwrap();
        let a = lowest_eigenpairs(&op, 3).unwrap();
        let b = lowest_eigenpairs(&op, 3).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenstates, b.eigenstates);
    }

    #[test]
    fn reversed_hopping_is_mirror_of_top() {
        for g in [equilateral(8), build_triangular_disk(1.0, 1.0).unwrap()] {
            let c = CouplingSet::hopping_only(1.3, g.min_distance());
            for (nh, nu) in [(1, 1), (1, 2), (2, 1)] {
                let basis = SectorBasis::enumerate_sector(g.n_sites(), nh, nu).unwrap();
                let h = build_tj(&g, &basis, &c).unwrap();
                let hr = build_tj(&g, &basis, &c.clone().with_sign_mode(SignMode::Reversed)).unwrap();
                let top = highest_eigenpairs(&h, 1).unwrap().eigenvalues[0];
                let low = lowest_eigenpairs(&hr, 1).unwrap().eigenvalues[0];
                assert!((low + top).abs() < 1e-9 * h.norm_bound());
            }
        }
    }

    #[test]
    fn invalid_requests() {
        let op = SparseOperator::from_diagonal(vec![1.0, 2.0]);
        assert!(lowest_eigenpairs(&op, 0).is_err());
        assert!(lowest_eigenpairs(&op, 3).is_err());
    }

    #[test]
    fn non_convergence_reports_residuals() {
        let g = equilateral(13);
        let basis = SectorBasis::enumerate_sector(13, 1, 2).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(14.7)).unwrap();
        let opts = LanczosOptions { krylov_dim: 3, max_restarts: 2, ..Default::default() };
        match lowest_eigenpairs_with(&op, 2, &opts) {
            Err(Error::NotConverged { residuals, .. }) => assert!(!residuals.is_empty()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn binding_report_is_consistent() {
        let g = equilateral(11);
        let c = CouplingSet::table_default(14.7);
        let b = binding_energy(&g, &c, 1).unwrap();
        assert_eq!(b.e_b, b.e_bound - b.e_hole - b.e_magnons + b.e_vacuum);
        assert!(b.e_b < 0.0);
        assert!(binding_energy(&g, &c, 3).is_err());
    }

    #[test]
    fn hole_magnon_distance_examples() {
        let g = equilateral(19);
        let basis = SectorBasis::enumerate_sector(19, 1, 1).unwrap();
        let a = Configuration::with_defects(19, &[8], &[9]).unwrap();
        let b = Configuration::with_defects(19, &[8], &[11]).unwrap();
        let s = StateVector::basis_state(&basis, &a).unwrap();
        assert!((eigenstate_hole_magnon_distance(&s, &basis, &g).unwrap() - 1.0).abs() < 1e-15);
        let mut amps = vec![Complex64::new(0.0, 0.0); basis.dim()];
        amps[basis.rank(&a).unwrap()] = Complex64::new(0.5f64.sqrt(), 0.0);
        amps[basis.rank(&b).unwrap()] = Complex64::new(0.5f64.sqrt(), 0.0);
        let sup = StateVector::new(amps, 0.0).unwrap();
        assert!((eigenstate_hole_magnon_distance(&sup, &basis, &g).unwrap() - 2.0).abs() < 1e-12);
        let wrong = SectorBasis::enumerate_sector(19, 1, 0).unwrap();
        let w = StateVector::basis_state(&wrong, &Configuration::with_defects(19, &[3], &[]).unwrap()).unwrap();
        assert!(eigenstate_hole_magnon_distance(&w, &wrong, &g).is_err());
    }

    #[test]
    fn ground_state_is_tightly_bound() {
        let g = equilateral(19);
        let basis = SectorBasis::enumerate_sector(19, 1, 1).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(14.7)).unwrap();
        let r = lowest_eigenpairs(&op, 10).unwrap();
        let uniform = StateVector::from_real(&vec![1.0; basis.dim()], 0.0).unwrap();
        for metric in [DistanceMetric::Lattice, DistanceMetric::Euclidean] {
            let d0 = hole_magnon_distance_with(&r.state(0), &basis, &g, metric).unwrap();
            let du = hole_magnon_distance_with(&uniform, &basis, &g, metric).unwrap();
            assert!(d0 < 0.5 * du, "{metric:?}: {d0} vs {du}");
        }
        let d0 = hole_magnon_distance_with(&r.state(0), &basis, &g, DistanceMetric::Euclidean).unwrap();
        assert!((d0 - 1.0).abs() < 0.2, "d0 = {d0}");
        let m = bound_manifold(&r, &basis, &g, 10, DEFAULT_BOUND_THRESHOLD).unwrap();
        assert!(m.all_bound(), "{:?}", m.distances);
        let one = bound_manifold(&r, &basis, &g, 1, DEFAULT_BOUND_THRESHOLD).unwrap();
        assert_eq!(one.indices, vec![0]);
        assert!(bound_manifold(&r, &basis, &g, 11, 1.5).is_err());
    }

    #[test]
    fn full_spectrum_manifold() {
        let g = equilateral(4);
        let basis = SectorBasis::enumerate_sector(4, 1, 1).unwrap();
        let op = build_tj(&g, &basis, &CouplingSet::table_default(14.7)).unwrap();
        let r = lowest_eigenpairs(&op, basis.dim()).unwrap();
        let m = bound_manifold(&r, &basis, &g, basis.dim(), 1.5).unwrap();
        assert_eq!(m.indices.len(), 12);
    }

    #[test]
    fn sweep_table_format() {
        let c = CouplingSet::table_default(1.0);
        let pts = binding_sweep(7, 1.0, &[0.5, 0.8], &c, SweepReference::NearestNeighbor, 1, Normalization::Leg).unwrap();
        let mut buf = Vec::new();
        write_sweep_table(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("h_over_a\tEb_over_t"));
    }
}
