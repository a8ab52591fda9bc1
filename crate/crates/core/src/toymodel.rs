//! One hole hopping around a single triangle.
//!
//! Everything here is built from the full model operator with the spin
//! couplings switched off, so the analytic bands double as a check of the
//! hopping sign convention.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, LatticeKind};
use crate::hamiltonian::{build_tj, CouplingSet};
use crate::hilbert::{set_site, site_state, Configuration, LocalState, SectorBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaquetteSector {
    /// One hole and two `↓` spins.
    Polarized,
    /// One hole, one `↑` and one `↓` in total spin 0.
    Singlet,
    /// One hole, one `↑` and one `↓` in total spin 1.
    Triplet,
}

impl fmt::Display for PlaquetteSector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlaquetteSector::Polarized => "polarized",
            PlaquetteSector::Singlet => "singlet",
            PlaquetteSector::Triplet => "triplet",
        })
    }
}

impl PlaquetteSector {
    /// Analytic band `ε(k)`.
    pub fn band(self, t: f64, k: f64) -> f64 {
        match self {
            PlaquetteSector::Singlet => -2.0 * t * k.cos(),
            _ => 2.0 * t * k.cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinPair {
    Singlet,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteLevel {
    pub k: f64,
    pub energy: f64,
    pub analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteReport {
    pub sector: PlaquetteSector,
    pub t: f64,
    /// Sorted by energy.
    pub levels: Vec<PlaquetteLevel>,
    /// Largest matrix element of the operator between the `S = 0` and `S = 1` blocks.
    pub block_offdiag_norm: f64,
}

impl PlaquetteReport {
    pub fn energies(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.energy).collect()
    }

    pub fn ground_energy(&self) -> f64 {
        self.levels[0].energy
    }

    pub fn max_deviation(&self) -> f64 {
        self.levels.iter().map(|l| (l.energy - l.analytic).abs()).fold(0.0, f64::max)
    }

    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# sector: {}  t: {}", self.sector, self.t)?;
        writeln!(w, "k\tenergy\tanalytic")?;
        for l in &self.levels {
            writeln!(w, "{:.6}\t{:.12}\t{:.12}", l.k, l.energy, l.analytic)?;
        }
        Ok(())
    }
}

/// Equilateral triangle with unit spacing.
pub fn triangle() -> LatticeGeometry {
    LatticeGeometry::from_coordinates(
        LatticeKind::Triangular2d,
        vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.75f64.sqrt()]],
        1.0,
        0.75f64.sqrt(),
    )
    .expect("valid triangle")
}

fn plaquette_operator(t: f64, basis: &SectorBasis) -> Result<DMatrix<f64>> {
    if !t.is_finite() {
        return Err(Error::Parameter(format!("t must be finite, got {t}")));
    }
    Ok(build_tj(&triangle(), basis, &CouplingSet::hopping_only(t, 1.0))?.to_dense())
}

/// Total spin `S²` on the occupied sites.
pub fn total_spin_squared(basis: &SectorBasis) -> DMatrix<f64> {
    let n = basis.n_sites();
    let d = basis.dim();
    let mut s2 = DMatrix::zeros(d, d);
    for m in 0..d {
        let w = basis.word(m);
        let spins: Vec<(usize, LocalState)> =
            (0..n).map(|i| (i, site_state(w, i))).filter(|(_, s)| s.is_spin()).collect();
        let mut diag = 0.75 * spins.len() as f64;
        for (a, &(i, si)) in spins.iter().enumerate() {
            for &(j, sj) in &spins[a + 1..] {
                diag += 2.0 * si.sz() * sj.sz();
                if si != sj {
                    let flipped = set_site(set_site(w, i, sj), j, si);
                    if let Some(r) = basis.rank_word(flipped) {
                        s2[(r, m)] += 1.0;
                    }
                }
            }
        }
        s2[(m, m)] += diag;
    }
    s2
}

/// Cyclic translation `i → i + 1 (mod 3)`, symmetrized to `(T + T†)/2` so its
/// eigenvalues are `cos k`.
fn translation_cos(basis: &SectorBasis) -> DMatrix<f64> {
    let n = basis.n_sites();
    let d = basis.dim();
    let mut tr = DMatrix::zeros(d, d);
    for m in 0..d {
        let w = basis.word(m);
        let mut out = w;
        for i in 0..n {
            out = set_site(out, (i + 1) % n, site_state(w, i));
        }
        let r = basis.rank_word(out).expect("translation preserves the sector");
        tr[(r, m)] += 0.5;
        tr[(m, r)] += 0.5;
    }
    tr
}

/// Orthonormal columns spanning the eigenspace of `m` at `value`.
fn eigenspace(m: &DMatrix<f64>, value: f64) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let cols: Vec<_> = (0..m.nrows())
        .filter(|&k| (e.eigenvalues[k] - value).abs() < 1e-8)
        .map(|k| e.eigenvectors.column(k).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

pub fn plaquette_spectrum(t: f64, sector: PlaquetteSector) -> Result<PlaquetteReport> {
    let basis = match sector {
        PlaquetteSector::Polarized => SectorBasis::new(3, 1, Some(0))?,
        _ => SectorBasis::new(3, 1, Some(1))?,
    };
    let h = plaquette_operator(t, &basis)?;
    let tr = translation_cos(&basis);
    let (proj, block_offdiag_norm) = match sector {
        PlaquetteSector::Polarized => (DMatrix::identity(3, 3), 0.0),
        _ => {
            let s2 = total_spin_squared(&basis);
            let v0 = eigenspace(&s2, 0.0);
            let v1 = eigenspace(&s2, 2.0);
            let off = (v0.transpose() * &h * &v1).amax();
            (if sector == PlaquetteSector::Singlet { v0 } else { v1 }, off)
        }
    };
    let hp = proj.transpose() * &h * &proj;
    // Split accidental degeneracies by momentum before diagonalizing.
    let tp = proj.transpose() * &tr * &proj;
    let e = SymmetricEigen::new(&hp + &tp * 1e-3 * (1.0 + t.abs()));
    let mut levels: Vec<PlaquetteLevel> = (0..hp.nrows())
        .map(|c| {
            let v = e.eigenvectors.column(c);
            let energy = (v.transpose() * &hp * v)[(0, 0)];
            let cos_k = (v.transpose() * &tp * v)[(0, 0)].clamp(-1.0, 1.0);
            let k = if cos_k > 0.0 { 0.0 } else { 2.0 * PI / 3.0 };
            PlaquetteLevel { k, energy, analytic: sector.band(t, k) }
        })
        .collect();
    levels.sort_by(|a, b| a.energy.total_cmp(&b.energy).then(a.k.total_cmp(&b.k)));
    // The two |k| = 2π/3 levels carry opposite momenta.
    let mut flip = false;
    for l in &mut levels {
        if l.k != 0.0 {
            if flip {
                l.k = -l.k;
            }
            flip = !flip;
        }
    }
    Ok(PlaquetteReport { sector, t, levels, block_offdiag_norm })
}

/// `|h⟩_i |pair⟩_{i+1, i+2}` with the pair sites taken cyclically and
/// `|s⟩_{jk} = (|↓_j ↑_k⟩ − |↑_j ↓_k⟩)/√2`.
pub fn hole_pair_state(basis: &SectorBasis, hole: usize, pair: SpinPair) -> Result<StateVector> {
    if basis.n_sites() != 3 || basis.n_holes() != 1 || basis.n_up() != Some(1) {
        return Err(Error::Parameter("hole-pair states live on the one-hole, one-up triangle".into()));
    }
    let (j, k) = ((hole + 1) % 3, (hole + 2) % 3);
    let config = |sj: LocalState, sk: LocalState| {
        let mut c = vec![LocalState::Hole; 3];
        c[j] = sj;
        c[k] = sk;
        Configuration(c)
    };
    let a = StateVector::basis_state(basis, &config(LocalState::Down, LocalState::Up))?;
    let b = StateVector::basis_state(basis, &config(LocalState::Up, LocalState::Down))?;
    let s = match pair {
        SpinPair::Singlet => -1.0,
        SpinPair::Triplet => 1.0,
    };
    let amps = a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| x + y * s).collect();
    StateVector::normalized(amps, 0.0)
}

/// `⟨h_0 p_12| H |h_1 p_20⟩` with only hopping switched on.
pub fn effective_tunneling_sign(t: f64, pair: SpinPair) -> Result<f64> {
    let basis = SectorBasis::new(3, 1, Some(1))?;
    let h = plaquette_operator(t, &basis)?;
    let bra = hole_pair_state(&basis, 0, pair)?;
    let ket = hole_pair_state(&basis, 1, pair)?;
    let x: Vec<f64> = ket.amplitudes().iter().map(|z| z.re).collect();
    let y: Vec<f64> = bra.amplitudes().iter().map(|z| z.re).collect();
    Ok((0..x.len()).map(|r| (0..x.len()).map(|c| y[r] * h[(r, c)] * x[c]).sum::<f64>()).sum())
}
