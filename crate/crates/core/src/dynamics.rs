//! State vectors and Krylov propagation under piecewise-constant Hamiltonians.
//!
//! Each substep freezes the Hamiltonian at the substep midpoint and applies
//! `exp(-i H dt)` through a Lanczos projection. Substep boundaries are forced
//! at snapshot times and at kinks of the ramp.

use std::borrow::Cow;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{LightShiftProgram, SparseOperator};
use crate::hilbert::{Configuration, SectorBasis};

const NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: Vec<Complex64>,
    time: f64,
}

impl StateVector {
    /// Wraps amplitudes that are already normalized.
    pub fn new(amps: Vec<Complex64>, time: f64) -> Result<Self> {
        let s = StateVector { amps, time };
        let n = s.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Parameter(format!("state norm {n} is not 1")));
        }
        Ok(s)
    }

    /// Normalizes the given amplitudes.
    pub fn normalized(mut amps: Vec<Complex64>, time: f64) -> Result<Self> {
        let n = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Parameter("cannot normalize a zero or non-finite vector".into()));
        }
        amps.iter_mut().for_each(|a| *a /= n);
        Ok(StateVector { amps, time })
    }

    pub fn from_real(v: &[f64], time: f64) -> Result<Self> {
        Self::normalized(v.iter().map(|&x| Complex64::new(x, 0.0)).collect(), time)
    }

    /// The basis vector of a single configuration.
    pub fn basis_state(basis: &SectorBasis, c: &Configuration) -> Result<Self> {
        let m = basis.rank(c)?;
        let mut amps = vec![Complex64::new(0.0, 0.0); basis.dim()];
        amps[m] = Complex64::new(1.0, 0.0);
        Ok(StateVector { amps, time: 0.0 })
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amps
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn check_dim(&self, basis: &SectorBasis) -> Result<()> {
        if self.dim() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: self.dim() });
        }
        Ok(())
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner(other)?.norm_sqr())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `time ordinal re im` lines.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        for (m, a) in self.amps.iter().enumerate() {
            writeln!(w, "{} {} {:.17e} {:.17e}", self.time, m, a.re, a.im)?;
        }
        Ok(())
    }
}

pub fn write_snapshots<W: Write>(snapshots: &[StateVector], mut w: W) -> Result<()> {
    writeln!(w, "time\tordinal\tre\tim")?;
    for s in snapshots {
        for (m, a) in s.amps.iter().enumerate() {
            writeln!(w, "{}\t{}\t{:.17e}\t{:.17e}", s.time, m, a.re, a.im)?;
        }
    }
    Ok(())
}

/// Reads the output of [`write_snapshots`] back, one state per distinct time.
pub fn read_snapshots<R: BufRead>(r: R) -> Result<Vec<StateVector>> {
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == "time\tordinal\tre\tim" => {}
        other => return Err(Error::Parse(format!("unexpected snapshot header {other:?}"))),
    }
    let mut out: Vec<(f64, Vec<Complex64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("snapshot line {}: '{line}'", n + 2));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let t: f64 = f[0].parse().map_err(|_| bad())?;
        let m: usize = f[1].parse().map_err(|_| bad())?;
        let re: f64 = f[2].parse().map_err(|_| bad())?;
        let im: f64 = f[3].parse().map_err(|_| bad())?;
        if m == 0 {
            out.push((t, Vec::new()));
        }
        match out.last_mut() {
            Some((t0, amps)) if *t0 == t && amps.len() == m => amps.push(Complex64::new(re, im)),
            _ => return Err(bad()),
        }
    }
    out.into_iter().map(|(t, amps)| StateVector::new(amps, t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub max_step: f64,
    pub krylov_dim: usize,
    pub tolerance: f64,
    pub min_step: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl { max_step: 0.01, krylov_dim: 20, tolerance: 1e-10, min_step: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub control: StepControl,
}

impl EvolutionSchedule {
    pub fn new(t_start: f64, t_end: f64, snapshots: Vec<f64>) -> Result<Self> {
        let s = EvolutionSchedule { t_start, t_end, snapshots, control: StepControl::default() };
        s.validate()?;
        Ok(s)
    }

    /// Snapshots at the measurement times used for ramp experiments.
    pub fn measurement_times(t_end: f64) -> Result<Self> {
        let snaps = [0.0, 1.0, 2.0, 4.0, 5.0, 6.0].into_iter().filter(|&t| t <= t_end + 1e-12).collect();
        Self::new(0.0, t_end, snaps)
    }

    pub fn with_control(mut self, control: StepControl) -> Self {
        self.control = control;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end >= self.t_start) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(Error::Parameter("schedule needs finite t_end >= t_start".into()));
        }
        if self.snapshots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Parameter("snapshot times must be sorted".into()));
        }
        if self.snapshots.iter().any(|&t| t < self.t_start - 1e-12 || t > self.t_end + 1e-12) {
            return Err(Error::Parameter("snapshot times must lie within [t_start, t_end]".into()));
        }
        let c = &self.control;
        if !(c.max_step > 0.0) || c.krylov_dim < 2 || !(c.tolerance > 0.0) || !(c.min_step > 0.0) {
            return Err(Error::Parameter("invalid step control".into()));
        }
        Ok(())
    }
}

/// A Hamiltonian that may depend on time.
pub trait TimeDependentHamiltonian: Sync {
    fn dim(&self) -> usize;

    /// Operator frozen at time `t`.
    fn operator_at(&self, t: f64) -> Result<Cow<'_, SparseOperator>>;

    /// Times where the time dependence has kinks.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl TimeDependentHamiltonian for SparseOperator {
    fn dim(&self) -> usize {
        SparseOperator::dim(self)
    }

    fn operator_at(&self, _t: f64) -> Result<Cow<'_, SparseOperator>> {
        Ok(Cow::Borrowed(self))
    }
}

/// `H_tJ` plus the ramped light shifts of a program.
#[derive(Debug, Clone)]
pub struct RampedHamiltonian {
    base: SparseOperator,
    dn: Vec<f64>,
    up: Vec<f64>,
    program: LightShiftProgram,
}

impl RampedHamiltonian {
    pub fn new(base: SparseOperator, basis: &SectorBasis, program: LightShiftProgram) -> Result<Self> {
        if base.dim() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: base.dim() });
        }
        let (dn, up) = program.penalty_counts(basis)?;
        Ok(RampedHamiltonian { base, dn, up, program })
    }

    pub fn base(&self) -> &SparseOperator {
        &self.base
    }

    pub fn program(&self) -> &LightShiftProgram {
        &self.program
    }
}

impl TimeDependentHamiltonian for RampedHamiltonian {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn operator_at(&self, t: f64) -> Result<Cow<'_, SparseOperator>> {
        let (ddn, dup) = self.program.values(t.max(0.0))?;
        let shift: Vec<f64> = self.dn.iter().zip(&self.up).map(|(a, b)| ddn * a + dup * b).collect();
        Ok(Cow::Owned(self.base.with_diagonal_shift(&shift, 1.0)?))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.program.breakpoints()
    }
}

/// Wraps a closure that builds the operator at a given time.
pub struct OperatorBuilder<F> {
    dim: usize,
    build: F,
    breakpoints: Vec<f64>,
}

impl<F: Fn(f64) -> SparseOperator + Sync> OperatorBuilder<F> {
    pub fn new(dim: usize, build: F, breakpoints: Vec<f64>) -> Self {
        OperatorBuilder { dim, build, breakpoints }
    }
}

impl<F: Fn(f64) -> SparseOperator + Sync> TimeDependentHamiltonian for OperatorBuilder<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn operator_at(&self, t: f64) -> Result<Cow<'_, SparseOperator>> {
        let op = (self.build)(t);
        if op.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: op.dim() });
        }
        Ok(Cow::Owned(op))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }
}

/// Applies `exp(-i H dt)` to `x` in a Krylov space of dimension at most `m`.
/// Returns the propagated vector and the a-posteriori error estimate.
pub fn krylov_expm(op: &SparseOperator, x: &[Complex64], dt: f64, m: usize) -> (Vec<Complex64>, f64) {
    let dim = x.len();
    let beta0 = x.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if beta0 == 0.0 || dt == 0.0 {
        return (x.to_vec(), 0.0);
    }
    let m = m.min(dim).max(1);
    let hnorm = op.norm_bound().max(1e-300);
    let mut q: Vec<Vec<Complex64>> = vec![x.iter().map(|a| a / beta0).collect()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut w = vec![Complex64::new(0.0, 0.0); dim];
    let last_beta;
    loop {
        let j = q.len() - 1;
        op.apply(&q[j], &mut w);
        let a: f64 = q[j].iter().zip(&w).map(|(u, v)| (u.conj() * v).re).sum();
        alpha.push(a);
        for _ in 0..2 {
            for qk in &q {
                let c: Complex64 = qk.iter().zip(&w).map(|(u, v)| u.conj() * v).sum();
                w.iter_mut().zip(qk).for_each(|(v, u)| *v -= c * u);
            }
        }
        let b = w.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if b <= 1e-14 * hnorm || q.len() == m {
            last_beta = if b <= 1e-14 * hnorm { 0.0 } else { b };
            break;
        }
        beta.push(b);
        q.push(w.iter().map(|a| a / b).collect());
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
    let coeffs: Vec<Complex64> = (0..k)
        .map(|row| {
            (0..k)
                .map(|l| {
                    let phase = Complex64::from_polar(1.0, -eig.eigenvalues[l] * dt);
                    phase * eig.eigenvectors[(row, l)] * eig.eigenvectors[(0, l)]
                })
                .sum()
        })
        .collect();
    let err = beta0 * last_beta * coeffs[k - 1].norm();
    let mut out = vec![Complex64::new(0.0, 0.0); dim];
    for (c, qk) in coeffs.iter().zip(&q) {
        let c = c * beta0;
        out.iter_mut().zip(qk).for_each(|(o, u)| *o += c * u);
    }
    (out, err)
}

fn propagate_interval(
    h: &dyn TimeDependentHamiltonian,
    x: Vec<Complex64>,
    t0: f64,
    dt: f64,
    control: &StepControl,
) -> Result<Vec<Complex64>> {
    let op = h.operator_at(t0 + 0.5 * dt)?;
    let (y, err) = krylov_expm(&op, &x, dt, control.krylov_dim);
    if err <= control.tolerance {
        return Ok(y);
    }
    let half = 0.5 * dt;
    if half < control.min_step {
        return Err(Error::StepUnderflow { time: t0, error: err });
    }
    drop(op);
    let mid = propagate_interval(h, x, t0, half, control)?;
    propagate_interval(h, mid, t0 + half, half, control)
}

/// Propagates `psi` over the schedule and returns one state per snapshot time.
pub fn evolve(
    psi: &StateVector,
    h: &dyn TimeDependentHamiltonian,
    sched: &EvolutionSchedule,
) -> Result<Vec<StateVector>> {
    sched.validate()?;
    if psi.dim() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), got: psi.dim() });
    }
    if (psi.norm() - 1.0).abs() > NORM_TOL {
        return Err(Error::Parameter(format!("initial state norm {} is not 1", psi.norm())));
    }
    let mut marks: Vec<f64> = vec![sched.t_start, sched.t_end];
    marks.extend(sched.snapshots.iter().copied());
    marks.extend(h.breakpoints().into_iter().filter(|&b| b > sched.t_start && b < sched.t_end));
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    marks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut out = Vec::with_capacity(sched.snapshots.len());
    let mut snap_iter = sched.snapshots.iter().peekable();
    let mut x = psi.amps.clone();
    let mut take_snapshots = |t: f64, x: &[Complex64], out: &mut Vec<StateVector>| {
        while let Some(&&s) = snap_iter.peek() {
            if (s - t).abs() < 1e-12 {
                out.push(StateVector { amps: x.to_vec(), time: s });
                snap_iter.next();
            } else {
                break;
            }
        }
    };
    take_snapshots(marks[0], &x, &mut out);
    for w in marks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n_sub = ((b - a) / sched.control.max_step - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n_sub as f64;
        for k in 0..n_sub {
            x = propagate_interval(h, x, a + k as f64 * dt, dt, &sched.control)?;
        }
        take_snapshots(b, &x, &mut out);
    }
    Ok(out)
}

/// Overlaps of each snapshot with a list of target states.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTrace {
    pub times: Vec<f64>,
    /// `overlaps[t][k] = |⟨target_k|ψ(t)⟩|²`.
    pub overlaps: Vec<Vec<f64>>,
    /// `manifold[t][k] = Σ_{l ≤ k} overlaps[t][l]`.
    pub manifold: Vec<Vec<f64>>,
}

pub fn overlap_trace(snapshots: &[StateVector], targets: &[StateVector]) -> Result<OverlapTrace> {
    let mut times = Vec::new();
    let mut overlaps = Vec::new();
    let mut manifold = Vec::new();
    for s in snapshots {
        let row: Vec<f64> = targets
            .iter()
            .map(|t| t.overlap(s).map(|v| v.clamp(0.0, 1.0)))
            .collect::<Result<_>>()?;
        let cum = row
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(f64::min(*acc, 1.0))
            })
            .collect();
        times.push(s.time);
        overlaps.push(row);
        manifold.push(cum);
    }
    Ok(OverlapTrace { times, overlaps, manifold })
}
