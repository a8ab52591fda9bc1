//! Simulated shots: configurations drawn from `|ψ|²`, mapped per site to an
//! imaged/lost bit, optionally through the five-state detection-error channel.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::geometry::LatticeGeometry;
use crate::hilbert::{binomial, site_code, Configuration, LocalState, SectorBasis};
use crate::observables::{histogram_from_marks, ConfigurationHistogram, HistogramMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementBasis {
    Down,
    Up,
    Hole,
    /// Imaging without deexcitation: only ground-state atoms survive.
    Ground,
    /// Up spins mapped to the presence of an atom.
    UpPresence,
    XPlus,
    XMinus,
}

impl MeasurementBasis {
    pub const ALL: [MeasurementBasis; 7] = [
        MeasurementBasis::Down,
        MeasurementBasis::Up,
        MeasurementBasis::Hole,
        MeasurementBasis::Ground,
        MeasurementBasis::UpPresence,
        MeasurementBasis::XPlus,
        MeasurementBasis::XMinus,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MeasurementBasis::Down => "down",
            MeasurementBasis::Up => "up",
            MeasurementBasis::Hole => "hole",
            MeasurementBasis::Ground => "ground",
            MeasurementBasis::UpPresence => "up_presence",
            MeasurementBasis::XPlus => "x_plus",
            MeasurementBasis::XMinus => "x_minus",
        }
    }

    /// Whether the measured population is the fraction of lost atoms.
    pub fn signal_is_loss(self) -> bool {
        matches!(self, MeasurementBasis::Up | MeasurementBasis::Hole)
    }

    /// Rotation sign applied before a down-basis readout, if any.
    pub fn rotation(self) -> Option<i8> {
        match self {
            MeasurementBasis::XPlus => Some(1),
            MeasurementBasis::XMinus => Some(-1),
            _ => None,
        }
    }

    /// Basis whose error row governs the readout after any rotation.
    pub fn readout(self) -> MeasurementBasis {
        match self {
            MeasurementBasis::XPlus | MeasurementBasis::XMinus => MeasurementBasis::Down,
            b => b,
        }
    }
}

impl fmt::Display for MeasurementBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MeasurementBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasurementBasis::ALL
            .into_iter()
            .find(|b| b.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown measurement basis '{s}'")))
    }
}

/// Primitive detection-error rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRates {
    /// Mechanical losses and imaging infidelity.
    pub eps_m: f64,
    /// Decay of the S level during the sequence.
    pub eps_s: f64,
    /// Decay of the G level.
    pub eps_g: f64,
    /// Decay of the P' level.
    pub eps_p_prime: f64,
    /// Decay of an even G/P' mixture.
    pub eps_gp_prime: f64,
    /// Black-body transfer out of S'.
    pub bbr_s_prime: f64,
    /// Black-body transfer out of P.
    pub bbr_p: f64,
    /// Failed deexcitation.
    pub deex: f64,
}

impl Default for ErrorRates {
    fn default() -> Self {
        ErrorRates {
            eps_m: 0.002,
            eps_s: 0.055,
            eps_g: 0.013,
            eps_p_prime: 0.026,
            eps_gp_prime: 0.02,
            bbr_s_prime: 0.02,
            bbr_p: 0.02,
            deex: 0.02,
        }
    }
}

impl ErrorRates {
    pub fn zero() -> Self {
        ErrorRates {
            eps_m: 0.0,
            eps_s: 0.0,
            eps_g: 0.0,
            eps_p_prime: 0.0,
            eps_gp_prime: 0.0,
            bbr_s_prime: 0.0,
            bbr_p: 0.0,
            deex: 0.0,
        }
    }

    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("eps_m", self.eps_m),
            ("eps_s", self.eps_s),
            ("eps_g", self.eps_g),
            ("eps_p_prime", self.eps_p_prime),
            ("eps_gp_prime", self.eps_gp_prime),
            ("bbr_s_prime", self.bbr_s_prime),
            ("bbr_p", self.bbr_p),
            ("deex", self.deex),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("error rate {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Column of the five true states in the error matrix: `L, g, S=↓, P=h, S'=↑`.
pub fn column(s: LocalState) -> usize {
    match s {
        LocalState::Lost => 0,
        LocalState::Ground => 1,
        LocalState::Down => 2,
        LocalState::Hole => 3,
        LocalState::Up => 4,
    }
}

/// True states in column order.
pub const COLUMN_STATES: [LocalState; 5] =
    [LocalState::Lost, LocalState::Ground, LocalState::Down, LocalState::Hole, LocalState::Up];

/// Rows `⟨n^↓⟩, ⟨n^↑⟩, ⟨n^h⟩, ⟨n^g⟩`; columns `L, g, S, P, S'`. Entry `[α][β]` is
/// the probability that a site truly in `β` registers in the `α` population.
pub fn derive_error_matrix(r: &ErrorRates) -> Result<[[f64; 5]; 4]> {
    r.validate()?;
    let m = r.eps_m;
    let md = r.eps_m + r.deex;
    Ok([
        [0.0, 1.0 - m, 1.0 - md, r.eps_g, r.eps_gp_prime],
        [1.0, m, md, md + r.bbr_p, 1.0 - r.eps_p_prime],
        [1.0, m, md, 1.0 - r.eps_g, md + r.bbr_s_prime],
        [0.0, 1.0 - m, r.eps_s, r.eps_g, r.eps_gp_prime],
    ])
}

/// Imaging probabilities for the up-presence sequence: holes frozen to G, the
/// original down spins frozen to P' after the swap, original up spins deexcited.
pub fn derive_up_presence_row(r: &ErrorRates) -> Result<[f64; 5]> {
    r.validate()?;
    Ok([0.0, 1.0 - r.eps_m, r.eps_gp_prime, r.eps_g, 1.0 - r.eps_m - r.deex])
}

/// Per-site, independent detection errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorChannel {
    rates: ErrorRates,
    matrix: [[f64; 5]; 4],
    up_presence: [f64; 5],
}

impl ErrorChannel {
    pub fn new(rates: ErrorRates) -> Result<Self> {
        Ok(ErrorChannel { matrix: derive_error_matrix(&rates)?, up_presence: derive_up_presence_row(&rates)?, rates })
    }

    /// Error-free detection: the exact state-to-basis indicator.
    pub fn ideal() -> Self {
        Self::new(ErrorRates::zero()).expect("zero rates are valid")
    }

    pub fn rates(&self) -> &ErrorRates {
        &self.rates
    }

    pub fn matrix(&self) -> &[[f64; 5]; 4] {
        &self.matrix
    }

    pub fn is_ideal(&self) -> bool {
        self.rates == ErrorRates::zero()
    }

    /// Row of signal probabilities for the readout of `basis`.
    pub fn row(&self, basis: MeasurementBasis) -> [f64; 5] {
        match basis.readout() {
            MeasurementBasis::Down => self.matrix[0],
            MeasurementBasis::Up => self.matrix[1],
            MeasurementBasis::Hole => self.matrix[2],
            MeasurementBasis::Ground => self.matrix[3],
            _ => self.up_presence,
        }
    }

    /// Probability that a site truly in `s` registers in the measured population.
    pub fn signal_probability(&self, basis: MeasurementBasis, s: LocalState) -> f64 {
        self.row(basis)[column(s)]
    }

    pub fn imaged_probability(&self, basis: MeasurementBasis, s: LocalState) -> f64 {
        let p = self.signal_probability(basis, s);
        if basis.signal_is_loss() {
            1.0 - p
        } else {
            p
        }
    }

    /// `ε · P` for a five-state population in column order.
    pub fn apply(&self, basis: MeasurementBasis, population: &[f64; 5]) -> f64 {
        self.row(basis).iter().zip(population).map(|(e, p)| e * p).sum()
    }
}

impl Default for ErrorChannel {
    fn default() -> Self {
        Self::new(ErrorRates::default()).expect("default rates are valid")
    }
}

fn rotation_matrix(sign: i8) -> [[f64; 2]; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if sign >= 0 {
        [[s, s], [-s, s]]
    } else {
        [[s, -s], [s, s]]
    }
}

/// Embeds a state into the free-magnetization basis with the same hole number.
pub fn embed_free(psi: &StateVector, basis: &SectorBasis) -> Result<(SectorBasis, StateVector)> {
    psi.check_dim(basis)?;
    if basis.n_up().is_none() {
        return Ok((basis.clone(), psi.clone()));
    }
    let free = SectorBasis::new(basis.n_sites(), basis.n_holes(), None)?;
    let mut amps = vec![Complex64::new(0.0, 0.0); free.dim()];
    for (m, a) in psi.amplitudes().iter().enumerate() {
        let k = free.rank_word(basis.word(m)).ok_or_else(|| Error::Sector("embedding failed".into()))?;
        amps[k] = *a;
    }
    Ok((free, StateVector::new(amps, psi.time())?))
}

/// Global `±π/2` rotation on every spin, identity on holes. The `+` rotation
/// takes `(|↓⟩+|↑⟩)/√2` to `|↓⟩`; the `−` rotation takes `(|↓⟩−|↑⟩)/√2` to `|↓⟩`.
///
/// The result lives in the free-magnetization basis, which is returned.
pub fn rotate_for_x(psi: &StateVector, basis: &SectorBasis, sign: i8) -> Result<(SectorBasis, StateVector)> {
    let (free, state) = embed_free(psi, basis)?;
    let n = free.n_sites();
    let r = rotation_matrix(sign);
    let mut amps = state.into_amplitudes();
    for site in 0..n {
        let rem = n - site - 1;
        for m in 0..free.dim() {
            let w = free.word(m);
            if site_code(w, site) != LocalState::Down as u128 {
                continue;
            }
            // In the free basis the up partner sits a fixed number of completions later.
            let holes_before = (0..site).filter(|&k| site_code(w, k) == LocalState::Hole as u128).count();
            let hr = free.n_holes() - holes_before;
            if hr > rem {
                continue;
            }
            let mu = m + ((binomial(rem, hr) << (rem - hr)) as usize);
            let (ad, au) = (amps[m], amps[mu]);
            amps[m] = ad * r[0][0] + au * r[0][1];
            amps[mu] = ad * r[1][0] + au * r[1][1];
        }
    }
    Ok((free, StateVector::new(amps, psi.time())?))
}

/// Outcome statistics of one basis, precomputed from a state.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    basis: SectorBasis,
    probabilities: Vec<f64>,
    mbasis: MeasurementBasis,
    channel: ErrorChannel,
}

impl OutcomeModel {
    pub fn new(psi: &StateVector, basis: &SectorBasis, mbasis: MeasurementBasis, channel: Option<&ErrorChannel>) -> Result<Self> {
        psi.check_dim(basis)?;
        let (b, probs) = match mbasis.rotation() {
            Some(sign) => {
                let (free, rotated) = rotate_for_x(psi, basis, sign)?;
                (free, rotated.probabilities())
            }
            None => (basis.clone(), psi.probabilities()),
        };
        Ok(OutcomeModel {
            basis: b,
            probabilities: probs,
            mbasis,
            channel: channel.cloned().unwrap_or_else(ErrorChannel::ideal),
        })
    }

    pub fn measurement_basis(&self) -> MeasurementBasis {
        self.mbasis
    }

    pub fn n_sites(&self) -> usize {
        self.basis.n_sites()
    }

    /// Exact probability that each listed site shows `pattern` (true = signal).
    pub fn joint_signal(&self, sites: &[usize], pattern: &[bool]) -> Result<f64> {
        if sites.len() != pattern.len() {
            return Err(Error::DimensionMismatch { expected: sites.len(), got: pattern.len() });
        }
        for &s in sites {
            if s >= self.n_sites() {
                return Err(Error::SiteOutOfRange { site: s, n_sites: self.n_sites() });
            }
        }
        let row = self.channel.row(self.mbasis);
        let mut total = 0.0;
        for (m, &p) in self.probabilities.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let w = self.basis.word(m);
            let mut f = p;
            for (&s, &want) in sites.iter().zip(pattern) {
                let q = row[column(crate::hilbert::site_state(w, s))];
                f *= if want { q } else { 1.0 - q };
                if f == 0.0 {
                    break;
                }
            }
            total += f;
        }
        Ok(total)
    }

    pub fn signal_mean(&self, site: usize) -> Result<f64> {
        self.joint_signal(&[site], &[true])
    }
}

/// Per-site outcomes of one basis. `true` means an atom was imaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotBatch {
    pub basis: MeasurementBasis,
    pub n_sites: usize,
    pub seed: u64,
    /// Rates of the error channel used, `None` for ideal detection.
    pub channel: Option<ErrorRates>,
    pub imaged: Vec<Vec<bool>>,
}

fn draw_index(cdf: &[f64], u: f64) -> usize {
    let k = cdf.partition_point(|&c| c <= u);
    k.min(cdf.len() - 1)
}

fn shot_rng(seed: u64, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    rng
}

fn channel_tag(channel: Option<&ErrorChannel>) -> Option<ErrorRates> {
    channel.filter(|c| !c.is_ideal()).map(|c| *c.rates())
}

fn read_site<R: Rng>(row: &[f64; 5], basis: MeasurementBasis, s: LocalState, rng: &mut R) -> bool {
    let p = row[column(s)];
    let signal = if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.gen::<f64>() < p
    };
    signal != basis.signal_is_loss()
}

/// Draws `n` shots from `|ψ|²`; `x_±` bases rotate the state first.
pub fn sample_shots(
    psi: &StateVector,
    basis: &SectorBasis,
    mbasis: MeasurementBasis,
    channel: Option<&ErrorChannel>,
    n: usize,
    seed: u64,
) -> Result<ShotBatch> {
    psi.check_dim(basis)?;
    let rotated;
    let (b, probs) = match mbasis.rotation() {
        Some(sign) => {
            rotated = rotate_for_x(psi, basis, sign)?;
            (&rotated.0, rotated.1.probabilities())
        }
        None => (basis, psi.probabilities()),
    };
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let ideal = ErrorChannel::ideal();
    let ch = channel.unwrap_or(&ideal);
    let row = ch.row(mbasis);
    let n_sites = b.n_sites();
    let imaged = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = shot_rng(seed, k);
            let m = draw_index(&cdf, rng.gen::<f64>() * acc);
            let w = b.word(m);
            (0..n_sites)
                .map(|s| read_site(&row, mbasis, crate::hilbert::site_state(w, s), &mut rng))
                .collect()
        })
        .collect();
    Ok(ShotBatch { basis: mbasis, n_sites, seed, channel: channel_tag(channel), imaged })
}

/// One shot per five-state configuration. Rotated bases are not available here.
pub fn measure_configurations(
    configs: &[Configuration],
    mbasis: MeasurementBasis,
    channel: Option<&ErrorChannel>,
    seed: u64,
) -> Result<ShotBatch> {
    if mbasis.rotation().is_some() {
        return Err(Error::Basis {
            basis: mbasis.tag().into(),
            reason: "rotated readout needs a state vector, not classical configurations".into(),
        });
    }
    let n_sites = configs.first().map(|c| c.n_sites()).unwrap_or(0);
    if let Some(c) = configs.iter().find(|c| c.n_sites() != n_sites) {
        return Err(Error::DimensionMismatch { expected: n_sites, got: c.n_sites() });
    }
    let ideal = ErrorChannel::ideal();
    let row = channel.unwrap_or(&ideal).row(mbasis);
    let imaged = configs
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = shot_rng(seed, k);
            c.0.iter().map(|&s| read_site(&row, mbasis, s, &mut rng)).collect()
        })
        .collect();
    Ok(ShotBatch { basis: mbasis, n_sites, seed, channel: channel_tag(channel), imaged })
}

/// `sqrt(p(1−p)/n)`.
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

impl ShotBatch {
    pub fn len(&self) -> usize {
        self.imaged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imaged.is_empty()
    }

    /// Whether the site registered in the measured population.
    pub fn signal(&self, shot: usize, site: usize) -> bool {
        self.imaged[shot][site] != self.basis.signal_is_loss()
    }

    /// Estimated population per site.
    pub fn signal_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sites];
        for k in 0..self.len() {
            for (s, o) in out.iter_mut().enumerate() {
                if self.signal(k, s) {
                    *o += 1.0;
                }
            }
        }
        let n = self.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Fraction of shots where every listed site shows `pattern`.
    pub fn joint_signal(&self, sites: &[usize], pattern: &[bool]) -> Result<f64> {
        if sites.len() != pattern.len() {
            return Err(Error::DimensionMismatch { expected: sites.len(), got: pattern.len() });
        }
        if let Some(&s) = sites.iter().find(|&&s| s >= self.n_sites) {
            return Err(Error::SiteOutOfRange { site: s, n_sites: self.n_sites });
        }
        if self.is_empty() {
            return Err(Error::MissingData("empty shot batch".into()));
        }
        let hits = (0..self.len())
            .filter(|&k| sites.iter().zip(pattern).all(|(&s, &want)| self.signal(k, s) == want))
            .count();
        Ok(hits as f64 / self.len() as f64)
    }

    /// Histogram of signal patterns. Magnon pairs need an up-type basis,
    /// three-defect patterns need the down basis (absences are the defects).
    pub fn configuration_histogram(&self, g: &LatticeGeometry, mode: HistogramMode) -> Result<ConfigurationHistogram> {
        if g.n_sites() != self.n_sites {
            return Err(Error::DimensionMismatch { expected: g.n_sites(), got: self.n_sites });
        }
        let (ok, want_signal) = match mode {
            HistogramMode::MagnonPair => (matches!(self.basis, MeasurementBasis::Up | MeasurementBasis::UpPresence), true),
            HistogramMode::ThreeDefect => (self.basis == MeasurementBasis::Down, false),
        };
        if !ok {
            return Err(Error::Basis {
                basis: self.basis.tag().into(),
                reason: format!("{mode:?} histograms need a different readout"),
            });
        }
        let events = (0..self.len()).map(|k| {
            let marks = (0..self.n_sites).filter(|&s| self.signal(k, s) == want_signal).map(|s| (s, 'x')).collect();
            (marks, 1.0)
        });
        histogram_from_marks(events, g, mode)
    }

    /// Text format: `key: value` header lines, a `---` separator, then one
    /// line per shot with `1` for imaged and `0` for lost.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "basis: {}", self.basis)?;
        writeln!(w, "sites: {}", self.n_sites)?;
        writeln!(w, "shots: {}", self.len())?;
        writeln!(w, "seed: {}", self.seed)?;
        match &self.channel {
            None => writeln!(w, "channel: ideal")?,
            Some(r) => {
                let parts: Vec<String> = r.named().iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(w, "channel: {}", parts.join(","))?;
            }
        }
        writeln!(w, "---")?;
        for shot in &self.imaged {
            let line: String = shot.iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut basis = None;
        let mut n_sites = None;
        let mut shots = None;
        let mut seed = 0;
        let mut channel = None;
        for line in lines.by_ref() {
            let line = line?;
            let line = line.trim();
            if line == "---" {
                break;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| Error::Parse(format!("bad header line '{line}'")))?;
            let v = v.trim();
            let num = |v: &str| v.parse::<u64>().map_err(|_| Error::Parse(format!("bad number '{v}'")));
            match k.trim() {
                "basis" => basis = Some(v.parse::<MeasurementBasis>()?),
                "sites" => n_sites = Some(num(v)? as usize),
                "shots" => shots = Some(num(v)? as usize),
                "seed" => seed = num(v)?,
                "channel" if v == "ideal" => channel = None,
                "channel" => channel = Some(parse_rates(v)?),
                other => return Err(Error::Parse(format!("unknown header key '{other}'"))),
            }
        }
        let basis = basis.ok_or_else(|| Error::Parse("missing basis".into()))?;
        let n_sites = n_sites.ok_or_else(|| Error::Parse("missing sites".into()))?;
        let mut imaged = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.len() != n_sites {
                return Err(Error::DimensionMismatch { expected: n_sites, got: line.len() });
            }
            let shot = line
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(Error::Parse(format!("bad outcome character '{c}'"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            imaged.push(shot);
        }
        if let Some(s) = shots {
            if s != imaged.len() {
                return Err(Error::DimensionMismatch { expected: s, got: imaged.len() });
            }
        }
        Ok(ShotBatch { basis, n_sites, seed, channel, imaged })
    }
}

fn parse_rates(v: &str) -> Result<ErrorRates> {
    let mut r = ErrorRates::zero();
    for part in v.split(',') {
        let (k, x) = part.split_once('=').ok_or_else(|| Error::Parse(format!("bad rate '{part}'")))?;
        let x: f64 = x.trim().parse().map_err(|_| Error::Parse(format!("bad rate value '{x}'")))?;
        let slot = match k.trim() {
            "eps_m" => &mut r.eps_m,
            "eps_s" => &mut r.eps_s,
            "eps_g" => &mut r.eps_g,
            "eps_p_prime" => &mut r.eps_p_prime,
            "eps_gp_prime" => &mut r.eps_gp_prime,
            "bbr_s_prime" => &mut r.bbr_s_prime,
            "bbr_p" => &mut r.bbr_p,
            "deex" => &mut r.deex,
            other => return Err(Error::Parse(format!("unknown rate '{other}'"))),
        };
        *slot = x;
    }
    r.validate()?;
    Ok(r)
}
