//! Run configuration: TOML with an `include` list merged underneath the
//! including file.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tjsim_core::geometry::{build_ladder, build_triangular2d, build_triangular_disk, LatticeGeometry, LatticeKind};
use tjsim_core::hamiltonian::{mhz, BondCouplings, CouplingSet, LightShiftProgram, RampProfile, SignMode};
use tjsim_core::hilbert::{Configuration, SectorBasis};
use tjsim_core::initmodel::{FitSettings, DEFAULT_REGION_SIZE};
use tjsim_core::measurement::MeasurementBasis;
use tjsim_core::observables::SpinAxis;
use tjsim_core::spectra::{Normalization, SweepReference};

/// Validation failure tied to a dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Ladder,
    Triangular2d,
    Disk,
}

fn default_spacing() -> f64 {
    14.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    #[serde(default)]
    pub n_sites: usize,
    /// Lattice spacing in µm.
    #[serde(default = "default_spacing")]
    pub a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_over_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_over_a: Option<f64>,
    /// Explicit site positions in µm; overrides the builders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<LatticeGeometry, ConfigError> {
        let err = |e: tjsim_core::Error| invalid("geometry", e.to_string());
        if let Some(p) = &self.positions {
            if p.is_empty() {
                return Err(invalid("geometry.positions", "no sites"));
            }
            let kind = if self.kind == GeometryKind::Ladder { LatticeKind::Ladder } else { LatticeKind::Triangular2d };
            let h = self.h_over_a.unwrap_or(0.0) * self.a;
            return LatticeGeometry::from_coordinates(kind, p.clone(), self.a, h).map_err(err);
        }
        if !(self.a > 0.0) {
            return Err(invalid("geometry.a", "spacing must be positive"));
        }
        match self.kind {
            GeometryKind::Ladder => {
                if self.n_sites == 0 {
                    return Err(invalid("geometry.n_sites", "empty geometry"));
                }
                let r = self.h_over_a.ok_or_else(|| invalid("geometry.h_over_a", "required for a ladder"))?;
                build_ladder(self.n_sites, self.a, r * self.a).map_err(err)
            }
            GeometryKind::Triangular2d => {
                if self.n_sites == 0 {
                    return Err(invalid("geometry.n_sites", "empty geometry"));
                }
                build_triangular2d(self.n_sites, self.a).map_err(err)
            }
            GeometryKind::Disk => {
                let r = self.radius_over_a.ok_or_else(|| invalid("geometry.radius_over_a", "required for a disk"))?;
                build_triangular_disk(r * self.a, self.a).map_err(err)
            }
        }
    }
}

/// Starts from the default table couplings; any field given replaces it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_up_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_down_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j_perp_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j_z_mhz: Option<f64>,
    /// Distance in µm at which the amplitudes apply; defaults to `geometry.a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_ref: Option<f64>,
    #[serde(default)]
    pub sign: SignMode,
    /// Per-bond rung and leg values of the equilateral ladder.
    #[serde(default)]
    pub ladder_table: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
}

impl CouplingsConfig {
    pub fn build(&self, geometry: &GeometryConfig) -> Result<CouplingSet, ConfigError> {
        let mut c = CouplingSet::table_default(self.a_ref.unwrap_or(geometry.a));
        if let Some(v) = self.t_up_mhz {
            c.t_up = mhz(v);
        }
        if let Some(v) = self.t_down_mhz {
            c.t_dn = mhz(v);
        }
        if let Some(v) = self.j_perp_mhz {
            c.j_perp = mhz(v);
        }
        if let Some(v) = self.j_z_mhz {
            c.j_z = mhz(v);
        }
        c.cutoff = self.cutoff;
        c = c.with_sign_mode(self.sign);
        if self.ladder_table {
            if geometry.kind != GeometryKind::Ladder {
                return Err(invalid("couplings.ladder_table", "only defined for ladders"));
            }
            c = c.with_ladder_table(
                geometry.n_sites,
                BondCouplings::rung_equilateral(),
                BondCouplings::leg_equilateral(),
            );
        }
        c.validate().map_err(|e| invalid("couplings", e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorConfig {
    #[serde(default)]
    pub holes: Vec<usize>,
    /// Sites of the up spins (magnons) in the target product state.
    #[serde(default)]
    pub ups: Vec<usize>,
}

impl SectorConfig {
    pub fn basis(&self, n_sites: usize) -> Result<SectorBasis, ConfigError> {
        SectorBasis::new(n_sites, self.holes.len(), Some(self.ups.len())).map_err(|e| invalid("sector", e.to_string()))
    }

    pub fn product_state(&self, n_sites: usize) -> Result<Configuration, ConfigError> {
        Configuration::with_defects(n_sites, &self.holes, &self.ups).map_err(|e| invalid("sector", e.to_string()))
    }

    pub fn defects(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.holes.iter().chain(&self.ups).copied().collect();
        d.sort_unstable();
        d
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundConfig {
    #[serde(default = "one")]
    pub n_states: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    #[default]
    Leg,
    Rung,
}

fn default_magnons() -> Vec<usize> {
    vec![1]
}

fn nearest_neighbor() -> SweepReference {
    SweepReference::NearestNeighbor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Explicit list of `h/a` values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_over_a: Option<Vec<f64>>,
    /// `[start, stop]` sampled at `points` evenly spaced values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default = "default_magnons")]
    pub magnons: Vec<usize>,
    #[serde(default = "nearest_neighbor")]
    pub reference: SweepReference,
    #[serde(default)]
    pub normalization: NormalizationKind,
}

impl SweepConfig {
    pub fn ratios(&self) -> Result<Vec<f64>, ConfigError> {
        match (&self.h_over_a, self.range, self.points) {
            (Some(r), None, None) if !r.is_empty() => Ok(r.clone()),
            (None, Some([a, b]), Some(n)) if n >= 2 => {
                Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect())
            }
            (None, Some(_), Some(1)) => Ok(vec![self.range.unwrap()[0]]),
            _ => Err(invalid("sweep", "give either h_over_a or range with points")),
        }
    }

    pub fn normalization(&self) -> Normalization {
        match self.normalization {
            NormalizationKind::Leg => Normalization::Leg,
            NormalizationKind::Rung => Normalization::Rung,
        }
    }
}

fn d25() -> f64 {
    25.0
}
fn d5() -> f64 {
    5.0
}
fn d1() -> f64 {
    1.0
}
fn d4() -> f64 {
    4.0
}
fn d10() -> usize {
    10
}
fn default_snapshots() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampConfig {
    #[serde(default = "d25")]
    pub delta0_mhz: f64,
    #[serde(default = "d5")]
    pub delta_knee_mhz: f64,
    #[serde(default = "d1")]
    pub t_knee: f64,
    #[serde(default = "d1")]
    pub tau: f64,
    #[serde(default = "d4")]
    pub t_end: f64,
    #[serde(default = "default_snapshots")]
    pub snapshots: Vec<f64>,
    /// Defaults to `sector.ups`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnon_sites: Option<Vec<usize>>,
    /// Defaults to `sector.holes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole_sites: Option<Vec<usize>>,
    /// Number of low-lying eigenstates to project the snapshots on.
    #[serde(default = "d10")]
    pub n_targets: usize,
}

impl RampConfig {
    pub fn program(&self, sector: &SectorConfig) -> LightShiftProgram {
        let profile = RampProfile {
            delta0: mhz(self.delta0_mhz),
            delta_knee: mhz(self.delta_knee_mhz),
            t_knee: self.t_knee,
            tau: self.tau,
            ..RampProfile::default()
        };
        LightShiftProgram::new(
            self.magnon_sites.clone().unwrap_or_else(|| sector.ups.clone()),
            self.hole_sites.clone().unwrap_or_else(|| sector.holes.clone()),
            profile,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    Ground,
    Ramp,
}

fn default_bases() -> Vec<MeasurementBasis> {
    vec![MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    #[serde(default = "default_bases")]
    pub bases: Vec<MeasurementBasis>,
    pub shots: usize,
    /// Apply the default detection-error channel.
    #[serde(default = "yes")]
    pub channel: bool,
    pub seed: u64,
    /// Defaults to the ramp when a `[ramp]` block exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<StateSource>,
    /// Snapshot time to measure; defaults to the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

fn z_axis() -> SpinAxis {
    SpinAxis::Z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    #[serde(default = "z_axis")]
    pub axis: SpinAxis,
    /// Site triples for the connected three-body correlator.
    #[serde(default)]
    pub triples: Vec<[usize; 3]>,
}

fn region_size() -> usize {
    DEFAULT_REGION_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitModelConfig {
    /// Correlated region; defaults to the sites closest to the defects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<usize>>,
    #[serde(default = "region_size")]
    pub region_size: usize,
    #[serde(default)]
    pub fit: FitSettings,
    /// Initial configurations drawn from the fitted model.
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub couplings: CouplingsConfig,
    #[serde(default)]
    pub sector: SectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground: Option<GroundConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<RampConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initmodel: Option<InitModelConfig>,
}

/// A parsed config together with every file that went into it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub files: Vec<PathBuf>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_value(path: &Path, stack: &mut Vec<PathBuf>, files: &mut Vec<PathBuf>) -> anyhow::Result<toml::Value> {
    let canonical = fs::canonicalize(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    if stack.contains(&canonical) {
        anyhow::bail!("include cycle through {}", path.display());
    }
    let text = fs::read_to_string(&canonical)?;
    let mut value: toml::Value =
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    files.push(path.to_path_buf());
    let includes = match value.as_table_mut().and_then(|t| t.remove("include")) {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(anyhow::anyhow!("{}: include entries must be paths, got {other}", path.display())),
            })
            .collect::<anyhow::Result<Vec<_>>>()?,
        Some(other) => anyhow::bail!("{}: include must be a list of paths, got {other}", path.display()),
    };
    stack.push(canonical.clone());
    let dir = canonical.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = toml::Value::Table(Default::default());
    for inc in includes {
        let v = load_value(&dir.join(inc), stack, files)?;
        merge(&mut merged, v);
    }
    stack.pop();
    merge(&mut merged, value);
    Ok(merged)
}

/// Reads `path`, resolving includes depth-first; later files win.
pub fn load(path: &Path) -> anyhow::Result<LoadedConfig> {
    let mut files = Vec::new();
    let value = load_value(path, &mut Vec::new(), &mut files)?;
    let config: RunConfig = value.try_into().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(LoadedConfig { config, files })
}

fn check_sites(path: &str, sites: &[usize], n: usize) -> Result<(), ConfigError> {
    let mut seen = HashSet::new();
    for (k, &s) in sites.iter().enumerate() {
        if s >= n {
            return Err(invalid(format!("{path}[{k}]"), format!("site {s} out of range for {n} sites")));
        }
        if !seen.insert(s) {
            return Err(invalid(format!("{path}[{k}]"), format!("site {s} repeated")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Checks every cross-reference; the geometry is built on the way.
    pub fn validate(&self) -> Result<LatticeGeometry, ConfigError> {
        let g = self.geometry.build()?;
        let n = g.n_sites();
        self.couplings.build(&self.geometry)?;
        check_sites("sector.holes", &self.sector.holes, n)?;
        check_sites("sector.ups", &self.sector.ups, n)?;
        if let Some(&s) = self.sector.holes.iter().find(|s| self.sector.ups.contains(s)) {
            return Err(invalid("sector", format!("site {s} is both a hole and an up spin")));
        }
        if let Some(gr) = &self.ground {
            if gr.n_states == 0 {
                return Err(invalid("ground.n_states", "must be positive"));
            }
        }
        if let Some(s) = &self.sweep {
            if self.geometry.kind != GeometryKind::Ladder {
                return Err(invalid("sweep", "binding sweeps run on ladders"));
            }
            s.ratios()?;
            if let Some((k, m)) = s.magnons.iter().enumerate().find(|(_, m)| !(1..=2).contains(*m)) {
                return Err(invalid(format!("sweep.magnons[{k}]"), format!("{m} magnons; 1 or 2 supported")));
            }
        }
        if let Some(r) = &self.ramp {
            let p = r.program(&self.sector);
            check_sites("ramp.magnon_sites", &p.magnon_sites, n)?;
            check_sites("ramp.hole_sites", &p.hole_sites, n)?;
            p.profile.validate().map_err(|e| invalid("ramp", e.to_string()))?;
            if !(r.t_end > 0.0) {
                return Err(invalid("ramp.t_end", "must be positive"));
            }
            if let Some((k, t)) = r.snapshots.iter().enumerate().find(|(_, &t)| !(0.0..=r.t_end).contains(&t)) {
                return Err(invalid(format!("ramp.snapshots[{k}]"), format!("{t} outside [0, t_end]")));
            }
            if r.n_targets == 0 {
                return Err(invalid("ramp.n_targets", "must be positive"));
            }
        }
        if let Some(m) = &self.measure {
            if m.bases.is_empty() {
                return Err(invalid("measure.bases", "no bases"));
            }
            if m.shots == 0 {
                return Err(invalid("measure.shots", "must be positive"));
            }
            if m.source == Some(StateSource::Ramp) && self.ramp.is_none() {
                return Err(invalid("measure.source", "ramp requested but no [ramp] block"));
            }
            if let Some(t) = m.time {
                let ok = self.ramp.as_ref().is_some_and(|r| r.snapshots.contains(&t));
                if !ok || m.source == Some(StateSource::Ground) {
                    return Err(invalid("measure.time", format!("{t} is not a ramp snapshot time")));
                }
            }
        }
        if let Some(r) = &self.reconstruct {
            let needed = self.reconstruct_bases();
            let have = self.measure.as_ref().map(|m| m.bases.clone()).unwrap_or_default();
            if let Some(b) = needed.iter().find(|b| !have.contains(b)) {
                return Err(invalid("measure.bases", format!("reconstruction needs basis {b}")));
            }
            for (k, t) in r.triples.iter().enumerate() {
                check_sites(&format!("reconstruct.triples[{k}]"), t, n)?;
            }
        }
        if let Some(im) = &self.initmodel {
            if let Some(region) = &im.region {
                check_sites("initmodel.region", region, n)?;
            } else if im.region_size > n {
                return Err(invalid("initmodel.region_size", format!("{} exceeds {n} sites", im.region_size)));
            }
            im.fit.validate().map_err(|e| invalid("initmodel.fit", e.to_string()))?;
        }
        Ok(g)
    }

    /// Up, hole and down bases for the configured reconstruction axis.
    pub fn reconstruct_bases(&self) -> [MeasurementBasis; 3] {
        match self.reconstruct.as_ref().map(|r| r.axis) {
            Some(SpinAxis::X) => [MeasurementBasis::XPlus, MeasurementBasis::Hole, MeasurementBasis::XMinus],
            _ => [MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down],
        }
    }

    /// Replaces every seed in the config by `k`.
    pub fn override_seeds(&mut self, k: u64) {
        if let Some(m) = &mut self.measure {
            m.seed = k;
        }
        if let Some(im) = &mut self.initmodel {
            im.fit.seed = k;
            im.sample_seed = k;
        }
    }

    pub fn measure_source(&self) -> StateSource {
        self.measure
            .as_ref()
            .and_then(|m| m.source)
            .unwrap_or(if self.ramp.is_some() { StateSource::Ramp } else { StateSource::Ground })
    }
}
