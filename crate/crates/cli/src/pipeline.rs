//! Stages of a run. Each stage renders its files in memory; the runner then
//! writes them one by one and records their hashes in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use tjsim_core::dynamics::{evolve, overlap_trace, read_snapshots, write_snapshots, EvolutionSchedule, RampedHamiltonian, StateVector};
use tjsim_core::geometry::{LatticeGeometry, LatticeKind};
use tjsim_core::hamiltonian::build_tj;
use tjsim_core::hilbert::SectorBasis;
use tjsim_core::initmodel::{default_region, fit, sample_initial_configurations, BoltzmannModel, PointData, FIT_BASES};
use tjsim_core::measurement::{sample_shots, ErrorChannel, MeasurementBasis, ShotBatch};
use tjsim_core::observables::{com_distribution, distance_correlation, relative_correlation_map, HoleMagnonPairs, SpinAxis};
use tjsim_core::reconstruction::{
    connected_three_body, hole_frame_nearest_neighbor, hole_magnon_pairs, reconstruct_pair_tables, BasisTriple,
};
use tjsim_core::spectra::{binding_sweep, lowest_eigenpairs, write_sweep_table};
use tjsim_core::toymodel::{effective_tunneling_sign, plaquette_spectrum, PlaquetteSector, SpinPair};

use crate::config::{LoadedConfig, RunConfig, StateSource};
use crate::manifest::{sha256_hex, Manifest, StageRecord, StageStatus};

pub const SNAPSHOTS: &str = "snapshots.tsv";
pub const GROUND_STATE: &str = "ground_state.tsv";

pub fn shot_file(b: MeasurementBasis) -> String {
    format!("shots_{}.txt", b.tag())
}

/// Files produced by one stage, in emission order.
#[derive(Default)]
pub struct Outputs(Vec<(String, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.0.push((name.into(), bytes));
    }

    fn render(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Vec<u8>) -> tjsim_core::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }
}

pub struct Runner {
    pub config: RunConfig,
    pub geometry: LatticeGeometry,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Runner {
    /// Validates the config, resolves the output directory and opens the manifest.
    pub fn open(loaded: LoadedConfig, out: Option<PathBuf>, seed_override: Option<u64>, force: bool) -> anyhow::Result<Self> {
        let mut config = loaded.config;
        if let Some(k) = seed_override {
            config.override_seeds(k);
        }
        let geometry = config.validate()?;
        let dir = out
            .or_else(|| config.out.clone())
            .ok_or_else(|| anyhow!("out: no output directory (set `out` in the config or pass --out)"))?;
        let mut hashed = config.clone();
        hashed.out = None;
        let config_hash = sha256_hex(toml::to_string(&hashed)?.as_bytes());
        let mut inputs = BTreeMap::new();
        for f in &loaded.files {
            inputs.insert(f.display().to_string(), sha256_hex(&fs::read(f)?));
        }
        let manifest = Manifest::open(&dir, Manifest::new(config_hash, inputs, seed_override), force)?;
        Ok(Runner { config, geometry, dir, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn upstream(&self, stage: &str, file: &str, hint: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(file);
        if !self.manifest.stage_complete(stage) || !p.exists() {
            bail!("missing upstream artifact {} from the {stage} stage; run `tjsim {hint}` first", p.display());
        }
        Ok(p)
    }

    fn run_stage(&mut self, name: &str, body: impl FnOnce(&Self) -> anyhow::Result<Outputs>) -> anyhow::Result<()> {
        self.manifest
            .stages
            .insert(name.into(), StageRecord { status: StageStatus::Running, outputs: BTreeMap::new(), error: None });
        self.manifest.write(&self.dir)?;
        let result = body(self).and_then(|out| {
            let mut hashes = BTreeMap::new();
            for (file, bytes) in out.0 {
                fs::write(self.path(&file), &bytes).with_context(|| format!("writing {file}"))?;
                hashes.insert(file, sha256_hex(&bytes));
            }
            Ok(hashes)
        });
        let record = match &result {
            Ok(h) => StageRecord { status: StageStatus::Complete, outputs: h.clone(), error: None },
            Err(e) => StageRecord { status: StageStatus::Failed, outputs: BTreeMap::new(), error: Some(format!("{e:#}")) },
        };
        self.manifest.stages.insert(name.into(), record);
        self.manifest.write(&self.dir)?;
        result.map(|_| ()).with_context(|| format!("stage {name} failed"))
    }

    fn basis(&self) -> anyhow::Result<SectorBasis> {
        Ok(self.config.sector.basis(self.geometry.n_sites())?)
    }

    pub fn ground(&mut self) -> anyhow::Result<()> {
        self.run_stage("ground", |r| {
            let mut out = Outputs::default();
            let c = r.config.couplings.build(&r.config.geometry)?;
            let basis = r.basis()?;
            let op = build_tj(&r.geometry, &basis, &c)?;
            let k = r.config.ground.as_ref().map_or(1, |g| g.n_states).min(basis.dim());
            let eig = lowest_eigenpairs(&op, k)?;
            let mut spec = String::from("k\tenergy\tresidual\n");
            for (l, (e, res)) in eig.eigenvalues.iter().zip(&eig.residuals).enumerate() {
                spec += &format!("{l}\t{e:.12}\t{res:.3e}\n");
            }
            out.add("spectrum.tsv", spec.into_bytes());
            let psi = eig.state(0);
            out.render(GROUND_STATE, |w| write_snapshots(std::slice::from_ref(&psi), w))?;
            if basis.n_holes() > 0 && basis.n_up().unwrap_or(0) > 0 {
                let pairs = HoleMagnonPairs::from_state(&psi, &basis)?;
                out.render("ground_relative.tsv", |w| relative_correlation_map(&pairs, &r.geometry, true)?.write_tsv(w))?;
                if r.geometry.kind() == LatticeKind::Ladder {
                    out.render("ground_distance.tsv", |w| distance_correlation(&pairs, &r.geometry, true)?.write_tsv(w))?;
                }
            }
            if let Some(s) = &r.config.sweep {
                let ratios = s.ratios()?;
                for &m in &s.magnons {
                    let points = binding_sweep(
                        r.geometry.n_sites(),
                        r.config.geometry.a,
                        &ratios,
                        &c,
                        s.reference,
                        m,
                        s.normalization(),
                    )?;
                    out.render(format!("binding_1h{m}m.tsv"), |w| write_sweep_table(&points, w))?;
                }
            }
            Ok(out)
        })
    }

    pub fn ramp(&mut self) -> anyhow::Result<()> {
        let rc = self.config.ramp.clone().ok_or_else(|| anyhow!("ramp: no [ramp] block in the config"))?;
        self.run_stage("ramp", |r| {
            let mut out = Outputs::default();
            let n = r.geometry.n_sites();
            let c = r.config.couplings.build(&r.config.geometry)?;
            let basis = r.basis()?;
            let op = build_tj(&r.geometry, &basis, &c)?;
            let eig = lowest_eigenpairs(&op, rc.n_targets.min(basis.dim()))?;
            let targets: Vec<StateVector> = (0..eig.len()).map(|k| eig.state(k)).collect();
            let h = RampedHamiltonian::new(op, &basis, rc.program(&r.config.sector))?;
            let init = StateVector::basis_state(&basis, &r.config.sector.product_state(n)?)?;
            let mut times = rc.snapshots.clone();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let snaps = evolve(&init, &h, &EvolutionSchedule::new(0.0, rc.t_end, times)?)?;
            out.render(SNAPSHOTS, |w| write_snapshots(&snaps, w))?;

            let trace = overlap_trace(&snaps, &targets)?;
            let mut tab = String::from("time\tground\tmanifold");
            for k in 0..targets.len() {
                tab += &format!("\tk{k}");
            }
            tab.push('\n');
            for (t, (ov, man)) in trace.times.iter().zip(trace.overlaps.iter().zip(&trace.manifold)) {
                tab += &format!("{t}\t{:.10}\t{:.10}", ov[0], man[man.len() - 1]);
                for o in ov {
                    tab += &format!("\t{o:.10}");
                }
                tab.push('\n');
            }
            out.add("overlaps.tsv", tab.into_bytes());

            if basis.n_holes() > 0 && basis.n_up().unwrap_or(0) > 0 {
                for psi in &snaps {
                    let t = psi.time();
                    let pairs = HoleMagnonPairs::from_state(psi, &basis)?;
                    out.render(format!("relative_t{t}.tsv"), |w| relative_correlation_map(&pairs, &r.geometry, true)?.write_tsv(w))?;
                    let com = com_distribution(&pairs, &r.geometry)?;
                    let mut s = String::new();
                    if r.geometry.kind() == LatticeKind::Ladder {
                        s += "x\tmass\n";
                        for (x, m) in com.midline_profile(&r.geometry)? {
                            s += &format!("{x:.3}\t{m:.10}\n");
                        }
                    } else {
                        s += "x\ty\tmass\n";
                        for (k, m) in &com.mass {
                            let [x, y] = k.to_vector();
                            s += &format!("{x:.3}\t{y:.3}\t{m:.10}\n");
                        }
                    }
                    out.add(format!("com_t{t}.tsv"), s.into_bytes());
                }
            }
            Ok(out)
        })
    }

    fn source_state(&self) -> anyhow::Result<StateVector> {
        let states = match self.config.measure_source() {
            StateSource::Ramp => {
                let p = self.upstream("ramp", SNAPSHOTS, "ramp")?;
                read_snapshots(BufReader::new(fs::File::open(p)?))?
            }
            StateSource::Ground => {
                let p = self.upstream("ground", GROUND_STATE, "ground")?;
                read_snapshots(BufReader::new(fs::File::open(p)?))?
            }
        };
        let want = self.config.measure.as_ref().and_then(|m| m.time);
        let psi = match want {
            Some(t) => states.into_iter().find(|s| s.time() == t),
            None => states.into_iter().last(),
        };
        psi.ok_or_else(|| anyhow!("measure.time: no snapshot at the requested time"))
    }

    pub fn measure(&mut self) -> anyhow::Result<()> {
        let mc = self.config.measure.clone().ok_or_else(|| anyhow!("measure: no [measure] block in the config"))?;
        self.run_stage("measure", |r| {
            let basis = r.basis()?;
            let psi = r.source_state()?;
            psi.check_dim(&basis)?;
            let channel = mc.channel.then(ErrorChannel::default);
            let batches = mc
                .bases
                .par_iter()
                .map(|&b| {
                    let slot = MeasurementBasis::ALL.iter().position(|&x| x == b).unwrap_or(0) as u64;
                    sample_shots(&psi, &basis, b, channel.as_ref(), mc.shots, mc.seed.wrapping_add(slot))
                })
                .collect::<tjsim_core::Result<Vec<_>>>()?;
            let mut out = Outputs::default();
            for b in &batches {
                out.render(shot_file(b.basis), |w| b.write(w))?;
            }
            Ok(out)
        })
    }

    fn read_shots(&self, b: MeasurementBasis) -> anyhow::Result<ShotBatch> {
        let name = shot_file(b);
        let p = self.path(&name);
        if !p.exists() {
            bail!("missing upstream artifact {}; run `tjsim measure` with basis {b} first", p.display());
        }
        let batch = ShotBatch::read(BufReader::new(fs::File::open(&p)?)).with_context(|| format!("reading {name}"))?;
        if batch.n_sites != self.geometry.n_sites() {
            bail!("{name} has {} sites, the geometry {}", batch.n_sites, self.geometry.n_sites());
        }
        Ok(batch)
    }

    pub fn reconstruct(&mut self) -> anyhow::Result<()> {
        let rc = self.config.reconstruct.clone().ok_or_else(|| anyhow!("reconstruct: no [reconstruct] block in the config"))?;
        self.run_stage("reconstruct", |r| {
            let [bu, bh, bd] = r.config.reconstruct_bases();
            let (up, hole, down) = (r.read_shots(bu)?, r.read_shots(bh)?, r.read_shots(bd)?);
            let src = BasisTriple::new(&up, &hole, &down, rc.axis)?;
            let mut out = Outputs::default();
            let names = ["recon_spin_spin.tsv", "recon_hole_spin.tsv", "recon_hole_up.tsv"];
            for (name, table) in names.iter().zip(reconstruct_pair_tables(&src)?) {
                out.render(*name, |w| table.write_tsv(w))?;
            }
            if rc.axis == SpinAxis::Z {
                let pairs = hole_magnon_pairs(&src)?;
                out.render("recon_relative.tsv", |w| relative_correlation_map(&pairs, &r.geometry, true)?.write_tsv(w))?;
            }
            let axis = if rc.axis == SpinAxis::Z { "z" } else { "x" };
            match hole_frame_nearest_neighbor(&src, &r.geometry) {
                Ok(v) => out.add("hole_frame.tsv", format!("axis\tvalue\n{axis}\t{v:.10}\n").into_bytes()),
                Err(tjsim_core::Error::NoAnchor) => {}
                Err(e) => return Err(e.into()),
            }
            if !rc.triples.is_empty() {
                let mut s = String::from("i\tj\tk\tconnected\n");
                for t in &rc.triples {
                    let v = connected_three_body(&src, *t)?;
                    s += &format!("{}\t{}\t{}\t{v:.10}\n", t[0], t[1], t[2]);
                }
                out.add("three_body.tsv", s.into_bytes());
            }
            Ok(out)
        })
    }

    pub fn fit_init(&mut self) -> anyhow::Result<()> {
        let ic = self.config.initmodel.clone().ok_or_else(|| anyhow!("fit-init: no [initmodel] block in the config"))?;
        self.run_stage("fit-init", |r| {
            let batches = FIT_BASES.iter().map(|&b| r.read_shots(b)).collect::<anyhow::Result<Vec<_>>>()?;
            let channel = match batches[0].channel {
                Some(rates) => ErrorChannel::new(rates)?,
                None => ErrorChannel::ideal(),
            };
            if batches.iter().any(|b| b.channel != batches[0].channel) {
                bail!("fit-init: shot files were taken with different error channels");
            }
            let region = match &ic.region {
                Some(reg) => reg.clone(),
                None => default_region(&r.geometry, &r.config.sector.defects(), ic.region_size)?,
            };
            let data = PointData::from_shots(&batches, region.clone())?;
            let structure = BoltzmannModel::new(r.geometry.n_sites(), region)?;
            let res = fit(&data, &structure, &channel, &ic.fit)?;
            let mut out = Outputs::default();
            let c = &res.costs;
            let costs = format!(
                "term\tvalue\none\t{:.6e}\ntwo\t{:.6e}\nlost\t{:.6e}\ntarget\t{:.6e}\nfit\t{:.6e}\ntruth\t{:.6e}\nconverged\t{}\nrestart\t{}\n",
                c.one, c.two, c.lost, c.target, c.fit, c.truth, res.converged, res.restart
            );
            out.add("fit_costs.tsv", costs.into_bytes());
            let mut trace = String::from("step\tcost\n");
            for (k, v) in res.trace.iter().enumerate() {
                trace += &format!("{k}\t{v:.10e}\n");
            }
            out.add("fit_trace.tsv", trace.into_bytes());
            let mut model = serde_json::to_string_pretty(&res.model)?;
            model.push('\n');
            out.add("fit_model.json", model.into_bytes());
            if ic.samples > 0 {
                let configs = sample_initial_configurations(&res.model, ic.samples, ic.sample_seed)?;
                let text: String = configs.iter().map(|c| format!("{c}\n")).collect();
                out.add("initial_configurations.txt", text.into_bytes());
            }
            Ok(out)
        })
    }

    /// Every stage the config asks for, in pipeline order.
    pub fn run_all(&mut self) -> anyhow::Result<()> {
        let cfg = &self.config;
        let wants_ground = cfg.ground.is_some()
            || cfg.sweep.is_some()
            || (cfg.measure.is_some() && cfg.measure_source() == StateSource::Ground);
        let (ramp, measure, reconstruct, fit) =
            (cfg.ramp.is_some(), cfg.measure.is_some(), cfg.reconstruct.is_some(), cfg.initmodel.is_some());
        if wants_ground {
            self.ground()?;
        }
        if ramp {
            self.ramp()?;
        }
        if measure {
            self.measure()?;
        }
        if reconstruct {
            self.reconstruct()?;
        }
        if fit {
            self.fit_init()?;
        }
        Ok(())
    }
}

/// Plaquette report as text, and whether every level matches its analytic band.
pub fn toycheck(t: f64) -> anyhow::Result<(String, bool)> {
    let mut text = Vec::new();
    let mut ok = true;
    for sector in [PlaquetteSector::Polarized, PlaquetteSector::Triplet, PlaquetteSector::Singlet] {
        let rep = plaquette_spectrum(t, sector)?;
        rep.write_table(&mut text)?;
        ok &= rep.max_deviation() < 1e-12 && rep.block_offdiag_norm < 1e-12;
    }
    let mut text = String::from_utf8(text)?;
    text += "# hole-pair tunneling element\npair\telement\texpected\n";
    for (pair, name, want) in [(SpinPair::Singlet, "singlet", -t), (SpinPair::Triplet, "triplet", t)] {
        let v = effective_tunneling_sign(t, pair)?;
        ok &= (v - want).abs() < 1e-12;
        text += &format!("{name}\t{v:.12}\t{want:.12}\n");
    }
    text += if ok { "# status: match\n" } else { "# status: MISMATCH\n" };
    Ok((text, ok))
}
