use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tjsim_cli::manifest::{Manifest, StageStatus};
use tjsim_core::dynamics::read_snapshots;
use tjsim_core::geometry::build_ladder;
use tjsim_core::hamiltonian::CouplingSet;
use tjsim_core::hilbert::SectorBasis;
use tjsim_core::initmodel::{dressed_expectations, sample_initial_configurations, BoltzmannModel, FIT_BASES};
use tjsim_core::measurement::{measure_configurations, sample_shots, ErrorChannel, MeasurementBasis, ShotBatch};
use tjsim_core::spectra::{binding_sweep, Normalization, SweepReference};

const SMALL: &str = r#"
[geometry]
kind = "ladder"
n_sites = 7
a = 14.7
h_over_a = 0.8660254037844386

[sector]
holes = [3]
ups = [2]

[ramp]
t_end = 2.0
snapshots = [0.0, 1.0, 2.0]
n_targets = 4

[measure]
shots = 400
seed = 17

[reconstruct]
axis = "z"
triples = [[2, 3, 4]]
"#;

fn tjsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tjsim")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = tjsim(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toycheck_reports_match() {
    let o = run_ok(&["toycheck"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# status: match"), "{text}");
    assert!(text.contains("singlet\t-1.000000000000"));
}

#[test]
fn empty_geometry_fails_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[geometry]\nkind = \"ladder\"\nh_over_a = 0.5\n");
    let o = tjsim(&["ground", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("geometry.n_sites"), "{err}");
}

#[test]
fn missing_upstream_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = tjsim(&["measure", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("snapshots.tsv") && err.contains("tjsim ramp"), "{err}");
    let m = Manifest::read(&out).unwrap().unwrap();
    assert_eq!(m.stages["measure"].status, StageStatus::Failed);

    let o = tjsim(&["reconstruct", "--config", s(&cfg), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("shots_up.txt"));
}

#[test]
fn measure_reuses_final_ramp_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    run_ok(&["ramp", "--config", s(&cfg), "--out", s(&out)]);
    run_ok(&["measure", "--config", s(&cfg), "--out", s(&out)]);

    let snaps = read_snapshots(BufReader::new(fs::File::open(out.join("snapshots.tsv")).unwrap())).unwrap();
    let last = snaps.last().unwrap();
    assert_eq!(last.time(), 2.0);
    let basis = SectorBasis::new(7, 1, Some(1)).unwrap();
    let ch = ErrorChannel::default();
    for b in [MeasurementBasis::Up, MeasurementBasis::Hole, MeasurementBasis::Down] {
        let slot = MeasurementBasis::ALL.iter().position(|&x| x == b).unwrap() as u64;
        let want = sample_shots(last, &basis, b, Some(&ch), 400, 17 + slot).unwrap();
        let got = ShotBatch::read(BufReader::new(fs::File::open(out.join(format!("shots_{}.txt", b.tag()))).unwrap()))
            .unwrap();
        assert_eq!(got, want, "basis {b}");
    }
}

#[test]
fn runs_are_bit_identical_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["run", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["run", "--config", s(&cfg), "--out", s(&b), "--threads", "1"]);
    let ma = Manifest::read(&a).unwrap().unwrap();
    let mb = Manifest::read(&b).unwrap().unwrap();
    assert_eq!(ma, mb);
    for stage in ["ramp", "measure", "reconstruct"] {
        assert_eq!(ma.stages[stage].status, StageStatus::Complete, "{stage}");
    }
    for name in ma.stages.values().flat_map(|r| r.outputs.keys()) {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(ma.stages["reconstruct"].outputs.contains_key("three_body.tsv"));

    // Rerunning the same config in place is allowed.
    run_ok(&["reconstruct", "--config", s(&cfg), "--out", s(&a)]);

    let changed = write_config(dir.path(), "changed.toml", &SMALL.replace("shots = 400", "shots = 300"));
    let o = tjsim(&["run", "--config", s(&changed), "--out", s(&a)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = tjsim(&["measure", "--config", s(&cfg), "--out", s(&a), "--seed-override", "4"]);
    assert!(!o.status.success(), "seed override changes the config hash");
    run_ok(&["run", "--config", s(&changed), "--out", s(&a), "--force"]);
    let m = Manifest::read(&a).unwrap().unwrap();
    assert_ne!(m.config_hash, ma.config_hash);
}

#[test]
fn includes_feed_the_sweep_table() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "geom.toml",
        "[geometry]\nkind = \"ladder\"\nn_sites = 7\na = 14.7\nh_over_a = 0.5\n",
    );
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        "include = [\"geom.toml\"]\n[sweep]\nh_over_a = [0.25, 0.5, 0.75]\nmagnons = [1]\n",
    );
    let out = dir.path().join("out");
    run_ok(&["ground", "--config", s(&cfg), "--out", s(&out)]);
    let text = fs::read_to_string(out.join("binding_1h1m.tsv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split('\t').map(|x| x.parse().unwrap()).collect()).collect();
    let want = binding_sweep(
        7,
        14.7,
        &[0.25, 0.5, 0.75],
        &CouplingSet::table_default(14.7),
        SweepReference::NearestNeighbor,
        1,
        Normalization::Leg,
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    for (row, (r, rep)) in rows.iter().zip(&want) {
        assert!((row[0] - r).abs() < 1e-9 && (row[1] - rep.e_b_over_t).abs() < 1e-9);
    }
    let m = Manifest::read(&out).unwrap().unwrap();
    assert_eq!(m.inputs.len(), 2);
}

#[test]
fn fit_init_recovers_synthetic_shots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let n = 7;
    let region = vec![1, 2, 3, 4];
    let target = "dduhddd".parse().unwrap();
    let truth = BoltzmannModel::peaked_at(&target, region.clone(), 2.5).unwrap();
    let ch = ErrorChannel::default();
    fs::create_dir_all(&out).unwrap();
    let shots = 40_000;
    for (k, b) in FIT_BASES.iter().enumerate() {
        let configs = sample_initial_configurations(&truth, shots, 100 + k as u64).unwrap();
        let batch = measure_configurations(&configs, *b, Some(&ch), 200 + k as u64).unwrap();
        let mut buf = Vec::new();
        batch.write(&mut buf).unwrap();
        fs::write(out.join(format!("shots_{}.txt", b.tag())), buf).unwrap();
    }
    let cfg = write_config(
        dir.path(),
        "fit.toml",
        "[geometry]\nkind = \"ladder\"\nn_sites = 7\nh_over_a = 0.866\n\
         [sector]\nholes = [3]\nups = [2]\n\
         [initmodel]\nregion = [1, 2, 3, 4]\nsamples = 10\n",
    );
    run_ok(&["fit-init", "--config", s(&cfg), "--out", s(&out)]);

    let text = fs::read_to_string(out.join("fit_model.json")).unwrap();
    let fitted: BoltzmannModel = serde_json_from(&text);
    let want = dressed_expectations(&truth, &ch).unwrap();
    let got = dressed_expectations(&fitted, &ch).unwrap();
    // Statistical floor of 4·10⁴ shots per basis.
    let tol = 4.0 * (0.25 / shots as f64).sqrt();
    for (x, y) in got.one.iter().zip(&want.one).chain(got.two.iter().zip(&want.two)) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < tol, "{p} vs {q}");
        }
    }
    assert_eq!(fs::read_to_string(out.join("initial_configurations.txt")).unwrap().lines().count(), 10);
    let g = build_ladder(n, 14.7, 0.866 * 14.7).unwrap();
    assert_eq!(g.n_sites(), fitted.n_sites);
}

fn serde_json_from(text: &str) -> BoltzmannModel {
    serde_json::from_str(text).unwrap()
}
