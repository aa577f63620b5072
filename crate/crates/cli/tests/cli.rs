use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use servesim_core::config::RunConfig;
use servesim_core::scenario::{scenario, Preset, SCENARIOS};
use servesim_core::sweep::SweepSpec;

const MINIMAL: &str = r#"
seed = 3

[model]
builtin = "llama2-7b"

[[workers]]
hardware = "a100"

[workload]
source = "synthetic"
qps = 4.0
num_requests = 10
prompt_len = { uniform = [16, 128] }
output_len = { uniform = [4, 32] }
"#;

fn servesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_servesim"))
        .args(args)
        .env_remove("SERVESIM_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn minimal_run_exports_all_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "run.toml", MINIMAL);
    let out = d.path().join("out");
    let o = servesim(&["run", &cfg, "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in servesim_core::metrics::EXPORT_FILES {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("config.toml").is_file());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("finished 10/10"), "{stdout}");
}

#[test]
fn repeated_runs_match() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "run.toml", MINIMAL);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert!(servesim(&["run", &cfg, "--out", &s(&a)]).status.success());
    assert!(servesim(&["run", &cfg, "--out", &s(&b)]).status.success());
    for f in servesim_core::metrics::EXPORT_FILES {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "run.toml", MINIMAL);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert!(servesim(&["run", &cfg, "--out", &s(&a)]).status.success());
    assert!(servesim(&["--seed", "4", "run", &cfg, "--out", &s(&b)])
        .status
        .success());
    assert_ne!(
        fs::read(a.join("requests.csv")).unwrap(),
        fs::read(b.join("requests.csv")).unwrap()
    );
    let written = RunConfig::load(&b.join("config.toml")).unwrap();
    assert_eq!(written.seed, 4);
}

#[test]
fn env_var_sets_default_output() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "run.toml", MINIMAL);
    let root = d.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_servesim"))
        .args(["run", &cfg])
        .env("SERVESIM_OUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.join("summary.json").is_file());
}

#[test]
fn capacity_below_weights_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "hardware = \"a100\"",
        "hardware = \"a100\"\ncapacity_scale = 0.125",
    );
    let cfg = write(d.path(), "run.toml", &text);
    let o = servesim(&["run", &cfg, "--out", &s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("workers[0].mem_capacity"), "{err}");
    assert!(err.contains("weight"), "{err}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "run.toml",
        &format!("{MINIMAL}\n[scheduler]\nmax_batch = 4\n"),
    );
    let o = servesim(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_batch"));
}

#[test]
fn missing_file_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = servesim(&["run", &s(&d.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(servesim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(servesim(&["scenario", "bogus"]).status.code(), Some(2));
}

fn sweep_file(axes: &str) -> String {
    let base: String = MINIMAL
        .lines()
        .map(|l| {
            if let Some(rest) = l.strip_prefix("[[") {
                format!("[[base.{rest}")
            } else if let Some(rest) = l.strip_prefix('[') {
                format!("[base.{rest}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    format!("[base]\n{base}\n{axes}")
}

#[test]
fn single_point_sweep_equals_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "run.toml", MINIMAL);
    let spec = write(
        d.path(),
        "sweep.toml",
        &sweep_file("[[axes]]\npath = \"seed\"\nvalues = [3]\n"),
    );
    let (r, w) = (d.path().join("run"), d.path().join("sweep"));
    assert!(servesim(&["run", &cfg, "--out", &s(&r)]).status.success());
    let o = servesim(&["sweep", &spec, "--out", &s(&w)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in servesim_core::metrics::EXPORT_FILES {
        assert_eq!(
            fs::read(r.join(f)).unwrap(),
            fs::read(w.join("point-0000").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn parallelism_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let spec = write(
        d.path(),
        "sweep.toml",
        &sweep_file("[[axes]]\npath = \"workload.qps\"\nvalues = [1.0, 4.0, 16.0]\n[[axes]]\npath = \"seed\"\nvalues = [1, 2]\n"),
    );
    let (a, b) = (d.path().join("p1"), d.path().join("p8"));
    assert!(
        servesim(&["sweep", &spec, "--parallel", "1", "--out", &s(&a)])
            .status
            .success()
    );
    assert!(
        servesim(&["sweep", &spec, "--parallel", "8", "--out", &s(&b)])
            .status
            .success()
    );
    assert_eq!(
        fs::read(a.join("index.csv")).unwrap(),
        fs::read(b.join("index.csv")).unwrap()
    );
    for i in 0..6 {
        let p = format!("point-{i:04}");
        for f in servesim_core::metrics::EXPORT_FILES {
            assert_eq!(
                fs::read(a.join(&p).join(f)).unwrap(),
                fs::read(b.join(&p).join(f)).unwrap(),
                "{p}/{f}"
            );
        }
    }
}

#[test]
fn pd_split_axis_yields_seven_dirs() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"
[base.model]
builtin = "llama2-7b"

[[base.workers]]
hardware = "a100"
role = "prefill"

[[base.workers]]
hardware = "a100"
role = "decode"

[base.workload]
source = "synthetic"
qps = 8.0
num_requests = 20
prompt_len = { uniform = [64, 256] }
output_len = { uniform = [2, 16] }

[base.scheduler]
local_policy = "disaggregated"

[[axes]]
paths = ["workers[0].count", "workers[1].count"]
values = [[1, 7], [2, 6], [3, 5], [4, 4], [5, 3], [6, 2], [7, 1]]
"#;
    let spec = write(d.path(), "pd.toml", text);
    let out = d.path().join("pd");
    let o = servesim(&["sweep", &spec, "--parallel", "4", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(dirs.len(), 7);
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 8);
    let cfg = RunConfig::load(&out.join("point-0006").join("config.toml")).unwrap();
    assert_eq!((cfg.workers[0].count, cfg.workers[1].count), (7, 1));
}

#[test]
fn failed_point_is_recorded_and_sweep_continues() {
    let d = tempfile::tempdir().unwrap();
    let spec = write(
        d.path(),
        "sweep.toml",
        &sweep_file("[[axes]]\npath = \"workers[0].capacity_scale\"\nvalues = [1.0, 0.1, 2.0]\n"),
    );
    let out = d.path().join("o");
    let o = servesim(&["sweep", &spec, "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert!(rows[0].contains(",ok,"));
    assert!(rows[1].contains(",error,"));
    assert!(rows[2].contains(",ok,"));
    assert!(out.join("point-0002").join("summary.json").is_file());
}

#[test]
fn unresolvable_sweep_path_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let spec = write(
        d.path(),
        "sweep.toml",
        &sweep_file("[[axes]]\npath = \"workload.nonsense\"\nvalues = [1]\n"),
    );
    let o = servesim(&["sweep", &spec, "--out", &s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn printed_presets_load_back() {
    let d = tempfile::tempdir().unwrap();
    for name in SCENARIOS {
        let o = servesim(&["scenario", name, "--print"]);
        assert!(o.status.success(), "{name}");
        let text = String::from_utf8(o.stdout).unwrap();
        let path = d.path().join(format!("{name}.toml"));
        fs::write(&path, &text).unwrap();
        match scenario(name).unwrap().preset {
            Preset::Run(c) => assert_eq!(RunConfig::load(&path).unwrap(), c, "{name}"),
            Preset::Sweep(sw) => assert_eq!(SweepSpec::load(&path).unwrap(), sw, "{name}"),
        }
    }
}

#[test]
fn scenario_runs_into_named_dir() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_servesim"))
        .args(["scenario", "pd-hardware", "--parallel", "2"])
        .env("SERVESIM_OUT", d.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = d.path().join("pd-hardware");
    assert!(dir.join("index.json").is_file());
    assert!(dir.join("point-0003").join("transfers.csv").is_file());
}
