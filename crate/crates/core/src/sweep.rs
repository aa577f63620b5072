//! Parameter sweeps: a base config plus axes, expanded as a grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{apply_override, ConfigError, RunConfig};
use crate::metrics::{Analysis, SloVariant};

/// One sweep dimension. With `path`, each value is assigned to that path.
/// With `paths`, each value is a list assigned element-wise (zipped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<String>,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn single(path: &str, values: impl IntoIterator<Item = Value>) -> Self {
        Self {
            path: Some(path.into()),
            paths: Vec::new(),
            values: values.into_iter().collect(),
        }
    }

    pub fn zipped(paths: &[&str], values: impl IntoIterator<Item = Value>) -> Self {
        Self {
            path: None,
            paths: paths.iter().map(|p| p.to_string()).collect(),
            values: values.into_iter().collect(),
        }
    }

    fn assignments(&self, index: usize, at: usize) -> Result<Vec<(String, Value)>, ConfigError> {
        let bad = |msg: String| ConfigError::Invalid {
            path: format!("axes[{index}]"),
            msg,
        };
        let v = &self.values[at];
        match (&self.path, self.paths.is_empty()) {
            (Some(p), true) => Ok(vec![(p.clone(), v.clone())]),
            (None, false) => {
                let items = v
                    .as_array()
                    .filter(|a| a.len() == self.paths.len())
                    .ok_or_else(|| {
                        bad(format!(
                            "value {v} must be a list of {} items",
                            self.paths.len()
                        ))
                    })?;
                Ok(self
                    .paths
                    .iter()
                    .cloned()
                    .zip(items.iter().cloned())
                    .collect())
            }
            _ => Err(bad("set exactly one of `path` or `paths`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

/// On-disk sweep file: the base config inline or by path.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    #[serde(default)]
    base: Option<RunConfig>,
    #[serde(default)]
    base_file: Option<PathBuf>,
    #[serde(default)]
    axes: Vec<Axis>,
}

#[derive(Debug, Clone)]
pub struct Point {
    pub index: usize,
    pub assignments: Vec<(String, Value)>,
    pub config: RunConfig,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let f: SweepFile = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = match (f.base, f.base_file) {
            (Some(mut b), None) => {
                b.resolve_paths(dir);
                b
            }
            (None, Some(p)) => RunConfig::load(&dir.join(p))?,
            _ => {
                return Err(ConfigError::Invalid {
                    path: "base".into(),
                    msg: "give exactly one of `[base]` or `base_file`".into(),
                })
            }
        };
        Ok(Self { base, axes: f.axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in row-major order (the last axis varies fastest). Every
    /// path must resolve; a point whose config is invalid is returned as
    /// an error for that point.
    pub fn points(&self) -> Result<Vec<Result<Point, (usize, ConfigError)>>, ConfigError> {
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        for index in 0..n {
            let mut rem = index;
            let mut picks = vec![0; self.axes.len()];
            for (k, a) in self.axes.iter().enumerate().rev() {
                picks[k] = rem % a.values.len();
                rem /= a.values.len();
            }
            let mut assignments = Vec::new();
            for (k, a) in self.axes.iter().enumerate() {
                assignments.extend(a.assignments(k, picks[k])?);
            }
            let mut cfg = self.base.clone();
            let mut err = None;
            for (path, value) in &assignments {
                match apply_override(&cfg, path, value) {
                    Ok(c) => cfg = c,
                    Err(e @ ConfigError::Path { .. }) => return Err(e),
                    Err(e) => {
                        err = Some(e);
                        break;
                    }
                }
            }
            let err = err.or_else(|| cfg.validate().err());
            out.push(match err {
                None => Ok(Point {
                    index,
                    assignments,
                    config: cfg,
                }),
                Some(e) => Err((index, e)),
            });
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct PointOutcome {
    pub index: usize,
    pub assignments: Vec<(String, Value)>,
    pub dir: Option<PathBuf>,
    pub result: Result<Analysis, String>,
}

impl PointOutcome {
    pub fn value(&self, path: &str) -> Option<&Value> {
        self.assignments
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, v)| v)
    }
}

pub fn point_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("point-{index:04}"))
}

/// Runs every point on up to `parallel` threads. Results do not depend on
/// the thread count. With `out`, each point exports to `point-NNNN/` and an
/// `index.json` / `index.csv` pair maps points to directories.
pub fn run_sweep(
    spec: &SweepSpec,
    parallel: usize,
    out: Option<&Path>,
) -> Result<Vec<PointOutcome>, ConfigError> {
    let points = spec.points()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<PointOutcome> = pool.install(|| {
        points
            .into_par_iter()
            .map(|p| match p {
                Ok(p) => {
                    let dir = out.map(|o| point_dir(o, p.index));
                    let result = p
                        .config
                        .run(dir.as_deref())
                        .map(|(_, a)| a)
                        .map_err(|e| e.to_string());
                    PointOutcome {
                        index: p.index,
                        assignments: p.assignments,
                        dir,
                        result,
                    }
                }
                Err((index, e)) => PointOutcome {
                    index,
                    assignments: Vec::new(),
                    dir: None,
                    result: Err(e.to_string()),
                },
            })
            .collect()
    });
    if let Some(o) = out {
        write_index(o, &outcomes).map_err(|source| ConfigError::Io {
            path: o.to_path_buf(),
            source,
        })?;
    }
    Ok(outcomes)
}

fn write_index(out: &Path, outcomes: &[PointOutcome]) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut csv = fs::File::create(out.join("index.csv"))?;
    writeln!(
        csv,
        "point,dir,status,assignments,throughput_rps,goodput_both_rps,goodput_decode_only_rps,p50_normalized_s,p99_normalized_s,preemptions"
    )?;
    for o in outcomes {
        let dir = o
            .dir
            .as_ref()
            .and_then(|d| d.file_name())
            .map(|d| d.to_string_lossy().into_owned())
            .unwrap_or_default();
        let assigned: Map<String, Value> = o.assignments.iter().cloned().collect();
        let assigned_str = o
            .assignments
            .iter()
            .map(|(p, v)| format!("{p}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        match &o.result {
            Ok(a) => {
                let s = &a.summary;
                writeln!(
                    csv,
                    "{},{dir},ok,\"{}\",{:.9},{:.9},{:.9},{},{},{}",
                    o.index,
                    assigned_str.replace('"', "\"\""),
                    s.throughput_rps.0,
                    a.goodput(SloVariant::Both),
                    a.goodput(SloVariant::DecodeOnly),
                    crate::time::fmt_secs(s.normalized_latency_s.p50.0),
                    crate::time::fmt_secs(s.normalized_latency_s.p99.0),
                    s.preemptions
                )?;
                rows.push(json!({
                    "point": o.index,
                    "dir": dir,
                    "status": "ok",
                    "assignments": assigned,
                }));
            }
            Err(e) => {
                writeln!(
                    csv,
                    "{},{dir},error,\"{}\",,,,,,",
                    o.index,
                    assigned_str.replace('"', "\"\"")
                )?;
                rows.push(json!({
                    "point": o.index,
                    "dir": dir,
                    "status": "error",
                    "error": e,
                    "assignments": assigned,
                }));
            }
        }
    }
    let f = fs::File::create(out.join("index.json"))?;
    serde_json::to_writer_pretty(f, &rows).map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::from_toml(
            r#"
[model]
builtin = "llama2-7b"
[[workers]]
hardware = "a100"
[workload]
source = "synthetic"
qps = 2.0
num_requests = 5
prompt_len = { fixed = 32 }
output_len = { fixed = 4 }
"#,
        )
        .unwrap()
    }

    #[test]
    fn grid_is_row_major() {
        let s = SweepSpec {
            base: base(),
            axes: vec![
                Axis::single("workload.qps", [json!(1.0), json!(2.0)]),
                Axis::single("seed", [json!(1), json!(2), json!(3)]),
            ],
        };
        let pts: Vec<Point> = s
            .points()
            .unwrap()
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].config.workload.qps, 1.0);
        assert_eq!(pts[1].config.seed, 2);
        assert_eq!(pts[3].config.workload.qps, 2.0);
    }

    #[test]
    fn zipped_axis_assigns_pairs() {
        let mut b = base();
        b.workers.push(b.workers[0].clone());
        let s = SweepSpec {
            base: b,
            axes: vec![Axis::zipped(
                &["workers[0].count", "workers[1].count"],
                [json!([1, 3]), json!([2, 2])],
            )],
        };
        let pts: Vec<Point> = s
            .points()
            .unwrap()
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(pts[0].config.workers[1].count, 3);
        assert_eq!(pts[1].config.workers[0].count, 2);
    }

    #[test]
    fn unknown_path_fails_whole_sweep() {
        let s = SweepSpec {
            base: base(),
            axes: vec![Axis::single("workload.nope", [json!(1)])],
        };
        assert!(s.points().is_err());
    }

    #[test]
    fn invalid_point_is_reported_not_fatal() {
        let s = SweepSpec {
            base: base(),
            axes: vec![Axis::single(
                "workers[0].capacity_scale",
                [json!(1.0), json!(0.1)],
            )],
        };
        let out = run_sweep(&s, 2, None).unwrap();
        assert!(out[0].result.is_ok());
        assert!(out[1].result.is_err());
    }
}
