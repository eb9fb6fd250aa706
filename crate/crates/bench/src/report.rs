//! Run reports and their text, json and csv renderings.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::dist::DistKind;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub kernel: String,
    pub dist: DistKind,
    pub n: usize,
    pub depth: usize,
    pub tol: f64,
    pub compress_tol: f64,
    pub train_res: usize,
    pub seed: u64,
    pub axes: [f64; 3],
    pub oracle: bool,
    pub ranks_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    /// Multipole terms.
    pub d: usize,
    /// Local terms.
    pub e: usize,
    /// Transfer rank; absent when only the interpolants were built.
    pub r: Option<usize>,
}

/// Seconds per evaluation phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseSeconds {
    pub p2m: f64,
    pub m2m: f64,
    pub m2l: f64,
    pub l2l: f64,
    pub l2p: f64,
    pub near: f64,
    pub far: f64,
    pub total: f64,
}

impl PhaseSeconds {
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("p2m", self.p2m),
            ("m2m", self.m2m),
            ("m2l", self.m2l),
            ("l2l", self.l2l),
            ("l2p", self.l2p),
            ("near", self.near),
            ("far", self.far),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    /// Building or loading the operators.
    pub precompute: f64,
    pub phases: Option<PhaseSeconds>,
    pub oracle: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheReport {
    pub path: Option<String>,
    pub hit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleStatus {
    Disabled,
    /// Requested but refused by the size guard.
    NotComputed,
    Computed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub status: OracleStatus,
    pub rel_l2: Option<f64>,
    pub rel_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub levels: Vec<LevelReport>,
    pub cache: CacheReport,
    pub oracle: OracleReport,
    pub timings: Timings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(format!("unknown format `{s}` (expected text, json or csv)")),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "not computed".to_string(), |v| format!("{v:.3e}"))
}

pub fn render_text(report: &RunReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "kernel {}  dist {}  n {}  depth {}  tol {:e}  compress-tol {:e}  train-res {}  seed {}",
        c.kernel, c.dist, c.n, c.depth, c.tol, c.compress_tol, c.train_res, c.seed
    );
    let _ = writeln!(
        s,
        "cache {}  ({})",
        report.cache.path.as_deref().unwrap_or("-"),
        if report.cache.hit { "hit" } else { "built" }
    );
    let _ = writeln!(s, "\nlevel      d      e      r");
    for l in &report.levels {
        let r = l.r.map_or_else(|| "-".to_string(), |r| r.to_string());
        let _ = writeln!(s, "{:>5} {:>6} {:>6} {:>6}", l.level, l.d, l.e, r);
    }
    let _ = writeln!(s, "\nphase            seconds");
    let _ = writeln!(s, "{:<12} {:>12.4}", "precompute", report.timings.precompute);
    if let Some(p) = &report.timings.phases {
        for (name, t) in p.named() {
            let _ = writeln!(s, "{name:<12} {t:>12.4}");
        }
    }
    if let Some(t) = report.timings.oracle {
        let _ = writeln!(s, "{:<12} {t:>12.4}", "oracle");
    }
    let o = &report.oracle;
    match o.status {
        OracleStatus::Disabled => {}
        _ => {
            let _ = writeln!(s, "\nrel-l2 error  {}", opt(o.rel_l2));
            let _ = writeln!(s, "rel-max error {}", opt(o.rel_max));
        }
    }
    s
}

pub fn render_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub const CSV_HEADER: &str = "section,level,metric,value";

/// One row per metric, with the level column filled for per-level values.
pub fn render_csv(report: &RunReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let mut row = |section: &str, level: Option<usize>, metric: &str, value: String| {
        let level = level.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{section},{level},{metric},{value}");
    };
    let c = &report.config;
    row("config", None, "kernel", c.kernel.clone());
    row("config", None, "dist", c.dist.to_string());
    row("config", None, "n", c.n.to_string());
    row("config", None, "depth", c.depth.to_string());
    row("config", None, "tol", format!("{:e}", c.tol));
    row("config", None, "compress_tol", format!("{:e}", c.compress_tol));
    row("config", None, "train_res", c.train_res.to_string());
    row("config", None, "seed", c.seed.to_string());
    for l in &report.levels {
        row("rank", Some(l.level), "d", l.d.to_string());
        row("rank", Some(l.level), "e", l.e.to_string());
        if let Some(r) = l.r {
            row("rank", Some(l.level), "r", r.to_string());
        }
    }
    row("time", None, "precompute", format!("{:e}", report.timings.precompute));
    if let Some(p) = &report.timings.phases {
        for (name, t) in p.named() {
            row("time", None, name, format!("{t:e}"));
        }
    }
    if let Some(t) = report.timings.oracle {
        row("time", None, "oracle", format!("{t:e}"));
    }
    if let Some(e) = report.oracle.rel_l2 {
        row("error", None, "rel_l2", format!("{e:e}"));
    }
    if let Some(e) = report.oracle.rel_max {
        row("error", None, "rel_max", format!("{e:e}"));
    }
    s
}

pub fn render(report: &RunReport, format: Format) -> String {
    match format {
        Format::Text => render_text(report),
        Format::Json => render_json(report),
        Format::Csv => render_csv(report),
    }
}

/// Writes the rendering to `path`, or to stdout when `path` is `None`.
pub fn emit_report(report: &RunReport, format: Format, path: Option<&Path>) -> Result<()> {
    let body = render(report, format);
    match path {
        Some(p) => std::fs::write(p, body).with_context(|| format!("cannot write report to {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes()).context("cannot write report to stdout")?;
            out.flush().context("cannot write report to stdout")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            config: RunConfig {
                kernel: "gaussian".into(),
                dist: DistKind::Cube,
                n: 100,
                depth: 3,
                tol: 1e-6,
                compress_tol: 1e-6,
                train_res: 7,
                seed: 1,
                axes: crate::dist::DEFAULT_AXES,
                oracle: true,
                ranks_only: false,
            },
            levels: vec![
                LevelReport { level: 2, d: 56, e: 56, r: Some(50) },
                LevelReport { level: 3, d: 36, e: 36, r: Some(30) },
            ],
            cache: CacheReport { path: Some("/tmp/x.bin".into()), hit: false },
            oracle: OracleReport {
                status: OracleStatus::Computed,
                rel_l2: Some(1e-7),
                rel_max: Some(3e-7),
            },
            timings: Timings {
                precompute: 0.5,
                phases: Some(PhaseSeconds { p2m: 0.1, total: 0.6, ..Default::default() }),
                oracle: Some(0.2),
            },
        }
    }

    #[test]
    fn json_round_trips() {
        let v: serde_json::Value = serde_json::from_str(&render_json(&sample())).unwrap();
        assert_eq!(v["config"]["kernel"], "gaussian");
        assert_eq!(v["levels"][1]["d"], 36);
        assert_eq!(v["oracle"]["status"], "computed");
        assert!(v["oracle"]["rel_l2"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn csv_header_once_and_rows_well_formed() {
        let csv = render_csv(&sample());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(csv.lines().skip(1).all(|l| l != CSV_HEADER && l.split(',').count() == 4));
        assert!(csv.contains("rank,3,d,36\n"));
        assert!(csv.contains("error,,rel_l2,1e-7\n"));
    }

    #[test]
    fn text_lists_all_phases() {
        let text = render_text(&sample());
        for phase in ["p2m", "m2m", "m2l", "l2l", "l2p", "near"] {
            assert!(text.contains(phase), "{phase}");
        }
    }

    #[test]
    fn missing_errors_render_as_not_computed() {
        let mut r = sample();
        r.oracle = OracleReport { status: OracleStatus::NotComputed, rel_l2: None, rel_max: None };
        assert!(render_text(&r).contains("rel-l2 error  not computed"));
        assert!(!render_csv(&r).contains("error,"));
        let v: serde_json::Value = serde_json::from_str(&render_json(&r)).unwrap();
        assert_eq!(v["oracle"]["status"], "not-computed");
        assert!(v["oracle"]["rel_l2"].is_null());
    }
}
