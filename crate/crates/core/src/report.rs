//! Aggregation of completed run directories into a summary table and one
//! SVG panel per experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::clicks::true_bias_logit;
use crate::error::{Error, Result};

/// Mean and half-width of the two-sided 95% Student-t interval. A single
/// value gives a zero half-width.
pub fn t_interval(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "interval of nothing");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub alpha: f64,
    pub tau: f64,
    pub tower: String,
    pub loss: String,
    pub seed: u64,
    pub rank: usize,
    pub theta_true: f64,
    pub theta_hat: f64,
    pub abs_err: f64,
    pub ndcg10: f64,
    pub swap_connected: bool,
}

/// A completed run directory.
#[derive(Clone, Debug)]
pub struct CompletedRun {
    pub dir: PathBuf,
    /// `config.snapshot` entries.
    pub config: BTreeMap<String, String>,
    pub rows: Vec<MetricRow>,
}

impl CompletedRun {
    /// Everything that identifies the experiment apart from the temperature
    /// and the seed.
    pub fn panel_key(&self) -> String {
        self.config
            .iter()
            .filter(|(k, _)| k.as_str() != "tau" && k.as_str() != "seeds")
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn parse_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            line: i + 2,
            message: format!("malformed metrics row in {}", path.display()),
        };
        let f = |j: usize| rec.get(j).ok_or_else(bad);
        let num = |j: usize| -> Result<f64> { f(j)?.parse().map_err(|_| bad()) };
        rows.push(MetricRow {
            run_id: f(0)?.to_string(),
            alpha: num(1)?,
            tau: num(2)?,
            tower: f(3)?.to_string(),
            loss: f(4)?.to_string(),
            seed: f(5)?.parse().map_err(|_| bad())?,
            rank: f(6)?.parse().map_err(|_| bad())?,
            theta_true: num(7)?,
            theta_hat: num(8)?,
            abs_err: num(9)?,
            ndcg10: num(10)?,
            swap_connected: f(11)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Completed runs below `dir`, ordered by directory name. Directories
/// without a `metrics.csv` (including partial ones) are ignored.
pub fn collect_runs(dir: &Path) -> Result<Vec<CompletedRun>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file() && p.join("config.snapshot").is_file())
        .collect();
    dirs.sort();
    let mut runs = Vec::new();
    for d in dirs {
        let snap_path = d.join("config.snapshot");
        let text = fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
        let config = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let rows = parse_metrics(&d.join("metrics.csv"))?;
        runs.push(CompletedRun {
            dir: d,
            config,
            rows,
        });
    }
    Ok(runs)
}

/// Seed aggregate of one `(panel, tau, rank)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub panel: String,
    pub alpha: f64,
    pub tau: f64,
    pub tower: String,
    pub loss: String,
    pub rank: usize,
    pub n_seeds: usize,
    pub theta_true: f64,
    pub theta_mean: f64,
    pub theta_half_width: f64,
    pub mae_mean: f64,
    pub ndcg10_mean: f64,
    pub single_seed: bool,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    /// Panel name to the file written for it.
    pub panels: Vec<(String, PathBuf)>,
}

fn panel_name(run: &CompletedRun) -> String {
    let get = |k: &str| run.config.get(k).map_or("?", String::as_str);
    let mut name = format!(
        "{}-{}-labels_{}-policy_{}-alpha{}",
        get("tower"),
        get("loss"),
        get("labels"),
        get("policy"),
        get("alpha")
    );
    if get("model_features") != "all" || get("policy_features") != "all" {
        let _ = write!(
            name,
            "-features{}of{}",
            get("model_features"),
            get("policy_features")
        );
    }
    // Panels that differ only in, say, optimizer settings need distinct names.
    let digest = Sha256::digest(run.panel_key().as_bytes());
    let _ = write!(name, "-{:02x}{:02x}{:02x}", digest[0], digest[1], digest[2]);
    name.replace(['/', ' '], "_")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates runs into summary rows, grouped by panel, then tau, then rank.
pub fn summarize(runs: &[CompletedRun]) -> Vec<SummaryRow> {
    // panel key -> tau bits -> runs
    let mut groups: BTreeMap<String, (String, BTreeMap<u64, Vec<&CompletedRun>>)> = BTreeMap::new();
    for run in runs {
        let Some(first) = run.rows.first() else { continue };
        groups
            .entry(run.panel_key())
            .or_insert_with(|| (panel_name(run), BTreeMap::new()))
            .1
            .entry(first.tau.to_bits())
            .or_default()
            .push(run);
    }
    let mut out = Vec::new();
    for (name, by_tau) in groups.values() {
        let mut taus: Vec<(f64, &Vec<&CompletedRun>)> =
            by_tau.iter().map(|(b, r)| (f64::from_bits(*b), r)).collect();
        taus.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (tau, group) in taus {
            let ranks = group.iter().map(|r| r.rows.len()).min().unwrap_or(0);
            let maes: Vec<f64> = group
                .iter()
                .map(|r| mean(r.rows.iter().map(|m| m.abs_err)))
                .collect();
            let ndcg = mean(group.iter().map(|r| r.rows[0].ndcg10));
            let head = &group[0].rows[0];
            for k in 0..ranks {
                let thetas: Vec<f64> = group.iter().map(|r| r.rows[k].theta_hat).collect();
                let (theta_mean, half) = t_interval(&thetas);
                out.push(SummaryRow {
                    panel: name.clone(),
                    alpha: head.alpha,
                    tau,
                    tower: head.tower.clone(),
                    loss: head.loss.clone(),
                    rank: k + 1,
                    n_seeds: group.len(),
                    theta_true: true_bias_logit(k + 1),
                    theta_mean,
                    theta_half_width: half,
                    mae_mean: mean(maes.iter().copied()),
                    ndcg10_mean: ndcg,
                    single_seed: group.len() == 1,
                });
            }
        }
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut s = String::from(
        "panel,alpha,tau,tower,loss,rank,n_seeds,theta_true,theta_mean,theta_half_width,mae_mean,ndcg10_mean,single_seed\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.panel,
            r.alpha,
            r.tau,
            r.tower,
            r.loss,
            r.rank,
            r.n_seeds,
            r.theta_true,
            r.theta_mean,
            r.theta_half_width,
            r.mae_mean,
            r.ndcg10_mean,
            r.single_seed
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Static line chart of anchored bias per rank, one line per tau with
/// interval whiskers, and the true `-ln k` curve dashed.
pub fn panel_svg(title: &str, rows: &[&SummaryRow]) -> String {
    let (w, h) = (520.0, 360.0);
    let (left, right, top, bottom) = (60.0, 110.0, 40.0, 50.0);
    let k_max = rows.iter().map(|r| r.rank).max().unwrap_or(1).max(2);
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for r in rows {
        lo = lo.min(r.theta_mean - r.theta_half_width).min(r.theta_true);
        hi = hi.max(r.theta_mean + r.theta_half_width).max(r.theta_true);
    }
    let pad = ((hi - lo) * 0.05).max(0.05);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |k: usize| left + (k - 1) as f64 / (k_max - 1) as f64 * (w - left - right);
    let y = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    // Axes and ticks.
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y0} V{y1} H{x1}" stroke="black" fill="none"/>"#
    );
    for k in 1..=k_max {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            x(k),
            y1 + 15.0
        );
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * f64::from(i) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            x0 - 5.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">rank</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">anchored bias logit</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let truth: Vec<String> = (1..=k_max)
        .map(|k| format!("{:.1},{:.1}", x(k), y(true_bias_logit(k))))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" stroke="black" stroke-dasharray="5,4" fill="none"/>"#,
        truth.join(" ")
    );
    let mut legend = vec![("true -ln k".to_string(), "black")];

    let mut taus: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    for (i, tau) in taus.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut line: Vec<&&SummaryRow> = rows.iter().filter(|r| r.tau == *tau).collect();
        line.sort_by_key(|r| r.rank);
        let pts: Vec<String> = line
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.rank), y(r.theta_mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            pts.join(" ")
        );
        for r in &line {
            if r.theta_half_width > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="{color}"/>"#,
                    x(r.rank),
                    y(r.theta_mean + r.theta_half_width),
                    y(r.theta_mean - r.theta_half_width)
                );
            }
        }
        let single = line.first().is_some_and(|r| r.single_seed);
        legend.push((
            format!("tau={tau}{}", if single { " (1 seed)" } else { "" }),
            color,
        ));
    }
    for (i, (label, color)) in legend.iter().enumerate() {
        let ly = top + 10.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 + 10.0,
            x1 + 28.0,
            x1 + 32.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `summary.csv` and `panels/<name>.svg` into `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    let runs = collect_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::NoCompletedRuns(dir.to_path_buf()));
    }
    let rows = summarize(&runs);
    write_summary_csv(&rows, &dir.join("summary.csv"))?;
    let panel_dir = dir.join("panels");
    fs::create_dir_all(&panel_dir).map_err(|e| Error::io(&panel_dir, e))?;
    let mut names: Vec<&str> = rows.iter().map(|r| r.panel.as_str()).collect();
    names.dedup();
    let mut panels = Vec::new();
    for name in names {
        let members: Vec<&SummaryRow> = rows.iter().filter(|r| r.panel == name).collect();
        let path = panel_dir.join(format!("{name}.svg"));
        fs::write(&path, panel_svg(name, &members)).map_err(|e| Error::io(&path, e))?;
        panels.push((name.to_string(), path));
    }
    Ok(Report { rows, panels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_three_seeds() {
        let (m, h) = t_interval(&[-0.70, -0.69, -0.68]);
        assert!((m + 0.69).abs() < 1e-12);
        // t(0.975, 2) = 4.302653; s = 0.01.
        let oracle = 4.302_652_729_911_275 * 0.01 / 3f64.sqrt();
        assert!((h - oracle).abs() < 1e-9, "{h}");
        assert!((h - 0.02484).abs() < 1e-5);
    }

    #[test]
    fn t_interval_single_value_collapses() {
        assert_eq!(t_interval(&[-0.5]), (-0.5, 0.0));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "no_completed_runs");
        assert!(err.to_string().starts_with("no completed runs"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let row = |tau: f64, rank: usize| SummaryRow {
            panel: "p".into(),
            alpha: 1.0,
            tau,
            tower: "linear".into(),
            loss: "nll".into(),
            rank,
            n_seeds: 1,
            theta_true: true_bias_logit(rank),
            theta_mean: true_bias_logit(rank) * 0.9,
            theta_half_width: 0.0,
            mae_mean: 0.1,
            ndcg10_mean: 0.8,
            single_seed: true,
        };
        let rows: Vec<SummaryRow> = (1..=4).flat_map(|k| [row(0.0, k), row(1.0, k)]).collect();
        let refs: Vec<&SummaryRow> = rows.iter().collect();
        let svg = panel_svg("a <b>", &refs);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(svg.contains("(1 seed)"));
    }
}
