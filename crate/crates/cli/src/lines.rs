//! Metrics report file format: JSON lines, one record per scored image plus
//! one summary per (dataset, noise level) group. Written by `eval`, read
//! back by `report`.

use std::path::Path;

use jdd_core::metrics::{psnr_serde, MetricReport, PairMetrics};
use jdd_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::chart::bar_chart;
use crate::table;

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Image {
        dataset: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(flatten)]
        metrics: PairMetrics,
    },
    Summary {
        dataset: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        count: usize,
        #[serde(with = "psnr_serde")]
        psnr: f64,
        ssim: f64,
        delta_e: f64,
        #[serde(default)]
        warnings: Vec<String>,
    },
}

/// Expands one dataset-level metric report into per-image lines plus a
/// trailing summary line.
pub fn lines_from_report(
    dataset: &str,
    sigma: Option<f64>,
    report: &MetricReport,
) -> Vec<ReportLine> {
    let mut out: Vec<ReportLine> = report
        .per_image
        .iter()
        .map(|m| ReportLine::Image {
            dataset: dataset.to_string(),
            sigma,
            metrics: m.clone(),
        })
        .collect();
    out.push(ReportLine::Summary {
        dataset: dataset.to_string(),
        sigma,
        count: report.per_image.len(),
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
        delta_e: report.mean_delta_e,
        warnings: report.warnings.clone(),
    });
    out
}

pub fn write_jsonl(path: &Path, lines: &[ReportLine]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in lines {
        let text = serde_json::to_string(line)
            .map_err(|e| Error::InvalidArgument(format!("unserializable record: {e}")))?;
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Parses a metrics JSONL file; malformed lines are counted, not fatal.
pub fn read_jsonl(path: &Path) -> Result<(Vec<ReportLine>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut malformed = 0usize;
    for raw in text.lines() {
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ReportLine>(raw) {
            Ok(line) => lines.push(line),
            Err(_) => malformed += 1,
        }
    }
    Ok((lines, malformed))
}

/// One (dataset, sigma) group with its aggregate metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub dataset: String,
    pub sigma: Option<f64>,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
    pub warnings: Vec<String>,
}

impl Group {
    pub fn label(&self) -> String {
        match self.sigma {
            Some(s) => format!("{} s={s}", self.dataset),
            None => self.dataset.clone(),
        }
    }
}

fn key_of(dataset: &str, sigma: Option<f64>) -> (String, u64) {
    (
        dataset.to_string(),
        sigma.unwrap_or(f64::NEG_INFINITY).to_bits(),
    )
}

/// Collapses report lines into per-group aggregates. Summary lines win;
/// groups that only have image lines get means computed from those.
pub fn summarize(lines: &[ReportLine]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    let find = |groups: &mut Vec<Group>, dataset: &str, sigma: Option<f64>| -> usize {
        let key = key_of(dataset, sigma);
        if let Some(i) = groups
            .iter()
            .position(|g| key_of(&g.dataset, g.sigma) == key)
        {
            i
        } else {
            groups.push(Group {
                dataset: dataset.to_string(),
                sigma,
                count: 0,
                psnr: 0.0,
                ssim: 0.0,
                delta_e: 0.0,
                warnings: Vec::new(),
            });
            groups.len() - 1
        }
    };

    // Accumulate image lines, then let explicit summaries override.
    for line in lines {
        if let ReportLine::Image {
            dataset,
            sigma,
            metrics,
        } = line
        {
            let i = find(&mut groups, dataset, *sigma);
            let g = &mut groups[i];
            g.count += 1;
            g.psnr += metrics.psnr;
            g.ssim += metrics.ssim;
            g.delta_e += metrics.delta_e;
        }
    }
    for g in &mut groups {
        if g.count > 0 {
            g.psnr /= g.count as f64;
            g.ssim /= g.count as f64;
            g.delta_e /= g.count as f64;
        }
    }
    for line in lines {
        if let ReportLine::Summary {
            dataset,
            sigma,
            count,
            psnr,
            ssim,
            delta_e,
            warnings,
        } = line
        {
            let i = find(&mut groups, dataset, *sigma);
            groups[i] = Group {
                dataset: dataset.clone(),
                sigma: *sigma,
                count: *count,
                psnr: *psnr,
                ssim: *ssim,
                delta_e: *delta_e,
                warnings: warnings.clone(),
            };
        }
    }
    groups.sort_by(|a, b| {
        a.dataset.cmp(&b.dataset).then(
            a.sigma
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&b.sigma.unwrap_or(f64::NEG_INFINITY)),
        )
    });
    groups
}

pub fn format_psnr(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".to_string()
    }
}

/// Renders the grouped summary table shown by `eval` and `report`.
pub fn render_group_table(groups: &[Group]) -> String {
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.dataset.clone(),
                g.sigma.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                g.count.to_string(),
                format_psnr(g.psnr),
                format!("{:.4}", g.ssim),
                format!("{:.4}", g.delta_e),
            ]
        })
        .collect();
    table::render(
        &["dataset", "sigma", "images", "psnr", "ssim", "delta_e"],
        &rows,
    )
}

/// Writes one bar chart per metric into `dir`.
pub fn emit_charts(
    dir: &Path,
    size: (u32, u32),
    groups: &[Group],
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let series: [(&str, Box<dyn Fn(&Group) -> f64>); 3] = [
        ("psnr", Box::new(|g: &Group| g.psnr)),
        ("ssim", Box::new(|g: &Group| g.ssim)),
        ("delta_e", Box::new(|g: &Group| g.delta_e)),
    ];
    for (name, value_of) in &series {
        let bars: Vec<(String, f64)> = groups.iter().map(|g| (g.label(), value_of(g))).collect();
        let path = dir.join(format!("{name}.png"));
        bar_chart(&path, &name.to_uppercase(), &bars, size.0, size.1)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_line(dataset: &str, sigma: Option<f64>, psnr: f64) -> ReportLine {
        ReportLine::Image {
            dataset: dataset.into(),
            sigma,
            metrics: PairMetrics {
                name: "x".into(),
                psnr,
                ssim: 0.9,
                delta_e: 1.0,
            },
        }
    }

    #[test]
    fn image_lines_average_into_groups() {
        let lines = vec![
            image_line("kodak", Some(15.0), 30.0),
            image_line("kodak", Some(15.0), 34.0),
            image_line("kodak", Some(5.0), 40.0),
        ];
        let groups = summarize(&lines);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].sigma, Some(5.0));
        assert_eq!(groups[1].count, 2);
        assert!((groups[1].psnr - 32.0).abs() < 1e-12);
    }

    #[test]
    fn summary_lines_override_image_means() {
        let lines = vec![
            image_line("d", None, 10.0),
            ReportLine::Summary {
                dataset: "d".into(),
                sigma: None,
                count: 7,
                psnr: 99.0,
                ssim: 0.5,
                delta_e: 2.0,
                warnings: vec!["w".into()],
            },
        ];
        let groups = summarize(&lines);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].count, 7);
        assert_eq!(groups[0].psnr, 99.0);
        assert_eq!(groups[0].warnings.len(), 1);
    }

    #[test]
    fn infinite_psnr_round_trips_as_string() {
        let line = ReportLine::Summary {
            dataset: "same".into(),
            sigma: None,
            count: 1,
            psnr: f64::INFINITY,
            ssim: 1.0,
            delta_e: 0.0,
            warnings: vec![],
        };
        let text = serde_json::to_string(&line).unwrap();
        assert!(text.contains("\"inf\""));
        let back: ReportLine = serde_json::from_str(&text).unwrap();
        match back {
            ReportLine::Summary { psnr, .. } => assert!(psnr.is_infinite()),
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn malformed_lines_are_counted_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&image_line("d", Some(5.0), 30.0)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n{{\"kind\":\"image\"}}\n")).unwrap();
        let (lines, malformed) = read_jsonl(&path).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(malformed, 2);
    }

    #[test]
    fn table_groups_by_sigma() {
        let lines = vec![
            image_line("d", Some(5.0), 30.0),
            image_line("d", Some(15.0), 28.0),
            image_line("d", Some(25.0), 26.0),
        ];
        let table = render_group_table(&summarize(&lines));
        assert_eq!(table.lines().count(), 2 + 3);
    }
}
