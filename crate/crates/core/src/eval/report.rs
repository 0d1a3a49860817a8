//! Evaluation reports and their JSON, long-format CSV, text-table and SVG
//! renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{median, std_dev};
use crate::error::{Error, Result};
use crate::regression::SplitProtocol;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Nr,
    Fr,
    Ablation,
}

impl ReportKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Nr => "nr",
            Self::Fr => "fr",
            Self::Ablation => "ablation",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "nr" => Ok(Self::Nr),
            "fr" => Ok(Self::Fr),
            "ablation" => Ok(Self::Ablation),
            other => Err(Error::InvalidInput(format!("unknown report kind `{other}`"))),
        }
    }
}

/// One method on one dataset. `srcc[i]`/`plcc[i]` belong to iteration `i`;
/// `None` marks an undefined (degenerate) correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub dataset: String,
    pub method: String,
    pub srcc: Vec<Option<f64>>,
    pub plcc: Vec<Option<f64>>,
    pub median_srcc: Option<f64>,
    pub median_plcc: Option<f64>,
    /// Population standard deviation across iterations; only for runs with
    /// more than one iteration.
    pub std_srcc: Option<f64>,
    pub std_plcc: Option<f64>,
    /// `(prediction, mos)` pairs of the first iteration's test split.
    pub scatter: Vec<(f64, f64)>,
}

fn summary(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    let std = if values.len() > 1 { std_dev(&v) } else { None };
    (median(&v), std)
}

impl MethodResult {
    pub fn new(
        dataset: impl Into<String>,
        method: impl Into<String>,
        srcc: Vec<Option<f64>>,
        plcc: Vec<Option<f64>>,
        scatter: Vec<(f64, f64)>,
    ) -> Self {
        let (median_srcc, std_srcc) = summary(&srcc);
        let (median_plcc, std_plcc) = summary(&plcc);
        Self {
            dataset: dataset.into(),
            method: method.into(),
            srcc,
            plcc,
            median_srcc,
            median_plcc,
            std_srcc,
            std_plcc,
            scatter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub dataset: String,
    pub srcc_pct: Option<f64>,
    pub plcc_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAverage {
    pub method: String,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub results: Vec<MethodResult>,
    pub averages: Vec<MethodAverage>,
    pub deltas: Vec<AblationDelta>,
    pub protocol: Option<SplitProtocol>,
    pub logistic_fit: bool,
    pub master_seed: u64,
    pub fingerprints: BTreeMap<String, String>,
}

/// `100 (with - without) / without`.
pub fn percent_delta(with: f64, without: f64) -> Option<f64> {
    (without != 0.0).then(|| 100.0 * (with - without) / without)
}

/// Signed percentage truncated toward zero at two decimals, e.g. `+2.81%`.
/// A tiny bias absorbs representation error such as `2.8099999...`.
pub fn format_delta(pct: f64) -> String {
    let hundredths = (pct * 100.0 + pct.signum() * 1e-7).trunc() / 100.0;
    if hundredths < 0.0 {
        format!("{hundredths:.2}%")
    } else {
        format!("+{:.2}%", hundredths.abs())
    }
}

impl EvalReport {
    pub fn new(
        kind: ReportKind,
        results: Vec<MethodResult>,
        protocol: Option<SplitProtocol>,
        master_seed: u64,
    ) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for r in &results {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let mean = |v: Vec<Option<f64>>| -> Option<f64> {
            let v: Option<Vec<f64>> = v.into_iter().collect();
            v.filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let averages = if kind == ReportKind::Fr {
            methods
                .iter()
                .map(|m| {
                    let rows: Vec<&MethodResult> = results.iter().filter(|r| &r.method == m).collect();
                    MethodAverage {
                        method: m.clone(),
                        srcc: mean(rows.iter().map(|r| r.median_srcc).collect()),
                        plcc: mean(rows.iter().map(|r| r.median_plcc).collect()),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind,
            results,
            averages,
            deltas: Vec::new(),
            protocol,
            logistic_fit: false,
            master_seed,
            fingerprints: BTreeMap::new(),
        }
    }

    /// Rejects empty reports and medians that do not follow from the
    /// stored iterations.
    pub fn validate(&self) -> Result<()> {
        if self.results.is_empty() {
            return Err(Error::InvalidInput("report has no results".into()));
        }
        for r in &self.results {
            if r.srcc.is_empty() || r.plcc.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "result `{}`/`{}` has no iterations",
                    r.dataset, r.method
                )));
            }
            if summary(&r.srcc) != (r.median_srcc, r.std_srcc) || summary(&r.plcc) != (r.median_plcc, r.std_plcc) {
                return Err(Error::InvalidInput(format!(
                    "summary of `{}`/`{}` does not match its iterations",
                    r.dataset, r.method
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// Long format: `# key,value` metadata lines, then
    /// `dataset,method,index,field,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        let mut meta = |k: &str, v: String| {
            let _ = writeln!(out, "# {k},{v}");
        };
        meta("schema_version", self.schema_version.to_string());
        meta("kind", self.kind.as_str().to_string());
        meta("master_seed", self.master_seed.to_string());
        meta("logistic_fit", self.logistic_fit.to_string());
        if let Some(p) = &self.protocol {
            meta("protocol.train_fraction", p.train_fraction.to_string());
            meta("protocol.iterations", p.iterations.to_string());
            meta("protocol.seed", p.seed.to_string());
            meta("protocol.large", p.large.to_string());
        }
        for (k, v) in &self.fingerprints {
            meta(&format!("fingerprint.{k}"), v.clone());
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(["dataset", "method", "index", "field", "value"])?;
        let num = |v: Option<f64>| v.map_or_else(|| "degenerate".to_string(), |x| x.to_string());
        for r in &self.results {
            let (d, m) = (r.dataset.as_str(), r.method.as_str());
            for (i, (s, p)) in r.srcc.iter().zip(&r.plcc).enumerate() {
                w.write_record([d, m, &i.to_string(), "srcc", &num(*s)])?;
                w.write_record([d, m, &i.to_string(), "plcc", &num(*p)])?;
            }
            w.write_record([d, m, "", "median_srcc", &num(r.median_srcc)])?;
            w.write_record([d, m, "", "median_plcc", &num(r.median_plcc)])?;
            if r.std_srcc.is_some() || r.std_plcc.is_some() {
                w.write_record([d, m, "", "std_srcc", &num(r.std_srcc)])?;
                w.write_record([d, m, "", "std_plcc", &num(r.std_plcc)])?;
            }
            for (i, (pred, mos)) in r.scatter.iter().enumerate() {
                w.write_record([d, m, &i.to_string(), "scatter_prediction", &pred.to_string()])?;
                w.write_record([d, m, &i.to_string(), "scatter_mos", &mos.to_string()])?;
            }
        }
        for a in &self.averages {
            w.write_record(["", &a.method, "", "average_srcc", &num(a.srcc)])?;
            w.write_record(["", &a.method, "", "average_plcc", &num(a.plcc)])?;
        }
        for dlt in &self.deltas {
            w.write_record([&dlt.dataset, "", "", "delta_srcc_pct", &num(dlt.srcc_pct)])?;
            w.write_record([&dlt.dataset, "", "", "delta_plcc_pct", &num(dlt.plcc_pct)])?;
        }
        let body = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidInput(format!("report csv: {m}"));
        let mut meta = BTreeMap::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(',')
                    .ok_or_else(|| bad(format!("metadata line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let parse_num = |s: &str| -> Result<Option<f64>> {
            if s == "degenerate" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
            }
        };
        let parse_bool = |s: String| s.parse::<bool>().map_err(|_| bad(format!("bad flag `{s}`")));
        let parse_u64 = |s: String| s.parse::<u64>().map_err(|_| bad(format!("bad integer `{s}`")));

        let protocol = if meta.contains_key("protocol.iterations") {
            Some(SplitProtocol {
                train_fraction: get("protocol.train_fraction")?
                    .parse()
                    .map_err(|_| bad("bad train fraction".into()))?,
                iterations: parse_u64(get("protocol.iterations")?)? as usize,
                seed: parse_u64(get("protocol.seed")?)?,
                large: parse_bool(get("protocol.large")?)?,
            })
        } else {
            None
        };
        let mut report = EvalReport {
            schema_version: parse_u64(get("schema_version")?)? as u32,
            kind: ReportKind::parse(&get("kind")?)?,
            results: Vec::new(),
            averages: Vec::new(),
            deltas: Vec::new(),
            protocol,
            logistic_fit: parse_bool(get("logistic_fit")?)?,
            master_seed: parse_u64(get("master_seed")?)?,
            fingerprints: meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("fingerprint.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        };

        let mut reader = csv::Reader::from_reader(body.as_bytes());
        for record in reader.records() {
            let record = record?;
            let f = |i: usize| record.get(i).unwrap_or("").to_string();
            let (dataset, method, index, field, value) = (f(0), f(1), f(2), f(3), f(4));
            let idx = || index.parse::<usize>().map_err(|_| bad(format!("bad index `{index}`")));
            match field.as_str() {
                "average_srcc" | "average_plcc" => {
                    let pos = match report.averages.iter().position(|a| a.method == method) {
                        Some(p) => p,
                        None => {
                            report.averages.push(MethodAverage {
                                method: method.clone(),
                                srcc: None,
                                plcc: None,
                            });
                            report.averages.len() - 1
                        }
                    };
                    let a = &mut report.averages[pos];
                    if field == "average_srcc" {
                        a.srcc = parse_num(&value)?
                    } else {
                        a.plcc = parse_num(&value)?
                    }
                }
                "delta_srcc_pct" | "delta_plcc_pct" => {
                    let pos = match report.deltas.iter().position(|d| d.dataset == dataset) {
                        Some(p) => p,
                        None => {
                            report.deltas.push(AblationDelta {
                                dataset: dataset.clone(),
                                srcc_pct: None,
                                plcc_pct: None,
                            });
                            report.deltas.len() - 1
                        }
                    };
                    let d = &mut report.deltas[pos];
                    if field == "delta_srcc_pct" {
                        d.srcc_pct = parse_num(&value)?
                    } else {
                        d.plcc_pct = parse_num(&value)?
                    }
                }
                _ => {
                    let pos = match report
                        .results
                        .iter()
                        .position(|r| r.dataset == dataset && r.method == method)
                    {
                        Some(p) => p,
                        None => {
                            report.results.push(MethodResult {
                                dataset: dataset.clone(),
                                method: method.clone(),
                                srcc: Vec::new(),
                                plcc: Vec::new(),
                                median_srcc: None,
                                median_plcc: None,
                                std_srcc: None,
                                std_plcc: None,
                                scatter: Vec::new(),
                            });
                            report.results.len() - 1
                        }
                    };
                    let r = &mut report.results[pos];
                    let v = parse_num(&value)?;
                    match field.as_str() {
                        "srcc" => r.srcc.push(v),
                        "plcc" => r.plcc.push(v),
                        "median_srcc" => r.median_srcc = v,
                        "median_plcc" => r.median_plcc = v,
                        "std_srcc" => r.std_srcc = v,
                        "std_plcc" => r.std_plcc = v,
                        "scatter_prediction" => {
                            if idx()? != r.scatter.len() {
                                return Err(bad("scatter rows out of order".into()));
                            }
                            r.scatter
                                .push((v.ok_or_else(|| bad("missing scatter value".into()))?, f64::NAN));
                        }
                        "scatter_mos" => {
                            let i = idx()?;
                            let slot = r
                                .scatter
                                .get_mut(i)
                                .ok_or_else(|| bad("scatter mos before prediction".into()))?;
                            slot.1 = v.ok_or_else(|| bad("missing scatter value".into()))?;
                        }
                        other => return Err(bad(format!("unknown field `{other}`"))),
                    }
                }
            }
        }
        report.validate()?;
        Ok(report)
    }

    /// Method rows with `SRCC | PLCC` column pairs per dataset, standard
    /// deviations in parentheses.
    pub fn to_table_text(&self) -> String {
        let mut datasets: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.results {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let cell = |v: Option<f64>, sd: Option<f64>| match (v, sd) {
            (None, _) => "degenerate".to_string(),
            (Some(v), Some(sd)) => format!("{v:.3} ({sd:.3})"),
            (Some(v), None) => format!("{v:.3}"),
        };
        let mut header = vec!["Method".to_string()];
        for d in &datasets {
            header.push(format!("{d} SRCC"));
            header.push(format!("{d} PLCC"));
        }
        if !self.averages.is_empty() {
            header.push("Average SRCC".into());
            header.push("Average PLCC".into());
        }
        let mut rows = vec![header];
        for m in &methods {
            let mut row = vec![m.to_string()];
            for d in &datasets {
                match self.results.iter().find(|r| r.dataset == *d && r.method == *m) {
                    Some(r) => {
                        row.push(cell(r.median_srcc, r.std_srcc));
                        row.push(cell(r.median_plcc, r.std_plcc));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            if let Some(a) = self.averages.iter().find(|a| a.method == *m) {
                row.push(cell(a.srcc, None));
                row.push(cell(a.plcc, None));
            }
            rows.push(row);
        }
        if !self.deltas.is_empty() {
            let mut row = vec!["Improvement".to_string()];
            for d in &datasets {
                let dl = self.deltas.iter().find(|x| x.dataset == *d);
                let f = |v: Option<f64>| v.map_or("-".to_string(), format_delta);
                row.push(f(dl.and_then(|x| x.srcc_pct)));
                row.push(f(dl.and_then(|x| x.plcc_pct)));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| {
                rows.iter()
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("-|-"));
                out.push('\n');
            }
        }
        out
    }

    /// Predicted-vs-MOS scatter per result.
    pub fn scatter_svg(result: &MethodResult) -> String {
        const SIZE: f64 = 400.0;
        const PAD: f64 = 50.0;
        let bounds = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else {
                (lo.min(0.0), lo.max(0.0) + 1.0)
            }
        };
        let (xlo, xhi) = bounds(&mut result.scatter.iter().map(|p| p.0));
        let (ylo, yhi) = bounds(&mut result.scatter.iter().map(|p| p.1));
        let sx = |v: f64| PAD + (v - xlo) / (xhi - xlo) * (SIZE - 2.0 * PAD);
        let sy = |v: f64| SIZE - PAD - (v - ylo) / (yhi - ylo) * (SIZE - 2.0 * PAD);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{b}" x2="{e}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
            b = SIZE - PAD,
            e = SIZE - PAD
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">predicted ({xlo:.3} .. {xhi:.3})</text>"#,
            SIZE / 2.0,
            SIZE - 15.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">MOS ({ylo:.3} .. {yhi:.3})</text>"#,
            SIZE / 2.0,
            SIZE / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="25" font-size="14" text-anchor="middle">{} / {}</text>"#,
            SIZE / 2.0,
            xml_escape(&result.dataset),
            xml_escape(&result.method)
        );
        for (x, y) in &result.scatter {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue" fill-opacity="0.7"/>"#,
                sx(*x),
                sy(*y)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Grouped SRCC/PLCC bars, one group per result.
    pub fn bars_svg(&self) -> String {
        let group = 70.0;
        let (pad, height) = (50.0, 300.0);
        let width = pad * 2.0 + group * self.results.len() as f64;
        let plot_h = height - 2.0 * pad;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let base = height - pad;
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            width - pad
        );
        for (i, r) in self.results.iter().enumerate() {
            let x0 = pad + group * i as f64 + 10.0;
            for (k, (v, color)) in [(r.median_srcc, "steelblue"), (r.median_plcc, "darkorange")]
                .into_iter()
                .enumerate()
            {
                let h = v.unwrap_or(0.0).clamp(0.0, 1.0) * plot_h;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="22" height="{h:.1}" fill="{color}"/>"#,
                    x0 + 24.0 * k as f64,
                    base - h
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                x0 + 23.0,
                base + 15.0,
                xml_escape(&format!("{} {}", r.dataset, r.method))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="25" font-size="12">SRCC (blue) and PLCC (orange)</text>"#
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    TableText,
    Plots,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "table-text" => Ok(Self::TableText),
            "plots" => Ok(Self::Plots),
            other => Err(Error::Config(format!(
                "unknown report format `{other}` (json, csv, table-text, plots)"
            ))),
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes the report to `out`; for plots `out` is a directory that receives
/// one scatter plot per result and a bar chart.
pub fn emit_report(report: &EvalReport, format: ReportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    match format {
        ReportFormat::Json => Ok(vec![write(out, &report.to_json()?)?]),
        ReportFormat::Csv => Ok(vec![write(out, &report.to_csv()?)?]),
        ReportFormat::TableText => Ok(vec![write(out, &report.to_table_text())?]),
        ReportFormat::Plots => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut files = Vec::new();
            for (i, r) in report.results.iter().enumerate() {
                let name = format!("scatter_{i:02}_{}_{}.svg", file_safe(&r.dataset), file_safe(&r.method));
                files.push(write(&out.join(name), &EvalReport::scatter_svg(r))?);
            }
            files.push(write(&out.join("bars.svg"), &report.bars_svg())?);
            Ok(files)
        }
    }
}
