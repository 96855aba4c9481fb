use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{write_atomic, EpochRecord};
use crate::error::{Error, Result};
use crate::objectives::MetricReport;

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\ttrain_mse\tval_mse\theading_acc";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{v:.9e}"))
}

pub fn write_metrics_tsv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{}\t{:.9e}\t{:.9e}\t{}\t{}",
            r.epoch,
            r.train_loss,
            r.train_mse,
            opt(r.val_mse),
            opt(r.heading_acc)
        );
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_metrics_tsv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics", format!("{} has an unexpected header", path.display())));
    }
    let bad = |n: usize| Error::format("metrics", format!("{} line {n} is malformed", path.display()));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 2));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2));
        let maybe = |s: &str| -> Result<Option<f64>> {
            let v = num(s)?;
            Ok((!v.is_nan()).then_some(v))
        };
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad(i + 2))?,
            train_loss: num(f[1])?,
            train_mse: num(f[2])?,
            val_mse: maybe(f[3])?,
            heading_acc: maybe(f[4])?,
        });
    }
    Ok(out)
}

/// What one run contributes to the comparison tables.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub variant: String,
    pub city: String,
    pub epochs: String,
    pub report: Option<MetricReport>,
    pub history: Vec<EpochRecord>,
}

/// Model x city overview: mse, heading accuracy, epochs.
pub fn table1(runs: &[RunSummary]) -> String {
    let mut s = String::from("model\tcity\tmse\theading_acc\tepochs\n");
    for r in runs {
        let (mse, acc) = r
            .report
            .as_ref()
            .map_or(("-".to_string(), "-".to_string()), |m| (format!("{:.9}", m.mse_total()), format!("{:.6}", m.heading_accuracy())));
        let _ = writeln!(s, "{}\t{}\t{mse}\t{acc}\t{}", r.variant, r.city, r.epochs);
    }
    s
}

/// Variants side by side, one column per run.
pub fn table2(runs: &[RunSummary]) -> String {
    let mut s = String::from("metric");
    for r in runs {
        let _ = write!(s, "\t{}", r.name);
    }
    s.push('\n');
    type Cell = fn(&MetricReport) -> String;
    let rows: [(&str, Cell); 3] = [
        ("mse", |m| format!("{:.9}", m.mse_total())),
        ("heading_acc", |m| format!("{:.6}", m.heading_accuracy())),
        ("heading_acc_data", |m| format!("{:.6}", m.heading_accuracy_data())),
    ];
    for (label, f) in rows {
        s += label;
        for r in runs {
            let _ = write!(s, "\t{}", r.report.as_ref().map_or("-".into(), f));
        }
        s.push('\n');
    }
    s += "epochs";
    for r in runs {
        let _ = write!(s, "\t{}", r.epochs);
    }
    s.push('\n');
    s
}

/// Line plot of training loss and validation mse per epoch. `None` for an
/// empty history.
pub fn loss_plot_svg(history: &[EpochRecord]) -> Option<String> {
    if history.is_empty() {
        return None;
    }
    let (w, h, pad) = (480.0, 280.0, 40.0);
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("train_loss", "#1f77b4", history.iter().map(|r| r.train_loss).collect()),
        ("train_mse", "#2ca02c", history.iter().map(|r| r.train_mse).collect()),
        ("val_mse", "#d62728", history.iter().filter_map(|r| r.val_mse).collect()),
    ];
    let ymax = series.iter().flat_map(|s| s.2.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let n = history.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v / ymax);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<path d=\"M{pad} {pad} V{} H{}\" fill=\"none\" stroke=\"#444\"/>",
        h - pad,
        w - pad
    );
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\">{ymax:.3e}</text>", pad - 6.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">epoch {}</text>", w - pad - 50.0, h - pad + 16.0, history.len());
    for (k, (label, color, values)) in series.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let pts: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>", w - pad - 80.0, pad + 14.0 * k as f64);
    }
    s += "</svg>\n";
    Some(s)
}

/// Writes `table1.tsv`, `table2.tsv`, one `table3_<run>.tsv` per run with a
/// report, and `loss_<run>.svg` per run with history.
pub fn report_tables(runs: &[RunSummary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<()> {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("table1.tsv".into(), &table1(runs))?;
    put("table2.tsv".into(), &table2(runs))?;
    for r in runs {
        let stem = sanitize(&r.name);
        if let Some(m) = &r.report {
            put(format!("table3_{stem}.tsv"), &m.to_table())?;
        }
        if let Some(svg) = loss_plot_svg(&r.history) {
            put(format!("loss_{stem}.svg"), &svg)?;
        }
    }
    Ok(written)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(e: u32) -> EpochRecord {
        EpochRecord { epoch: e, train_loss: 0.1 / e as f64, train_mse: 0.05, val_mse: None, heading_acc: Some(0.75) }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.tsv");
        let h = vec![rec(1), rec(2)];
        write_metrics_tsv(&p, &h).unwrap();
        let back = read_metrics_tsv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].epoch, 2);
        assert!((back[1].train_loss - 0.05).abs() < 1e-12);
        assert_eq!(back[0].val_mse, None);
        std::fs::write(&p, "garbage\n").unwrap();
        assert!(read_metrics_tsv(&p).is_err());
    }

    #[test]
    fn tables_and_plots() {
        let a = RunSummary {
            name: "RAE_all".into(),
            variant: "RAE_all".into(),
            city: "synthetic".into(),
            epochs: "10+5".into(),
            report: Some(MetricReport::default()),
            history: vec![],
        };
        let b = RunSummary { name: "ConvLSTM".into(), history: vec![rec(1)], ..a.clone() };
        let t2 = table2(&[a.clone(), b.clone()]);
        assert!(t2.starts_with("metric\tRAE_all\tConvLSTM\n"));
        assert!(t2.contains("epochs\t10+5\t10+5"));
        assert_eq!(table1(&[a.clone()]).lines().count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let files = report_tables(&[a, b], dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert!(names.contains(&"table3_RAE_all.tsv".to_string()));
        assert!(names.contains(&"loss_ConvLSTM.svg".to_string()));
        assert!(!names.contains(&"loss_RAE_all.svg".to_string()));
        let t3 = std::fs::read_to_string(dir.path().join("table3_RAE_all.tsv")).unwrap();
        assert_eq!(t3.lines().filter(|l| l.contains("min\t")).count(), 3);
        assert!(loss_plot_svg(&[]).is_none());
    }
}
