//! Static SVG plots and text dumps from a finished run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hgrl::dgp::group_token_neighbours;
use hgrl::pipeline::{load_model, read_sweep, write_atomic, MODEL_FILE, SWEEP_CSV, TRAIN_LOG};
use hgrl::{Error, Result};
use plotters::prelude::*;

type Series = (String, Vec<(f64, f64)>);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Eval(format!("plotting: {e}"))
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad)..(hi + pad)
}

/// Renders line series to an SVG document.
pub fn line_plot(title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<String> {
    let points = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Eval(format!("nothing to plot for {title:?}")));
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<_> = pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        if series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Per-step loss components from an NDJSON training log.
pub fn loss_series(log: &str) -> Result<Vec<Series>> {
    let keys = ["total", "base", "state", "object", "pair"];
    let mut series: Vec<Series> = keys.iter().map(|k| (k.to_string(), Vec::new())).collect();
    for (n, line) in log.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: TRAIN_LOG.into(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if v["event"] != "step" {
            continue;
        }
        let step = v["step"].as_f64().unwrap_or(n as f64);
        for (k, s) in keys.iter().zip(series.iter_mut()) {
            if let Some(x) = v[k].as_f64() {
                s.1.push((step, x));
            }
        }
    }
    Ok(series)
}

/// (seen_acc, unseen_acc) points of a curve CSV.
pub fn curve_points(csv: &str) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for (n, line) in csv.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            cols.get(i).and_then(|c| c.trim().parse().ok()).ok_or_else(|| Error::Parse {
                path: "curve csv".into(),
                line: n + 1,
                message: format!("bad row {line:?}"),
            })
        };
        pts.push((parse(1)?, parse(2)?));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pts)
}

/// Writes every report artifact the run directory supports; returns the
/// written paths.
pub fn cmd_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    let log_path = run.join(TRAIN_LOG);
    if log_path.is_file() {
        let log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        emit("loss.svg", line_plot("training loss", "step", "loss", &loss_series(&log)?)?)?;
    }
    let mut entries: Vec<_> = fs::read_dir(run)
        .map_err(|e| Error::io(run, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(world) = name.strip_prefix("metrics_").and_then(|n| n.strip_suffix("_curve.csv")) else {
            continue;
        };
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let series = vec![(format!("{world} world"), curve_points(&body)?)];
        emit(
            &format!("curve_{world}.svg"),
            line_plot(&format!("seen/unseen trade-off ({world})"), "seen accuracy", "unseen accuracy", &series)?,
        )?;
    }
    let sweep = run.join(SWEEP_CSV);
    if sweep.is_file() {
        let rows = read_sweep(&sweep)?;
        let axes: [(&str, fn(&hgrl::pipeline::SweepRow) -> f64); 4] = [
            ("k_s", |r| r.k_s as f64),
            ("k_o", |r| r.k_o as f64),
            ("lambda", |r| r.lambda),
            ("top_k", |r| r.top_k as f64),
        ];
        for (axis, get) in axes {
            let mut by: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
            for r in &rows {
                let x = get(r);
                let e = by.entry(x.to_bits()).or_insert((x, 0.0, 0));
                e.1 += r.hm;
                e.2 += 1;
            }
            if by.len() < 2 {
                continue;
            }
            let mut pts: Vec<(f64, f64)> = by.values().map(|&(x, s, n)| (x, s / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            emit(
                &format!("sweep_{axis}.svg"),
                line_plot(&format!("HM against {axis}"), axis, "mean HM", &[("HM".into(), pts)])?,
            )?;
        }
    }
    let model_path = run.join(MODEL_FILE);
    if model_path.is_file() {
        let (_, p, model, _) = load_model(&model_path, &[])?;
        let bank = &model.prompts;
        let vocab = &p.dataset.vocab;
        let mut dictionary = Vec::new();
        for (names, id) in [(vocab.states(), bank.class_state), (vocab.objects(), bank.class_object)] {
            for (name, row) in names.iter().zip(model.store.get(id).rows()) {
                dictionary.push((name.clone(), row.to_vec()));
            }
        }
        let neighbours = group_token_neighbours(&model.store, bank, &dictionary, 5);
        let mut body = String::new();
        for (group, list) in neighbours {
            let words: Vec<String> = list.iter().map(|(w, c)| format!("{w} ({c:.3})")).collect();
            body.push_str(&format!("{group}: {}\n", words.join(", ")));
        }
        emit("group_neighbours.txt", body)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_curves_with_infinite_biases() {
        let pts = curve_points("bias,seen_acc,unseen_acc\n-inf,1,0\n0.5,0.5,0.5\ninf,0,1\n").unwrap();
        assert_eq!(pts, vec![(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]);
    }

    #[test]
    fn loss_series_keeps_step_events_only() {
        let log = "{\"event\":\"step\",\"step\":1,\"total\":2.0,\"base\":1.0,\"state\":1,\"object\":1,\"pair\":1}\n\
                   {\"event\":\"epoch\",\"step\":1,\"mean_loss\":2.0}\n";
        let s = loss_series(log).unwrap();
        assert_eq!(s[0], ("total".into(), vec![(1.0, 2.0)]));
    }

    #[test]
    fn renders_svg() {
        let svg = line_plot("t", "x", "y", &[("a".into(), vec![(0.0, 0.0), (1.0, 1.0)])]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(line_plot("t", "x", "y", &[]).is_err());
    }
}
