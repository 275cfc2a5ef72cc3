//! `plotdata`: flatten results bundles into a tidy long-format CSV for
//! external plotting (epoch curves, baseline points, summary rows).

use crate::io::{write_plotdata_csv, PlotRow, ResultsBundle};
use std::path::Path;

pub fn cmd_plotdata(inputs: &[std::path::PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let bundle = ResultsBundle::load(path)?;
        let run = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        for rec in &bundle.per_epoch {
            if let (Some(g), Some(sg)) = (rec.mean_gap, rec.std_gap) {
                rows.push(PlotRow {
                    run: run.clone(),
                    series: "gap".into(),
                    index: rec.epoch,
                    mean: g,
                    std: Some(sg),
                });
            }
            rows.push(PlotRow {
                run: run.clone(),
                series: "violation".into(),
                index: rec.epoch,
                mean: rec.mean_viol,
                std: Some(rec.std_viol),
            });
            rows.push(PlotRow {
                run: run.clone(),
                series: "objective".into(),
                index: rec.epoch,
                mean: rec.mean_obj,
                std: None,
            });
        }
        if let Some(t) = &bundle.final_test {
            if let (Some(g), Some(sg)) = (t.mean_gap, t.std_gap) {
                rows.push(PlotRow { run: run.clone(), series: "test_gap".into(), index: 0, mean: g, std: Some(sg) });
            }
            rows.push(PlotRow {
                run: run.clone(),
                series: "test_violation".into(),
                index: 0,
                mean: t.mean_viol,
                std: Some(t.std_viol),
            });
            rows.push(PlotRow {
                run: run.clone(),
                series: "test_objective".into(),
                index: 0,
                mean: t.mean_obj,
                std: None,
            });
        }
        if let Some(b) = &bundle.baseline {
            rows.push(PlotRow {
                run: run.clone(),
                series: "baseline_objective".into(),
                index: 0,
                mean: b.mean_obj,
                std: Some(b.std_obj),
            });
            rows.push(PlotRow {
                run: run.clone(),
                series: "baseline_violation".into(),
                index: 0,
                mean: b.mean_viol,
                std: Some(b.std_viol),
            });
        }
    }
    write_plotdata_csv(out, &rows)?;
    eprintln!("wrote {} series rows to {}", rows.len(), out.display());
    Ok(())
}
