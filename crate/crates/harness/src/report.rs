//! Plot-ready tidy CSVs derived from grid results: WER versus pretraining
//! data size, and WER versus model size averaged across data quantities,
//! with mean and standard-deviation columns.

use crate::grid::CellResult;
use crate::Result;
use std::collections::BTreeMap;
use std::path::Path;

pub const DATA_PLOT_HEADER: [&str; 6] =
    ["method", "fraction", "data_size", "wer_mean", "wer_std", "n"];
pub const MODEL_PLOT_HEADER: [&str; 6] =
    ["method", "fraction", "d_model", "wer_mean", "wer_std", "n"];

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type Key = (String, String, usize);

fn group_by<F>(results: &[CellResult], key_of: F) -> BTreeMap<Key, Vec<f64>>
where
    F: Fn(&CellResult) -> Key,
{
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.wer.is_finite()) {
        groups.entry(key_of(r)).or_default().push(r.wer);
    }
    groups
}

/// Writes `plot_wer_vs_data.csv` and `plot_wer_vs_model.csv` under `out`.
///
/// The model-size table averages over pretraining data quantities (and
/// seeds); the data-size table averages over seeds.
pub fn emit_plots_data(results: &[CellResult], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("plot_wer_vs_data.csv"))?;
    w.write_record(DATA_PLOT_HEADER)?;
    for ((method, fraction, data_size), vals) in
        group_by(results, |r| (r.spec.method.clone(), format!("{}", r.spec.fraction), r.spec.data_size))
    {
        let (mean, std) = mean_std(&vals);
        w.write_record([
            method.as_str(),
            fraction.as_str(),
            &data_size.to_string(),
            &format!("{mean:.6}"),
            &format!("{std:.6}"),
            &vals.len().to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("plot_wer_vs_model.csv"))?;
    w.write_record(MODEL_PLOT_HEADER)?;
    for ((method, fraction, d_model), vals) in
        group_by(results, |r| (r.spec.method.clone(), format!("{}", r.spec.fraction), r.spec.d_model))
    {
        let (mean, std) = mean_std(&vals);
        w.write_record([
            method.as_str(),
            fraction.as_str(),
            &d_model.to_string(),
            &format!("{mean:.6}"),
            &format!("{std:.6}"),
            &vals.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellSpec;

    fn cell(method: &str, fraction: f64, d_model: usize, data: usize, seed: u64, wer: f64) -> CellResult {
        CellResult {
            spec: CellSpec {
                method: method.into(),
                fraction,
                pretrain_chunk: "full".into(),
                finetune_chunk: "full".into(),
                conv: "standard".into(),
                d_model,
                steps: 100,
                data_size: data,
                seed,
            },
            hash: format!("h{seed}"),
            status: "done".into(),
            wer,
        }
    }

    #[test]
    fn empty_results_emit_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_plots_data(&[], dir.path()).unwrap();
        let data = std::fs::read_to_string(dir.path().join("plot_wer_vs_data.csv")).unwrap();
        assert_eq!(data.trim(), DATA_PLOT_HEADER.join(","));
        let model = std::fs::read_to_string(dir.path().join("plot_wer_vs_model.csv")).unwrap();
        assert_eq!(model.trim(), MODEL_PLOT_HEADER.join(","));
    }

    #[test]
    fn three_seeds_populate_std() {
        let dir = tempfile::tempdir().unwrap();
        let cells = vec![
            cell("scratch", 0.1, 32, 100, 0, 0.30),
            cell("scratch", 0.1, 32, 100, 1, 0.40),
            cell("scratch", 0.1, 32, 100, 2, 0.35),
        ];
        emit_plots_data(&cells, dir.path()).unwrap();
        let data = std::fs::read_to_string(dir.path().join("plot_wer_vs_data.csv")).unwrap();
        let row = data.lines().nth(1).unwrap();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], "scratch");
        assert_eq!(cols[5], "3");
        let std: f64 = cols[4].parse().unwrap();
        assert!(std > 0.0);
    }

    #[test]
    fn schema_matches_documented_headers_exactly() {
        // Golden header check: consumers key on these column names.
        let dir = tempfile::tempdir().unwrap();
        let cells = vec![cell("hubert_ctc", 1.0, 64, 400, 0, 0.05)];
        emit_plots_data(&cells, dir.path()).unwrap();
        let data = std::fs::read_to_string(dir.path().join("plot_wer_vs_data.csv")).unwrap();
        assert_eq!(data.lines().next().unwrap(), "method,fraction,data_size,wer_mean,wer_std,n");
        let model = std::fs::read_to_string(dir.path().join("plot_wer_vs_model.csv")).unwrap();
        assert_eq!(model.lines().next().unwrap(), "method,fraction,d_model,wer_mean,wer_std,n");
    }
}
