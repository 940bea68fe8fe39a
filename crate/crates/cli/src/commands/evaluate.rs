//! `eval` and `det`.

use std::path::Path;

use anyhow::Result;
use svkit_core::metrics::{compute_eer, compute_min_dcf, det_points, read_scores, DcfParams};

/// Print the `Model | %EER | DCF(0.01) | DCF(0.001)` table row for one
/// score file.
pub fn eval(scores_path: &Path, name: Option<&str>) -> Result<()> {
    let scores = read_scores(scores_path)?;
    let eer = compute_eer(&scores)?;
    let dcf01 = compute_min_dcf(&scores, &DcfParams::at(0.01))?;
    let dcf001 = compute_min_dcf(&scores, &DcfParams::at(0.001))?;
    let model = name.map(str::to_string).unwrap_or_else(|| {
        scores_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "scores".to_string())
    });
    println!("Model | %EER | DCF(0.01) | DCF(0.001)");
    println!("{model} | {:.2} | {dcf01:.4} | {dcf001:.4}", eer * 100.0);
    Ok(())
}

/// Write DET operating points (`fa miss fa_probit miss_probit` per line).
pub fn det(scores_path: &Path, out: &Path) -> Result<()> {
    let scores = read_scores(scores_path)?;
    let curve = det_points(&scores)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    curve.write_text(out)?;
    eprintln!(
        "det: {} operating points -> {}",
        curve.points().len(),
        out.display()
    );
    Ok(())
}
