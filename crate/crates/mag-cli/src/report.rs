//! Human-readable run summaries: ablation- and comparison-shaped tables from
//! stored JSON, plus SVG line charts of metric streams.

use std::path::Path;

use mag_core::error::Result;
use mag_core::magbench::EvalReport;
use mag_core::memory::ReconstructionReport;
use mag_core::runcfg::{read_jsonl, Manifest};

pub fn render_report(out_dir: &Path) -> Result<()> {
    let manifest = Manifest::load(out_dir)?;
    println!("run {} (seed {})", manifest.config_hash, manifest.global_seed);
    println!("phases: {}\n", manifest.phases_run.join(", "));

    let mut warned = false;

    // Reconstruction-quality section (one row per evaluated block size).
    let mut recon: Vec<ReconstructionReport> = Vec::new();
    for (key, path) in &manifest.artifacts {
        if key.starts_with("reconstruction_report") {
            if let Ok(text) = std::fs::read_to_string(path) {
                if let Ok(r) = serde_json::from_str::<ReconstructionReport>(&text) {
                    recon.push(r);
                }
            }
        }
    }
    // Also pick up any reconstruction-b*.json alongside the manifest.
    if let Ok(entries) = std::fs::read_dir(out_dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            if name.contains("reconstruction-b") && name.ends_with(".json") {
                if let Ok(text) = std::fs::read_to_string(e.path()) {
                    if let Ok(r) = serde_json::from_str::<ReconstructionReport>(&text) {
                        if !recon.iter().any(|x| x.b == r.b) {
                            recon.push(r);
                        }
                    }
                }
            }
        }
    }
    if recon.is_empty() {
        println!("(no reconstruction reports yet)");
        warned = true;
    } else {
        recon.sort_by_key(|r| r.b);
        println!("reconstruction quality by compression rate:");
        println!("{:>8} {:>8} {:>8} {:>10} {:>8}", "block", "PSNR", "SSIM", "MSE x100", "clips");
        for r in &recon {
            println!(
                "{:>8} {:>8.2} {:>8.3} {:>10.3} {:>8}",
                r.b, r.psnr, r.ssim, r.mse_x100, r.n_clips
            );
        }
        println!();
    }

    // Historical-consistency section.
    if let Some(path) = manifest.artifacts.get("bench_report") {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(reports) = serde_json::from_str::<Vec<EvalReport>>(&text) {
                println!("historical consistency (best-match metrics):");
                println!(
                    "{:<28} {:>8} {:>8} {:>14}",
                    "conditioning", "PSNR", "SSIM", "best-match MSE"
                );
                for r in &reports {
                    println!(
                        "{:<28} {:>8.2} {:>8.3} {:>14.6}",
                        r.label, r.psnr, r.ssim, r.best_match_mse
                    );
                }
                println!();
            }
        }
    } else {
        println!("(no bench report yet)");
        warned = true;
    }

    // Loss curves as SVG.
    for (key, path) in &manifest.artifacts {
        if key.ends_with("_metrics") {
            let path = Path::new(path);
            if let Ok(records) = read_jsonl(path) {
                let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
                for r in &records {
                    series
                        .entry(r.loss_name.clone())
                        .or_default()
                        .push((r.step as f64, r.value));
                }
                for (name, points) in series {
                    let svg_path = out_dir.join(format!(
                        "{}-{}.svg",
                        path.file_stem().unwrap_or_default().to_string_lossy(),
                        name
                    ));
                    std::fs::write(&svg_path, line_chart_svg(&name, &points))?;
                    println!("chart: {}", svg_path.display());
                }
            }
        }
    }
    if warned {
        println!("\nwarning: report is partial; run the remaining phases for a full summary");
    }
    Ok(())
}

/// Minimal polyline chart, 640x360 with axes and the series name.
pub fn line_chart_svg(name: &str, points: &[(f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    if points.is_empty() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"/>");
    }
    let xmin = points.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let xmax = points.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let ymin = points.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let ymax = points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let xr = (xmax - xmin).max(1e-9);
    let yr = (ymax - ymin).max(1e-9);
    let mut path = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let px = pad + (x - xmin) / xr * (w - 2.0 * pad);
        let py = h - pad - (y - ymin) / yr * (h - 2.0 * pad);
        path.push_str(&format!("{}{px:.1},{py:.1} ", if i == 0 { "M" } else { "L" }));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>",
            "<line x1=\"{pad}\" y1=\"{yaxis}\" x2=\"{xend}\" y2=\"{yaxis}\" stroke=\"#888\"/>",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yaxis}\" stroke=\"#888\"/>",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#1668dc\" stroke-width=\"1.5\"/>",
            "<text x=\"{pad}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{name} (min {ymin:.4}, max {ymax:.4})</text>",
            "</svg>"
        ),
        w = w,
        h = h,
        pad = pad,
        yaxis = h - pad,
        xend = w - pad,
        path = path,
        name = name,
        ymin = ymin,
        ymax = ymax,
    )
}
