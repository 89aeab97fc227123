use std::fmt::Write as _;

use crate::correspondence::Grid;
use crate::trainer::EvalReport;

/// Min-max scales `values` to 0..=255. A constant map becomes mid-gray 128.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&x| ((x - lo) / range * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(grid: Grid, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), grid.tokens(), "one pixel per cell");
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub const CSV_HEADER: &str = "sample,slot,u,v,attention_mass";

pub fn masses_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in report.pairs() {
        let _ = writeln!(out, "{},{},{},{},{}", p.sample, p.slot, p.u, p.v, p.mass);
    }
    out
}
