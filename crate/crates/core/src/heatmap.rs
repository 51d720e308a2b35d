//! Per-region heat degrees from attention weights.

use crate::reasoning::AttentionTrace;

/// Pixels per region side in the grayscale image.
const BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// Min-max normalized region means, in `[0, 1]`.
    pub heats: Vec<f64>,
    /// `(rows, cols)`; square when the region count is a perfect square, a single row otherwise.
    pub grid: (usize, usize),
}

pub fn export_heatmap(trace: &AttentionTrace) -> HeatMap {
    heat_from_means(&trace.region_means)
}

/// Min-max normalizes `means`; all-equal input maps to all zeros.
pub fn heat_from_means(means: &[f64]) -> HeatMap {
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let heats = means
        .iter()
        .map(|m| if span > 0.0 { ((m - min) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    HeatMap {
        heats,
        grid: grid_for(means.len()),
    }
}

fn grid_for(k: usize) -> (usize, usize) {
    let side = (k as f64).sqrt().round() as usize;
    if side * side == k {
        (side, side)
    } else {
        (1, k)
    }
}

impl HeatMap {
    /// Whitespace-separated grid of heats, one grid row per line.
    pub fn to_grid_text(&self) -> String {
        let (rows, cols) = self.grid;
        let mut out = String::new();
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| format!("{:.6}", self.heats[r * cols + c])).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Binary PGM, one `BLOCK × BLOCK` square per region; brighter is hotter.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (rows, cols) = self.grid;
        let (w, h) = (cols * BLOCK, rows * BLOCK);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let heat = self.heats[(y / BLOCK) * cols + x / BLOCK];
                out.push((heat * 255.0).round() as u8);
            }
        }
        out
    }
}
