use std::io::{self, Write};

use crate::data::encode_pgm_bytes;
use crate::error::{Error, Result};

use super::maps::{MapGrid, MapKind};

/// Min–max scales the grid to `0..=255` (a constant grid renders as 128)
/// and upsamples to `out_px × out_px` by nearest neighbour. Returns PGM bytes.
pub fn render_map(grid: &MapGrid, out_px: usize) -> Result<Vec<u8>> {
    let g = grid.grid;
    if out_px < g {
        return Err(Error::contract(format!("output size {out_px} is smaller than the {g}x{g} grid")));
    }
    let lo = grid.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels: Vec<u8> = grid
        .values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    let mut px = Vec::with_capacity(out_px * out_px);
    for y in 0..out_px {
        let r = y * g / out_px;
        for x in 0..out_px {
            px.push(levels[r * g + x * g / out_px]);
        }
    }
    Ok(encode_pgm_bytes(out_px, out_px, &px))
}

/// One line per grid row, comma-separated.
pub fn map_to_csv(grid: &MapGrid) -> String {
    let mut s = String::new();
    for row in grid.values.chunks(grid.grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn map_from_csv(text: &str, kind: MapKind) -> Result<MapGrid> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number `{}`", i + 1, cell.trim())))?;
            values.push(v);
        }
        let w = values.len() - before;
        if *width.get_or_insert(w) != w {
            return Err(Error::Parse(format!("line {}: ragged row", i + 1)));
        }
        rows += 1;
    }
    if rows == 0 || values.len() != rows * rows {
        return Err(Error::Parse(format!("expected a square grid, got {} values in {rows} rows", values.len())));
    }
    MapGrid::new(rows, values, kind, 0)
}

/// One row of the per-token statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRecord {
    pub image_id: usize,
    pub token_idx: usize,
    pub norm: f64,
    pub is_outlier: bool,
    pub mean_neighbor_cos: Option<f64>,
}

pub const TOKEN_CSV_HEADER: &str = "image_id,token_idx,norm,is_outlier,mean_neighbor_cos";

/// Writes the header and records; a missing cosine is left empty.
pub fn write_token_csv<W: Write>(mut w: W, records: &[TokenRecord]) -> io::Result<()> {
    writeln!(w, "{TOKEN_CSV_HEADER}")?;
    for r in records {
        let cos = r.mean_neighbor_cos.map(|c| format!("{c}")).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.image_id, r.token_idx, r.norm, u8::from(r.is_outlier), cos)?;
    }
    Ok(())
}
