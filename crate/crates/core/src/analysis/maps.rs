use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};
use crate::vit::Activations;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Feature,
    Attention,
    Qkv,
}

/// A `G×G` per-patch scalar field in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct MapGrid {
    pub grid: usize,
    pub values: Vec<f64>,
    pub kind: MapKind,
    /// Block the values were read from.
    pub block: usize,
}

impl MapGrid {
    pub fn new(grid: usize, values: Vec<f64>, kind: MapKind, block: usize) -> Result<Self> {
        if values.len() != grid * grid || grid == 0 {
            return Err(Error::contract(format!("{} values for a {grid}x{grid} map", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("map values must be finite"));
        }
        if kind == MapKind::Attention && values.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("attention map values must be nonnegative"));
        }
        Ok(MapGrid { grid, values, kind, block })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(row, col)` of the largest cell.
    pub fn argmax(&self) -> (usize, usize) {
        let i = crate::vit::argmax(&self.values);
        (i / self.grid, i % self.grid)
    }
}

/// [CLS]-row attention split into the patch grid and the non-patch columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub map: MapGrid,
    pub cls: f64,
    pub registers: Vec<f64>,
}

impl AttentionMap {
    pub fn total(&self) -> f64 {
        self.map.sum() + self.cls + self.registers.iter().sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QkvSelect {
    Q,
    K,
    V,
    Out,
}

impl std::str::FromStr for QkvSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(QkvSelect::Q),
            "k" => Ok(QkvSelect::K),
            "v" => Ok(QkvSelect::V),
            "out" => Ok(QkvSelect::Out),
            other => Err(Error::Config(format!("unknown tensor `{other}`, expected q, k, v or out"))),
        }
    }
}

/// L2 norm of each row in `rows`.
pub fn row_norms(t: &Tensor, rows: Range<usize>) -> Vec<f64> {
    rows.map(|r| l2_norm(t.row(r))).collect()
}

pub fn feature_map(acts: &Activations) -> Result<MapGrid> {
    let layout = acts.layout;
    if acts.tokens.dims().first() != Some(&layout.seq_len()) {
        return Err(Error::MissingCapture("output tokens"));
    }
    let last = acts.blocks.len().saturating_sub(1);
    MapGrid::new(layout.grid, row_norms(&acts.tokens, layout.patch_rows()), MapKind::Feature, last)
}

fn final_attention(acts: &Activations) -> Result<&Tensor> {
    acts.attention.last().ok_or(Error::MissingCapture("attention"))
}

pub fn attention_map_cls(acts: &Activations) -> Result<AttentionMap> {
    let layout = acts.layout;
    if !layout.use_cls {
        return Err(Error::contract("a pooled-mode model has no [CLS] query row"));
    }
    let attn = final_attention(acts)?;
    let (h, s) = (attn.dims()[0], attn.dims()[1]);
    let mut row = vec![0.0; s];
    for head in 0..h {
        let base = head * s * s;
        for (acc, &a) in row.iter_mut().zip(&attn.data()[base..base + s]) {
            *acc += a;
        }
    }
    row.iter_mut().for_each(|v| *v /= h as f64);
    Ok(AttentionMap {
        map: MapGrid::new(
            layout.grid,
            row[layout.patch_rows()].to_vec(),
            MapKind::Attention,
            acts.attention.len() - 1,
        )?,
        cls: row[0],
        registers: row[layout.register_rows()].to_vec(),
    })
}

/// Mean over heads and all query rows of each column in `cols`, for an
/// `[H, S, S]` attention tensor.
pub fn pooled_attention(attn: &Tensor, cols: Range<usize>) -> Vec<f64> {
    let (h, s) = (attn.dims()[0], attn.dims()[1]);
    let mut out = vec![0.0; cols.len()];
    for row in attn.data().chunks_exact(s) {
        for (acc, &a) in out.iter_mut().zip(&row[cols.clone()]) {
            *acc += a;
        }
    }
    let n = (h * s) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn attention_map_pooled(acts: &Activations) -> Result<MapGrid> {
    let attn = final_attention(acts)?;
    let layout = acts.layout;
    MapGrid::new(
        layout.grid,
        pooled_attention(attn, layout.patch_rows()),
        MapKind::Attention,
        acts.attention.len() - 1,
    )
}

pub fn qkv_block_maps(acts: &Activations, block: usize, which: QkvSelect) -> Result<MapGrid> {
    if acts.blocks.is_empty() {
        return Err(Error::MissingCapture("per-block tensors"));
    }
    let b = acts.blocks.get(block).ok_or_else(|| {
        Error::contract(format!("block {block} out of range for {} blocks", acts.blocks.len()))
    })?;
    let t = match which {
        QkvSelect::Q => &b.q,
        QkvSelect::K => &b.k,
        QkvSelect::V => &b.v,
        QkvSelect::Out => &b.out,
    };
    let layout = acts.layout;
    MapGrid::new(layout.grid, row_norms(t, layout.patch_rows()), MapKind::Qkv, block)
}
