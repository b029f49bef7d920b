use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CosineDiagnostics {
    /// Neighbour pairs involving a zero vector; their cosine is taken as 0.
    pub zero_pairs: usize,
    /// Tokens left out because they sit on the border.
    pub excluded_edges: usize,
}

/// Per-token mean cosine with the existing 4-neighbours, `None` for
/// excluded border tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborCosine {
    pub grid: usize,
    pub values: Vec<Option<f64>>,
    pub diagnostics: CosineDiagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            n: values.len(),
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Mean-neighbour cosine values split by outlier mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CosineSplit {
    pub outlier: Vec<f64>,
    pub normal: Vec<f64>,
    pub diagnostics: CosineDiagnostics,
}

impl CosineSplit {
    pub fn extend(&mut self, other: CosineSplit) {
        self.outlier.extend(other.outlier);
        self.normal.extend(other.normal);
        self.diagnostics.zero_pairs += other.diagnostics.zero_pairs;
        self.diagnostics.excluded_edges += other.diagnostics.excluded_edges;
    }

    pub fn outlier_summary(&self) -> Option<Summary> {
        Summary::of(&self.outlier)
    }

    pub fn normal_summary(&self) -> Option<Summary> {
        Summary::of(&self.normal)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// `embeddings` is `[G, G, D]`.
pub fn mean_neighbor_cosine(embeddings: &Tensor, exclude_edges: bool) -> Result<NeighborCosine> {
    let dims = embeddings.dims();
    if dims.len() != 3 || dims[0] != dims[1] {
        return Err(Error::Shape {
            op: "neighbor_cosine",
            lhs: dims.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let (g, d) = (dims[0], dims[2]);
    if g < 2 {
        return Err(Error::contract("neighbor cosine needs a grid of at least 2x2"));
    }
    let at = |r: usize, c: usize| &embeddings.data()[(r * g + c) * d..(r * g + c + 1) * d];
    let mut diagnostics = CosineDiagnostics::default();
    let mut values = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            let border = r == 0 || c == 0 || r == g - 1 || c == g - 1;
            if exclude_edges && border {
                diagnostics.excluded_edges += 1;
                values.push(None);
                continue;
            }
            let mut neighbours = Vec::with_capacity(4);
            if r > 0 {
                neighbours.push((r - 1, c));
            }
            if r + 1 < g {
                neighbours.push((r + 1, c));
            }
            if c > 0 {
                neighbours.push((r, c - 1));
            }
            if c + 1 < g {
                neighbours.push((r, c + 1));
            }
            let mut sum = 0.0;
            for &(nr, nc) in &neighbours {
                match cosine(at(r, c), at(nr, nc)) {
                    Some(v) => sum += v,
                    None => diagnostics.zero_pairs += 1,
                }
            }
            values.push(Some(sum / neighbours.len() as f64));
        }
    }
    Ok(NeighborCosine { grid: g, values, diagnostics })
}

pub fn neighbor_cosine(embeddings: &Tensor, mask: &[bool], exclude_edges: bool) -> Result<CosineSplit> {
    let nc = mean_neighbor_cosine(embeddings, exclude_edges)?;
    if mask.len() != nc.values.len() {
        return Err(Error::contract(format!("mask of {} for {} tokens", mask.len(), nc.values.len())));
    }
    let mut split = CosineSplit {
        diagnostics: nc.diagnostics,
        ..CosineSplit::default()
    };
    for (v, &m) in nc.values.iter().zip(mask) {
        if let Some(v) = *v {
            if m {
                split.outlier.push(v);
            } else {
                split.normal.push(v);
            }
        }
    }
    Ok(split)
}

/// Patches of a `side×side` pixel mask that lie entirely in the background.
pub fn background_patches(pixel_mask: &[bool], side: usize, patch: usize) -> Result<Vec<bool>> {
    if pixel_mask.len() != side * side || patch == 0 || side % patch != 0 {
        return Err(Error::contract("background mask does not tile into patches"));
    }
    let g = side / patch;
    let mut out = Vec::with_capacity(g * g);
    for gr in 0..g {
        for gc in 0..g {
            let all = (0..patch).all(|dr| (0..patch).all(|dc| pixel_mask[(gr * patch + dr) * side + gc * patch + dc]));
            out.push(all);
        }
    }
    Ok(out)
}
