use crate::checkpoint::TensorArchive;
use crate::data::{subsample_indices, Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ForwardOptions, ViTModel};

use super::maps::row_norms;
use super::AnalysisConfig;

/// Linear-interpolation percentile of an ascending sample: rank
/// `q/100 · (n − 1)` between the two neighbouring order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::contract("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::contract(format!("percentile {q} outside [0, 100]")));
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 100.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("outlier percentile {q} must lie in (0, 100)")))
    }
}

/// Threshold `τ` at percentile `q` and the mask `norm > τ`.
pub fn outlier_threshold(norms: &[f64], q: f64) -> Result<(f64, Vec<bool>)> {
    check_q(q)?;
    if norms.is_empty() {
        return Err(Error::contract("outlier threshold of an empty sample"));
    }
    if norms.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("norm sample contains NaN"));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = percentile(&sorted, q)?;
    Ok((tau, norms.iter().map(|&v| v > tau).collect()))
}

/// Fixed-width histogram over the sample's own range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::contract("histogram needs values and at least one bin"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Pre-final-LN patch-token norms over a sample of images, with the pooled
/// outlier threshold. Norms are stored image-major, `grid²` per image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStats {
    /// Dataset indices of the sampled images, ascending.
    pub image_ids: Vec<usize>,
    pub grid: usize,
    pub norms: Vec<f64>,
    pub percentile: f64,
    /// Pooled threshold `τ`.
    pub threshold: f64,
    pub masks: Vec<bool>,
    /// Per-image thresholds when the masks were computed per image.
    pub image_thresholds: Option<Vec<f64>>,
    pub histogram: Histogram,
}

impl TokenStats {
    pub fn from_norms(
        image_ids: Vec<usize>,
        grid: usize,
        norms: Vec<f64>,
        q: f64,
        bins: usize,
        per_image: bool,
    ) -> Result<Self> {
        let n = grid * grid;
        if n == 0 || norms.len() != image_ids.len() * n {
            return Err(Error::contract(format!(
                "{} norms for {} images of {n} tokens",
                norms.len(),
                image_ids.len()
            )));
        }
        let (threshold, pooled) = outlier_threshold(&norms, q)?;
        let (masks, image_thresholds) = if per_image {
            let mut masks = Vec::with_capacity(norms.len());
            let mut taus = Vec::with_capacity(image_ids.len());
            for chunk in norms.chunks(n) {
                let (t, m) = outlier_threshold(chunk, q)?;
                taus.push(t);
                masks.extend(m);
            }
            (masks, Some(taus))
        } else {
            (pooled, None)
        };
        Ok(TokenStats {
            image_ids,
            grid,
            histogram: histogram(&norms, bins)?,
            norms,
            percentile: q,
            threshold,
            masks,
            image_thresholds,
        })
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid * self.grid
    }

    /// Slot of `image_id` in the sample.
    pub fn position(&self, image_id: usize) -> Option<usize> {
        self.image_ids.binary_search(&image_id).ok()
    }

    pub fn image_norms(&self, slot: usize) -> &[f64] {
        let n = self.tokens_per_image();
        &self.norms[slot * n..(slot + 1) * n]
    }

    pub fn image_mask(&self, slot: usize) -> &[bool] {
        let n = self.tokens_per_image();
        &self.masks[slot * n..(slot + 1) * n]
    }

    /// Outlier mask for an image outside the sample, using this model's
    /// threshold (or the image's own percentile in per-image mode).
    pub fn classify(&self, norms: &[f64]) -> Result<Vec<bool>> {
        if self.image_thresholds.is_some() {
            Ok(outlier_threshold(norms, self.percentile)?.1)
        } else {
            Ok(norms.iter().map(|&v| v > self.threshold).collect())
        }
    }

    pub fn outlier_count(&self) -> usize {
        self.masks.iter().filter(|&&m| m).count()
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.outlier_count() as f64 / self.masks.len() as f64
    }

    /// Same sample, re-thresholded at `q`.
    pub fn with_percentile(&self, q: f64) -> Result<TokenStats> {
        TokenStats::from_norms(
            self.image_ids.clone(),
            self.grid,
            self.norms.clone(),
            q,
            self.histogram.counts.len(),
            self.image_thresholds.is_some(),
        )
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let ids = self.image_ids.iter().map(|&i| i as f64).collect::<Vec<_>>();
        let scalars = [
            ("grid", self.grid as f64),
            ("percentile", self.percentile),
            ("histogram_bins", self.histogram.counts.len() as f64),
            ("per_image", f64::from(u8::from(self.image_thresholds.is_some()))),
        ];
        for (name, v) in scalars {
            a.push_tensor(name, &Tensor::scalar(v)).expect("unique");
        }
        a.push_tensor("image_ids", &Tensor::new(vec![ids.len()], ids).expect("1-d"))
            .expect("unique");
        a.push_tensor("norms", &Tensor::new(vec![self.norms.len()], self.norms.clone()).expect("1-d"))
            .expect("unique");
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            let t = a.tensor(name)?;
            t.data()
                .first()
                .copied()
                .filter(|_| t.numel() == 1)
                .ok_or_else(|| Error::Parse(format!("`{name}` is not a scalar")))
        };
        let count = |name: &str| -> Result<usize> {
            let v = scalar(name)?;
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("`{name}` is not a count: {v}")))
            }
        };
        let ids = a
            .tensor("image_ids")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Parse(format!("bad image id {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse("image ids must be strictly ascending".into()));
        }
        TokenStats::from_norms(
            ids,
            count("grid")?,
            a.tensor("norms")?.data().to_vec(),
            scalar("percentile")?,
            count("histogram_bins")?,
            scalar("per_image")? != 0.0,
        )
    }
}

/// Norms of the output patch tokens before the final LayerNorm.
pub fn token_norms(model: &ViTModel, image: &Tensor) -> Result<Vec<f64>> {
    let acts = model.forward(image, ForwardOptions::default())?;
    Ok(row_norms(&acts.tokens, acts.layout.patch_rows()))
}

/// Pooled per-model norm statistics on a seeded subsample of
/// `min(sample_n, |dataset|)` images.
pub fn norm_distribution(
    model: &ViTModel,
    dataset: &Dataset,
    preprocess: &Preprocess,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<TokenStats> {
    if dataset.is_empty() {
        return Err(Error::contract("norm distribution of an empty dataset"));
    }
    let mut ids = subsample_indices(dataset.len(), cfg.sample_n, seed);
    ids.sort_unstable();
    let side = model.config.image_size;
    let mut norms = Vec::with_capacity(ids.len() * model.config.num_patches());
    for &i in &ids {
        let x = preprocess.apply(&dataset.image(i)?, side)?;
        norms.extend(token_norms(model, &x)?);
    }
    TokenStats::from_norms(ids, model.config.grid(), norms, cfg.percentile, cfg.histogram_bins, cfg.per_image)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bimodality {
    pub coefficient: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub bimodal: bool,
}

/// Threshold above which a sample counts as bimodal; the value a uniform
/// distribution attains.
pub const BIMODAL_THRESHOLD: f64 = 5.0 / 9.0;

/// Sarle's bimodality coefficient from bias-corrected sample skewness and
/// excess kurtosis.
pub fn bimodality_coefficient(x: &[f64]) -> Result<Bimodality> {
    let n = x.len();
    if n < 4 {
        return Err(Error::contract(format!("bimodality needs at least 4 values, got {n}")));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if !(m2 > 0.0) {
        return Err(Error::contract("bimodality of a constant sample"));
    }
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    let skewness = (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1;
    let excess_kurtosis = (nf - 1.0) / ((nf - 2.0) * (nf - 3.0)) * ((nf + 1.0) * g2 + 6.0);
    let correction = 3.0 * (nf - 1.0).powi(2) / ((nf - 2.0) * (nf - 3.0));
    let coefficient = (skewness * skewness + 1.0) / (excess_kurtosis + correction);
    Ok(Bimodality {
        coefficient,
        skewness,
        excess_kurtosis,
        bimodal: coefficient > BIMODAL_THRESHOLD,
    })
}
