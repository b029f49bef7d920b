use super::dataset::{ProbeDataset, Targets};
use super::train::ProbeHead;
use super::{ProbeTask, TokenCategory};
use crate::analysis::{outlier_threshold, TokenStats};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};
use crate::vit::argmax;

/// `features · W + b` for every row.
pub(crate) fn predict(head: &ProbeHead, features: &Tensor) -> Result<Tensor> {
    let mut out = matmul(features, &head.weight)?;
    let w = head.output_width();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.iter_mut().zip(head.bias.data()).for_each(|(o, b)| *o += b);
    }
    Ok(out)
}

fn check_rows(data: &ProbeDataset) -> Result<()> {
    if data.is_empty() {
        Err(Error::contract("evaluation on an empty dataset"))
    } else {
        Ok(())
    }
}

/// Top-1 accuracy in `[0, 1]` for class or position targets.
pub fn top1(head: &ProbeHead, data: &ProbeDataset) -> Result<f64> {
    check_rows(data)?;
    let labels = data
        .targets
        .labels()
        .ok_or_else(|| Error::contract("top-1 is undefined for reconstruction targets"))?;
    let out = predict(head, &data.features)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(out.row(r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// The quantity early stopping watches for `data`'s task.
pub(crate) fn task_metric(head: &ProbeHead, data: &ProbeDataset) -> Result<f64> {
    match data.task {
        ProbeTask::Position | ProbeTask::Classification => top1(head, data),
        ProbeTask::Reconstruction => eval_reconstruction(head, data),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionMetrics {
    pub top1: f64,
    /// Mean Euclidean distance in grid cells between the argmax-decoded cell
    /// and the true one.
    pub mean_distance: f64,
}

fn cell(k: usize, g: usize) -> (f64, f64) {
    ((k / g) as f64, (k % g) as f64)
}

pub fn eval_position(head: &ProbeHead, data: &ProbeDataset) -> Result<PositionMetrics> {
    check_rows(data)?;
    let Targets::Position(y) = &data.targets else {
        return Err(Error::contract("position evaluation needs position targets"));
    };
    let g = data.grid;
    let out = predict(head, &data.features)?;
    let (mut hits, mut dist) = (0usize, 0.0);
    for (r, &t) in y.iter().enumerate() {
        let p = argmax(out.row(r));
        hits += usize::from(p == t);
        let ((pr, pc), (tr, tc)) = (cell(p, g), cell(t, g));
        dist += ((pr - tr).powi(2) + (pc - tc).powi(2)).sqrt();
    }
    let n = y.len() as f64;
    Ok(PositionMetrics {
        top1: hits as f64 / n,
        mean_distance: dist / n,
    })
}

/// Mean distance from the grid centroid to every cell: what a predictor that
/// always answers the centre achieves with uniform targets.
pub fn center_baseline(grid: usize) -> f64 {
    if grid == 0 {
        return 0.0;
    }
    let c = (grid as f64 - 1.0) / 2.0;
    let mut total = 0.0;
    for r in 0..grid {
        for col in 0..grid {
            total += ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
        }
    }
    total / (grid * grid) as f64
}

/// Mean over rows of `‖prediction − patch‖²`.
pub fn eval_reconstruction(head: &ProbeHead, data: &ProbeDataset) -> Result<f64> {
    check_rows(data)?;
    let Targets::Pixels(t) = &data.targets else {
        return Err(Error::contract("reconstruction evaluation needs pixel targets"));
    };
    let out = predict(head, &data.features)?;
    let total: f64 = out.data().iter().zip(t.data()).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(total / data.len() as f64)
}

/// Top-1 over the rows tagged `category`.
pub fn eval_classification(head: &ProbeHead, data: &ProbeDataset, category: TokenCategory) -> Result<f64> {
    top1(head, &data.restrict(category)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub percentile: f64,
    pub threshold: f64,
    pub outlier_rows: usize,
    /// `None` when no row clears the threshold.
    pub top1: Option<f64>,
}

/// Re-thresholds the pooled sample at each `q` and scores the patch rows
/// whose norm exceeds it. Output order follows `thresholds`.
pub fn percentile_sweep(
    head: &ProbeHead,
    data: &ProbeDataset,
    stats: &TokenStats,
    thresholds: &[f64],
) -> Result<Vec<SweepPoint>> {
    let patch_rows: Vec<usize> = (0..data.len()).filter(|&r| data.categories[r] != TokenCategory::Cls).collect();
    thresholds
        .iter()
        .map(|&q| {
            let (tau, _) = outlier_threshold(&stats.norms, q)?;
            let rows: Vec<usize> = patch_rows.iter().copied().filter(|&r| data.norms[r] > tau).collect();
            let top1 = if rows.is_empty() { None } else { Some(top1(head, &data.subset(&rows))?) };
            Ok(SweepPoint {
                percentile: q,
                threshold: tau,
                outlier_rows: rows.len(),
                top1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;

    fn position_data(g: usize, noise: u64) -> ProbeDataset {
        let n = g * g;
        let mut rng = ChaCha8Rng::seed_from_u64(noise);
        let mut x = vec![0.0; n * n];
        for k in 0..n {
            x[k * n + k] = 1.0;
        }
        ProbeDataset::new(
            ProbeTask::Position,
            Tensor::new(vec![n, n], x).unwrap(),
            Targets::Position((0..n).collect()),
            (0..n).map(|_| if rng.random::<f64>() < 0.5 { TokenCategory::Normal } else { TokenCategory::Outlier }).collect(),
            (0..n).map(|k| k as f64).collect(),
            vec![0; n],
            g,
            n,
        )
        .unwrap()
    }

    fn identity_head(n: usize) -> ProbeHead {
        ProbeHead { weight: Tensor::eye(n), bias: Tensor::zeros(&[n]) }
    }

    #[test]
    fn perfect_position_head() {
        let d = position_data(3, 1);
        let m = eval_position(&identity_head(9), &d).unwrap();
        assert_eq!(m, PositionMetrics { top1: 1.0, mean_distance: 0.0 });
    }

    #[test]
    fn center_baselines() {
        assert_eq!(center_baseline(1), 0.0);
        assert!((center_baseline(2) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((center_baseline(14) - 5.35).abs() < 0.02);
        assert!((center_baseline(37) - 14.15).abs() < 0.05);
    }

    #[test]
    fn fixed_corner_predictor_distance() {
        // distances from cell 0 to the four cells: 0, 1, 1, √2
        let d = position_data(2, 1);
        let head = ProbeHead { weight: Tensor::zeros(&[4, 4]), bias: Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap() };
        let m = eval_position(&head, &d).unwrap();
        assert!((m.mean_distance - (2.0 + 2f64.sqrt()) / 4.0).abs() < 1e-12);
        assert_eq!(m.top1, 0.25);
    }

    #[test]
    fn reconstruction_errors() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.5, 0.25, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let build = |t: Tensor| {
            ProbeDataset::new(ProbeTask::Reconstruction, x.clone(), Targets::Pixels(t), vec![TokenCategory::Normal; 2], vec![0.0; 2], vec![0, 0], 1, 0).unwrap()
        };
        let data = build(t.clone());
        let exact = ProbeHead { weight: t.clone(), bias: Tensor::zeros(&[3]) };
        assert_eq!(eval_reconstruction(&exact, &data).unwrap(), 0.0);
        let zero = ProbeHead::zeros(2, 3);
        let want = (0.25 + 0.0625 + 3.0) / 2.0;
        assert!((eval_reconstruction(&zero, &data).unwrap() - want).abs() < 1e-15);
        let doubled = build(Tensor::new(vec![2, 3], t.data().iter().map(|v| v * 2.0).collect()).unwrap());
        assert!((eval_reconstruction(&zero, &doubled).unwrap() - 4.0 * want).abs() < 1e-12);
    }

    #[test]
    fn classification_by_category() {
        let n = 30;
        let data = ProbeDataset::new(
            ProbeTask::Classification,
            Tensor::full(&[n, 2], 1.0),
            Targets::Class(vec![0; n]),
            (0..n).map(|i| if i % 2 == 0 { TokenCategory::Cls } else { TokenCategory::Normal }).collect(),
            vec![1.0; n],
            (0..n).collect(),
            1,
            3,
        )
        .unwrap();
        let head = ProbeHead { weight: Tensor::zeros(&[2, 3]), bias: Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap() };
        assert_eq!(eval_classification(&head, &data, TokenCategory::Cls).unwrap(), 1.0);
        assert!(matches!(eval_classification(&head, &data, TokenCategory::Outlier), Err(Error::EmptyCategory(_))));
    }

    #[test]
    fn sweep_keeps_order_and_limits() {
        let d = position_data(4, 2);
        let stats = TokenStats::from_norms(vec![0], 4, (0..16).map(|k| k as f64).collect(), 98.0, 8, false).unwrap();
        let head = identity_head(16);
        let pts = percentile_sweep(&head, &d, &stats, &[50.0, 98.0, 1e-9]).unwrap();
        assert_eq!(pts.iter().map(|p| p.percentile).collect::<Vec<_>>(), [50.0, 98.0, 1e-9]);
        assert_eq!(pts[0].outlier_rows, 8);
        assert_eq!(pts[1].outlier_rows, 1);
        assert_eq!(pts[2].outlier_rows, 15);
        assert_eq!(pts[2].top1, Some(1.0));
    }
}
