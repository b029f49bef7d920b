use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ProbeTask, TokenCategory};
use crate::analysis::{row_norms, TokenStats};
use crate::checkpoint::TensorArchive;
use crate::data::{resize_bilinear, Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};
use crate::vit::{patchify, pooled_representation, Activations, ForwardOptions, ViTModel};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Class(Vec<usize>),
    /// Row-major cell index `row · G + col`.
    Position(Vec<usize>),
    /// Flattened RGB patch in `[0, 1]`, `[rows, P²·3]`.
    Pixels(Tensor),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Class(v) | Targets::Position(v) => v.len(),
            Targets::Pixels(t) => t.dims()[0],
        }
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Class(v) => Targets::Class(rows.iter().map(|&r| v[r]).collect()),
            Targets::Position(v) => Targets::Position(rows.iter().map(|&r| v[r]).collect()),
            Targets::Pixels(t) => {
                let w = t.dims()[1];
                let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
                Targets::Pixels(Tensor::new(vec![rows.len(), w], data).expect("row subset"))
            }
        }
    }

    /// Class indices for the classification-style targets.
    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Class(v) | Targets::Position(v) => Some(v),
            Targets::Pixels(_) => None,
        }
    }
}

/// Frozen features and targets for one probe task.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub task: ProbeTask,
    /// `[rows, width]`.
    pub features: Tensor,
    pub targets: Targets,
    pub categories: Vec<TokenCategory>,
    /// Pre-final-LN norm of the token behind each row.
    pub norms: Vec<f64>,
    pub image_ids: Vec<usize>,
    pub grid: usize,
    /// Output width for class and position targets.
    pub num_classes: usize,
}

impl ProbeDataset {
    pub fn new(
        task: ProbeTask,
        features: Tensor,
        targets: Targets,
        categories: Vec<TokenCategory>,
        norms: Vec<f64>,
        image_ids: Vec<usize>,
        grid: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = ProbeDataset {
            task,
            features,
            targets,
            categories,
            norms,
            image_ids,
            grid,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (rows, _) = self.features.matrix_dims()?;
        let lens = [self.targets.len(), self.categories.len(), self.norms.len(), self.image_ids.len()];
        if lens.iter().any(|&l| l != rows) {
            return Err(Error::contract(format!("probe dataset columns disagree: {rows} rows vs {lens:?}")));
        }
        let ok = match (&self.targets, self.task) {
            (Targets::Class(v), ProbeTask::Classification) => v.iter().all(|&y| y < self.num_classes),
            (Targets::Position(v), ProbeTask::Position) => {
                self.num_classes == self.grid * self.grid && v.iter().all(|&y| y < self.num_classes)
            }
            (Targets::Pixels(t), ProbeTask::Reconstruction) => t.dims().len() == 2,
            _ => false,
        };
        if !ok {
            return Err(Error::contract(format!("targets out of range for the {} task", self.task)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn output_width(&self) -> usize {
        match &self.targets {
            Targets::Pixels(t) => t.dims()[1],
            _ => self.num_classes,
        }
    }

    /// Rows at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> ProbeDataset {
        let w = self.width();
        let data = rows.iter().flat_map(|&r| self.features.row(r).iter().copied()).collect();
        ProbeDataset {
            task: self.task,
            features: Tensor::new(vec![rows.len(), w], data).expect("row subset"),
            targets: self.targets.select(rows),
            categories: rows.iter().map(|&r| self.categories[r]).collect(),
            norms: rows.iter().map(|&r| self.norms[r]).collect(),
            image_ids: rows.iter().map(|&r| self.image_ids[r]).collect(),
            grid: self.grid,
            num_classes: self.num_classes,
        }
    }

    pub fn rows_of(&self, category: TokenCategory) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.categories[r] == category).collect()
    }

    /// Only the rows tagged `category`; an empty slice is an error.
    pub fn restrict(&self, category: TokenCategory) -> Result<ProbeDataset> {
        let rows = self.rows_of(category);
        if rows.is_empty() {
            return Err(Error::EmptyCategory(category.as_str()));
        }
        Ok(self.subset(&rows))
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let vec1 = |v: Vec<f64>| Tensor::new(vec![v.len()], v).expect("1-d");
        a.push_text("task", self.task.as_str()).expect("unique");
        a.push_tensor("features", &self.features).expect("unique");
        let targets = match &self.targets {
            Targets::Class(v) | Targets::Position(v) => vec1(v.iter().map(|&y| y as f64).collect()),
            Targets::Pixels(t) => t.clone(),
        };
        a.push_tensor("targets", &targets).expect("unique");
        a.push_tensor("categories", &vec1(self.categories.iter().map(|c| c.code()).collect()))
            .expect("unique");
        a.push_tensor("norms", &vec1(self.norms.clone())).expect("unique");
        a.push_tensor("image_ids", &vec1(self.image_ids.iter().map(|&i| i as f64).collect()))
            .expect("unique");
        a.push_tensor("grid", &Tensor::scalar(self.grid as f64)).expect("unique");
        a.push_tensor("num_classes", &Tensor::scalar(self.num_classes as f64)).expect("unique");
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let task: ProbeTask = a.text("task")?.parse()?;
        let counts = |name: &str| -> Result<Vec<usize>> {
            a.tensor(name)?
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Parse(format!("`{name}` holds non-integer {v}")))
                    }
                })
                .collect()
        };
        let scalar = |name: &str| -> Result<usize> {
            match counts(name)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(Error::Parse(format!("`{name}` is not a scalar"))),
            }
        };
        let targets = match task {
            ProbeTask::Classification => Targets::Class(counts("targets")?),
            ProbeTask::Position => Targets::Position(counts("targets")?),
            ProbeTask::Reconstruction => Targets::Pixels(a.tensor("targets")?.clone()),
        };
        let categories = a
            .tensor("categories")?
            .data()
            .iter()
            .map(|&v| TokenCategory::from_code(v).ok_or_else(|| Error::Parse(format!("bad category code {v}"))))
            .collect::<Result<_>>()?;
        ProbeDataset::new(
            task,
            a.tensor("features")?.clone(),
            targets,
            categories,
            a.tensor("norms")?.data().to_vec(),
            counts("image_ids")?,
            scalar("grid")?,
            scalar("num_classes")?,
        )
    }
}

/// [CLS] output, or the pooled patch mean for a model without [CLS].
fn cls_row(acts: &Activations) -> Vec<f64> {
    match acts.cls_output() {
        Some(c) => c.to_vec(),
        None => pooled_representation(acts),
    }
}

/// Tokens of `model` over every image of `dataset`, labelled by the
/// outlier threshold in `stats`. Position and reconstruction use every
/// patch token; classification takes one [CLS], one random normal and one
/// random outlier row per image when such tokens exist.
pub fn extract_probe_dataset(
    model: &ViTModel,
    dataset: &Dataset,
    preprocess: &Preprocess,
    task: ProbeTask,
    stats: &TokenStats,
    seed: u64,
) -> Result<ProbeDataset> {
    let cfg = &model.config;
    if stats.grid != cfg.grid() {
        return Err(Error::contract(format!(
            "statistics were computed on a {}x{} grid but the model has {}x{}",
            stats.grid,
            stats.grid,
            cfg.grid(),
            cfg.grid()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::contract("probe extraction from an empty dataset"));
    }
    let side = cfg.image_size;
    let n = cfg.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut categories = Vec::new();
    let mut norms = Vec::new();
    let mut image_ids = Vec::new();
    let mut labels = Vec::new();
    let mut pixels = Vec::new();

    for i in 0..dataset.len() {
        let image = dataset.image(i)?;
        let acts = model.forward(&preprocess.apply(&image, side)?, ForwardOptions::default())?;
        let token_norms = row_norms(&acts.tokens, acts.layout.patch_rows());
        let mask = stats.classify(&token_norms)?;
        let patch_row = |k: usize| acts.tokens.row(acts.layout.patch_offset() + k);
        let tag = |k: usize| if mask[k] { TokenCategory::Outlier } else { TokenCategory::Normal };
        match task {
            ProbeTask::Position | ProbeTask::Reconstruction => {
                let patches = if task == ProbeTask::Reconstruction {
                    let sized = if image.height() == side && image.width() == side {
                        image.clone()
                    } else {
                        resize_bilinear(&image, side, side)?
                    };
                    Some(patchify(&sized.to_tensor(), cfg.patch_size)?)
                } else {
                    None
                };
                for k in 0..n {
                    features.extend_from_slice(patch_row(k));
                    categories.push(tag(k));
                    norms.push(token_norms[k]);
                    image_ids.push(i);
                    labels.push(k);
                    if let Some(p) = &patches {
                        pixels.extend_from_slice(p.row(k));
                    }
                }
            }
            ProbeTask::Classification => {
                let cls = cls_row(&acts);
                norms.push(l2_norm(&cls));
                features.extend(cls);
                categories.push(TokenCategory::Cls);
                image_ids.push(i);
                labels.push(dataset.label(i));
                for want in [false, true] {
                    let pool: Vec<usize> = (0..n).filter(|&k| mask[k] == want).collect();
                    if pool.is_empty() {
                        continue;
                    }
                    let k = pool[rng.random_range(0..pool.len())];
                    features.extend_from_slice(patch_row(k));
                    categories.push(tag(k));
                    norms.push(token_norms[k]);
                    image_ids.push(i);
                    labels.push(dataset.label(i));
                }
            }
        }
    }

    let rows = categories.len();
    let features = Tensor::new(vec![rows, cfg.embed_dim], features)?;
    let (targets, num_classes) = match task {
        ProbeTask::Position => (Targets::Position(labels), n),
        ProbeTask::Reconstruction => {
            let w = cfg.patch_dim();
            (Targets::Pixels(Tensor::new(vec![rows, w], pixels)?), 0)
        }
        ProbeTask::Classification => (Targets::Class(labels), dataset.num_classes),
    };
    ProbeDataset::new(task, features, targets, categories, norms, image_ids, cfg.grid(), num_classes)
}

/// Image representations built from [CLS], the patch mean and registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprKind {
    ClsPm,
    ClsPmReg,
    PmReg,
}

impl ReprKind {
    pub const ALL: [ReprKind; 3] = [ReprKind::ClsPm, ReprKind::ClsPmReg, ReprKind::PmReg];

    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::ClsPm => "cls+pm",
            ReprKind::ClsPmReg => "cls+pm+reg",
            ReprKind::PmReg => "pm+reg",
        }
    }

    pub fn uses_registers(self) -> bool {
        self != ReprKind::ClsPm
    }

    /// Width for embedding size `d` and `r` registers.
    pub fn width(self, d: usize, r: usize) -> usize {
        match self {
            ReprKind::ClsPm => 2 * d,
            ReprKind::ClsPmReg => (2 + r) * d,
            ReprKind::PmReg => (1 + r) * d,
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReprKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown representation `{s}`, expected cls+pm, cls+pm+reg or pm+reg")))
    }
}

/// Concatenation in the order the kind names its parts.
pub fn build_representation(acts: &Activations, kind: ReprKind) -> Result<Vec<f64>> {
    let regs = acts.register_outputs();
    if kind.uses_registers() && regs.is_empty() {
        return Err(Error::contract(format!("{kind} needs a model with registers")));
    }
    let pm = pooled_representation(acts);
    let mut out = Vec::with_capacity(kind.width(pm.len(), regs.len()));
    if kind != ReprKind::PmReg {
        out.extend(cls_row(acts));
    }
    out.extend(pm);
    if kind.uses_registers() {
        for r in regs {
            out.extend_from_slice(r);
        }
    }
    Ok(out)
}

/// One representation row per image, labelled by its class.
pub fn extract_representation_dataset(
    model: &ViTModel,
    dataset: &Dataset,
    preprocess: &Preprocess,
    kind: ReprKind,
) -> Result<ProbeDataset> {
    if dataset.is_empty() {
        return Err(Error::contract("representation extraction from an empty dataset"));
    }
    let cfg = &model.config;
    let width = kind.width(cfg.embed_dim, cfg.num_registers);
    let mut features = Vec::with_capacity(dataset.len() * width);
    let mut norms = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let x = preprocess.apply(&dataset.image(i)?, cfg.image_size)?;
        let acts = model.forward(&x, ForwardOptions::default())?;
        let rep = build_representation(&acts, kind)?;
        norms.push(l2_norm(&rep));
        features.extend(rep);
    }
    let rows = dataset.len();
    ProbeDataset::new(
        ProbeTask::Classification,
        Tensor::new(vec![rows, width], features)?,
        Targets::Class((0..rows).map(|i| dataset.label(i)).collect()),
        vec![TokenCategory::Cls; rows],
        norms,
        (0..rows).collect(),
        cfg.grid(),
        dataset.num_classes,
    )
}
