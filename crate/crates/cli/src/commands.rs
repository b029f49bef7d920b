//! Subcommand bodies. Each one resolves its configuration, does the work
//! through the library and leaves a run manifest next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vitlab::analysis::{
    attention_map_cls, attention_map_pooled, bimodality_coefficient, feature_map, map_from_csv,
    map_to_csv, mean_neighbor_cosine, neighbor_cosine, norm_distribution, outlier_threshold,
    qkv_block_maps, render_map, write_token_csv, CosineSplit, MapGrid, MapKind, QkvSelect, Summary,
    TokenRecord, TokenStats,
};
use vitlab::carbon::{carbon_estimate, CarbonParams};
use vitlab::checkpoint::{load_archive, load_model, model_to_archive, RunConfig, TensorArchive};
use vitlab::data::{decode_ppm, load_manifest, make_synthetic, Dataset, Split};
use vitlab::probe::{
    center_baseline, eval_position, eval_reconstruction, extract_probe_dataset,
    extract_representation_dataset, percentile_sweep, top1, train_linear_probe,
    train_probe_with_validation, write_metrics_csv, EpochRecord, ProbeDataset, ProbeHead, ProbeTask,
    ReprKind, TokenCategory, TrainConfig,
};
use vitlab::vit::{train_classifier, Activations, Capture, ViTModel};
use vitlab::Tensor;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{Command, Common, DataArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainToy { common, data, val_manifest, registers, pooled, epochs, out } => {
            train_toy(&common, &data, val_manifest.as_deref(), registers, pooled, epochs, &out)
        }
        Command::AnalyzeMaps { common, model, image, stats, resolution, px, blocks, out } => {
            analyze_maps(&common, &model, &image, stats.as_deref(), resolution, px, blocks, &out)
        }
        Command::Norms { common, data, model, sample_n, percentile, per_image, out } => {
            norms(&common, &data, &model, sample_n, percentile, per_image, &out)
        }
        Command::Cosine { common, data, model, stats, exclude_edges, out } => {
            cosine(&common, &data, &model, &stats, exclude_edges, &out)
        }
        Command::ProbeExtract { common, data, model, stats, task, out } => {
            probe_extract(&common, &data, &model, &stats, &task, &out)
        }
        Command::ProbeTrain { common, data, max_epochs, out } => probe_train(&common, &data, max_epochs, &out),
        Command::ProbeEval { common, data, head, out } => probe_eval(&common, &data, &head, &out),
        Command::Sweep { common, data, head, stats, percentiles, out } => {
            sweep(&common, &data, &head, &stats, &percentiles, &out)
        }
        Command::ReprTrain { common, data, val_manifest, model, kind, out } => {
            repr_train(&common, &data, val_manifest.as_deref(), &model, &kind, &out)
        }
        Command::Render { common, grid, px, out } => render(&common, &grid, px, &out),
        Command::Carbon { common, ci, pue, power, hours, out } => carbon(&common, ci, pue, power, hours, out.as_deref()),
    }
}

/// `<file>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn start(subcommand: &'static str, common: &Common) -> Result<RunManifest> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let seed = config.seed;
    let mut m = RunManifest::new(subcommand, config, seed);
    if let Some(p) = &common.config {
        m.input(p);
    }
    Ok(m)
}

fn load_split(m: &mut RunManifest, manifest: Option<&Path>, split: Split) -> Result<Dataset> {
    let manifest = manifest.map(Path::to_path_buf).or_else(|| m.config.data.manifest.clone());
    match manifest {
        Some(p) => {
            m.input(&p);
            Ok(load_manifest(&p)?)
        }
        None => Ok(make_synthetic(&m.config.data.synthetic(split, m.seed))?),
    }
}

fn read_model(m: &mut RunManifest, path: &Path) -> Result<ViTModel> {
    m.input(path);
    Ok(load_model(path)?)
}

fn read_archive(m: &mut RunManifest, path: &Path) -> Result<TensorArchive> {
    m.input(path);
    Ok(load_archive(path)?)
}

fn tensors(ds: &Dataset, m: &RunManifest, side: usize) -> Result<Vec<(Tensor, usize)>> {
    (0..ds.len())
        .map(|i| Ok((m.config.data.preprocess.apply(&ds.image(i)?, side)?, ds.label(i))))
        .collect()
}

fn train_toy(
    common: &Common,
    data: &DataArgs,
    val_manifest: Option<&Path>,
    registers: Option<usize>,
    pooled: bool,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut m = start("train-toy", common)?;
    if let Some(r) = registers {
        m.config.model.num_registers = r;
    }
    if pooled {
        m.config.model.use_cls = false;
    }
    if let Some(e) = epochs {
        m.config.train.epochs = e;
    }
    m.config.train.seed = m.seed;
    m.config.validate()?;
    let train = load_split(&mut m, data.manifest.as_deref(), Split::Train)?;
    let val = match (data.manifest.is_some() || m.config.data.manifest.is_some(), val_manifest) {
        (_, Some(p)) => {
            m.input(p);
            Some(load_manifest(p)?)
        }
        (true, None) => None,
        (false, None) => Some(make_synthetic(&m.config.data.synthetic(Split::Val, m.seed))?),
    };
    let side = m.config.model.image_size;
    let train = tensors(&train, &m, side)?;
    let val = match val {
        Some(v) => tensors(&v, &m, side)?,
        None => Vec::new(),
    };
    let mut model = ViTModel::init(m.config.model.clone(), m.seed)?;
    let history = train_classifier(&mut model, &train, &val, &m.config.train)?;

    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for e in &history {
        let acc = e.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{acc}", e.epoch, e.train_loss);
    }
    if let Some(e) = history.last() {
        match e.val_accuracy {
            Some(a) => println!("final train loss {:.4}, val accuracy {a:.4}", e.train_loss),
            None => println!("final train loss {:.4}", e.train_loss),
        }
    }
    m.write(out, &model_to_archive(&model).to_bytes())?;
    m.write(&sibling(out, "metrics.csv"), csv.as_bytes())?;
    m.finish(&sibling(out, "manifest.txt"))
}

/// Embeddings of the output patch tokens as `[G, G, D]`.
fn patch_grid(acts: &Activations) -> Result<Tensor> {
    let g = acts.layout.grid;
    let d = acts.tokens.dims()[1];
    let data: Vec<f64> = acts.patch_tokens().flatten().copied().collect();
    Ok(Tensor::new(vec![g, g, d], data)?)
}

fn write_map(m: &mut RunManifest, dir: &Path, stem: &str, map: &MapGrid, px: usize) -> Result<()> {
    m.write(&dir.join(format!("{stem}.pgm")), &render_map(map, px)?)?;
    m.write(&dir.join(format!("{stem}.csv")), map_to_csv(map).as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn analyze_maps(
    common: &Common,
    model_path: &Path,
    image: &Path,
    stats: Option<&Path>,
    resolution: Option<usize>,
    px: usize,
    blocks: bool,
    out: &Path,
) -> Result<()> {
    let mut m = start("analyze-maps", common)?;
    let model = read_model(&mut m, model_path)?;
    m.input(image);
    let bytes = std::fs::read(image).map_err(|e| CliError::io(image, e))?;
    let img = decode_ppm(&bytes)?;
    let side = resolution.unwrap_or(model.config.image_size);
    let x = m.config.data.preprocess.apply(&img, side)?;
    let acts = model.forward(&x, Capture::ALL)?;

    let feature = feature_map(&acts)?;
    let attention = if model.config.use_cls { attention_map_cls(&acts)?.map } else { attention_map_pooled(&acts)? };
    let norms = feature.values.clone();
    let mask = match stats {
        Some(p) => {
            let a = read_archive(&mut m, p)?;
            let s = TokenStats::from_archive(&a)?;
            if s.grid != feature.grid {
                return Err(CliError::invalid(format!(
                    "{}: statistics are for a {}x{} grid, this image gives {}x{}",
                    p.display(),
                    s.grid,
                    s.grid,
                    feature.grid,
                    feature.grid
                )));
            }
            s.classify(&norms)?
        }
        None => outlier_threshold(&norms, m.config.analysis.percentile)?.1,
    };
    let cos = mean_neighbor_cosine(&patch_grid(&acts)?, m.config.analysis.exclude_edges)?;
    let records: Vec<TokenRecord> = norms
        .iter()
        .enumerate()
        .map(|(k, &norm)| TokenRecord {
            image_id: 0,
            token_idx: k,
            norm,
            is_outlier: mask[k],
            mean_neighbor_cos: cos.values[k],
        })
        .collect();

    write_map(&mut m, out, "feature", &feature, px)?;
    write_map(&mut m, out, "attention", &attention, px)?;
    let mut csv = Vec::new();
    write_token_csv(&mut csv, &records).map_err(|e| CliError::io(out, e))?;
    m.write(&out.join("tokens.csv"), &csv)?;
    if blocks {
        for b in 0..acts.blocks.len() {
            for (which, name) in [(QkvSelect::Q, "q"), (QkvSelect::K, "k"), (QkvSelect::V, "v"), (QkvSelect::Out, "out")] {
                let map = qkv_block_maps(&acts, b, which)?;
                write_map(&mut m, out, &format!("block{b}_{name}"), &map, px)?;
            }
        }
    }
    let outliers = mask.iter().filter(|&&o| o).count();
    println!("{} patches, {outliers} above threshold", norms.len());
    m.finish(&out.join("manifest.txt"))
}

fn norms(
    common: &Common,
    data: &DataArgs,
    model_path: &Path,
    sample_n: Option<usize>,
    percentile: Option<f64>,
    per_image: bool,
    out: &Path,
) -> Result<()> {
    let mut m = start("norms", common)?;
    if let Some(n) = sample_n {
        m.config.analysis.sample_n = n;
    }
    if let Some(q) = percentile {
        m.config.analysis.percentile = q;
    }
    m.config.analysis.per_image |= per_image;
    m.config.validate()?;
    let model = read_model(&mut m, model_path)?;
    let ds = load_split(&mut m, data.manifest.as_deref(), Split::Train)?;
    let stats = norm_distribution(&model, &ds, &m.config.data.preprocess, &m.config.analysis, m.seed)?;

    let mut hist = String::from("lo,hi,count\n");
    for (i, c) in stats.histogram.counts.iter().enumerate() {
        let _ = writeln!(hist, "{},{},{c}", stats.histogram.edges[i], stats.histogram.edges[i + 1]);
    }
    let n = stats.tokens_per_image();
    let records: Vec<TokenRecord> = stats
        .norms
        .iter()
        .enumerate()
        .map(|(i, &norm)| TokenRecord {
            image_id: stats.image_ids[i / n],
            token_idx: i % n,
            norm,
            is_outlier: stats.masks[i],
            mean_neighbor_cos: None,
        })
        .collect();
    let mut tokens = Vec::new();
    write_token_csv(&mut tokens, &records).map_err(|e| CliError::io(out, e))?;

    let mut summary = String::new();
    let _ = writeln!(summary, "images,{}", stats.image_ids.len());
    let _ = writeln!(summary, "tokens,{}", stats.norms.len());
    let _ = writeln!(summary, "percentile,{}", stats.percentile);
    let _ = writeln!(summary, "threshold,{}", stats.threshold);
    let _ = writeln!(summary, "outlier_fraction,{}", stats.outlier_fraction());
    match bimodality_coefficient(&stats.norms) {
        Ok(b) => {
            let _ = writeln!(summary, "bimodality_coefficient,{}", b.coefficient);
            let _ = writeln!(summary, "bimodal,{}", b.bimodal);
        }
        Err(e) => println!("bimodality not computed: {e}"),
    }
    print!("{summary}");

    m.write(&out.join("stats.vtrl"), &stats.to_archive().to_bytes())?;
    m.write(&out.join("histogram.csv"), hist.as_bytes())?;
    m.write(&out.join("tokens.csv"), &tokens)?;
    m.write(&out.join("summary.csv"), summary.as_bytes())?;
    m.finish(&out.join("manifest.txt"))
}

fn summary_row(s: &mut String, group: &str, summary: Option<Summary>) {
    match summary {
        Some(x) => {
            let _ = writeln!(s, "{group},{},{},{},{},{}", x.n, x.mean, x.std, x.min, x.max);
        }
        None => {
            let _ = writeln!(s, "{group},0,,,,");
        }
    }
}

fn cosine(common: &Common, data: &DataArgs, model_path: &Path, stats_path: &Path, exclude_edges: bool, out: &Path) -> Result<()> {
    let mut m = start("cosine", common)?;
    m.config.analysis.exclude_edges |= exclude_edges;
    let model = read_model(&mut m, model_path)?;
    let stats = TokenStats::from_archive(&read_archive(&mut m, stats_path)?)?;
    let ds = load_split(&mut m, data.manifest.as_deref(), Split::Train)?;
    if stats.grid != model.config.grid() {
        return Err(CliError::invalid("statistics and model disagree on the token grid"));
    }
    let side = model.config.image_size;
    let mut split = CosineSplit::default();
    let mut records = Vec::new();
    for (slot, &id) in stats.image_ids.iter().enumerate() {
        if id >= ds.len() {
            return Err(CliError::invalid(format!("statistics refer to image {id}, the dataset has {}", ds.len())));
        }
        let x = m.config.data.preprocess.apply(&ds.image(id)?, side)?;
        let acts = model.forward(&x, Capture::default())?;
        let emb = patch_grid(&acts)?;
        let mask = stats.image_mask(slot);
        let per_token = mean_neighbor_cosine(&emb, m.config.analysis.exclude_edges)?;
        for (k, &norm) in stats.image_norms(slot).iter().enumerate() {
            records.push(TokenRecord {
                image_id: id,
                token_idx: k,
                norm,
                is_outlier: mask[k],
                mean_neighbor_cos: per_token.values[k],
            });
        }
        split.extend(neighbor_cosine(&emb, mask, m.config.analysis.exclude_edges)?);
    }
    let mut tokens = Vec::new();
    write_token_csv(&mut tokens, &records).map_err(|e| CliError::io(out, e))?;
    let mut summary = String::from("group,n,mean,std,min,max\n");
    summary_row(&mut summary, "outlier", split.outlier_summary());
    summary_row(&mut summary, "normal", split.normal_summary());
    let _ = writeln!(summary, "# zero_pairs={} excluded_edges={}", split.diagnostics.zero_pairs, split.diagnostics.excluded_edges);
    print!("{summary}");
    m.write(&out.join("cosine.csv"), &tokens)?;
    m.write(&out.join("summary.csv"), summary.as_bytes())?;
    m.finish(&out.join("manifest.txt"))
}

fn probe_extract(common: &Common, data: &DataArgs, model_path: &Path, stats_path: &Path, task: &str, out: &Path) -> Result<()> {
    let mut m = start("probe-extract", common)?;
    let task: ProbeTask = task.parse()?;
    let model = read_model(&mut m, model_path)?;
    let stats = TokenStats::from_archive(&read_archive(&mut m, stats_path)?)?;
    let ds = load_split(&mut m, data.manifest.as_deref(), Split::Train)?;
    let probe = extract_probe_dataset(&model, &ds, &m.config.data.preprocess, task, &stats, m.seed)?;
    println!("{} rows of width {}", probe.len(), probe.width());
    m.write(out, &probe.to_archive().to_bytes())?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn probe_train(common: &Common, data_path: &Path, max_epochs: Option<usize>, out: &Path) -> Result<()> {
    let mut m = start("probe-train", common)?;
    let data = ProbeDataset::from_archive(&read_archive(&mut m, data_path)?)?;
    if m.config.probe.task != data.task {
        m.config.probe.task = data.task;
    }
    if let Some(e) = max_epochs {
        m.config.probe.max_epochs = e;
    }
    m.config.probe.seed = m.seed;
    m.config.validate()?;
    let (head, history) = train_linear_probe(&data, &m.config.probe)?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &history).map_err(|e| CliError::io(out, e))?;
    println!(
        "{} epochs, best epoch {}{}",
        history.epochs.len(),
        history.best_epoch,
        if history.stopped_early { ", stopped early" } else { "" }
    );
    m.write(out, &head.to_archive().to_bytes())?;
    m.write(&sibling(out, "metrics.csv"), &csv)?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn probe_eval(common: &Common, data_path: &Path, head_path: &Path, out: &Path) -> Result<()> {
    let mut m = start("probe-eval", common)?;
    let data = ProbeDataset::from_archive(&read_archive(&mut m, data_path)?)?;
    let head = ProbeHead::from_archive(&read_archive(&mut m, head_path)?)?;
    if head.input_width() != data.width() || head.output_width() != data.output_width() {
        return Err(CliError::invalid("probe head does not fit the dataset"));
    }
    let mut report = String::from("task,category,rows,metric,value\n");
    let task = data.task;
    for cat in TokenCategory::ALL {
        let rows = data.rows_of(cat).len();
        if rows == 0 {
            let _ = writeln!(report, "{task},{cat},0,empty,");
            continue;
        }
        let part = data.restrict(cat)?;
        match task {
            ProbeTask::Position => {
                let p = eval_position(&head, &part)?;
                let _ = writeln!(report, "{task},{cat},{rows},top1,{}", p.top1);
                let _ = writeln!(report, "{task},{cat},{rows},mean_distance,{}", p.mean_distance);
            }
            ProbeTask::Reconstruction => {
                let _ = writeln!(report, "{task},{cat},{rows},mse,{}", eval_reconstruction(&head, &part)?);
            }
            ProbeTask::Classification => {
                let _ = writeln!(report, "{task},{cat},{rows},top1,{}", top1(&head, &part)?);
            }
        }
    }
    if task == ProbeTask::Position {
        let _ = writeln!(report, "{task},baseline,,mean_distance,{}", center_baseline(data.grid));
    }
    print!("{report}");
    m.write(out, report.as_bytes())?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn sweep(common: &Common, data_path: &Path, head_path: &Path, stats_path: &Path, percentiles: &[f64], out: &Path) -> Result<()> {
    let mut m = start("sweep", common)?;
    let data = ProbeDataset::from_archive(&read_archive(&mut m, data_path)?)?;
    let head = ProbeHead::from_archive(&read_archive(&mut m, head_path)?)?;
    let stats = TokenStats::from_archive(&read_archive(&mut m, stats_path)?)?;
    if data.targets.labels().is_none() {
        return Err(CliError::invalid("the sweep scores top-1 and needs class or position targets"));
    }
    let points = percentile_sweep(&head, &data, &stats, percentiles)?;
    let mut csv = String::from("percentile,threshold,outlier_rows,top1\n");
    for p in &points {
        let acc = p.top1.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{acc}", p.percentile, p.threshold, p.outlier_rows);
    }
    print!("{csv}");
    m.write(out, csv.as_bytes())?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn repr_train(common: &Common, data: &DataArgs, val_manifest: Option<&Path>, model_path: &Path, kind: &str, out: &Path) -> Result<()> {
    let mut m = start("repr-train", common)?;
    let kind: ReprKind = kind.parse()?;
    let model = read_model(&mut m, model_path)?;
    let train = load_split(&mut m, data.manifest.as_deref(), Split::Train)?;
    let val = match val_manifest {
        Some(p) => {
            m.input(p);
            Some(load_manifest(p)?)
        }
        None if data.manifest.is_none() && m.config.data.manifest.is_none() => {
            Some(make_synthetic(&m.config.data.synthetic(Split::Val, m.seed))?)
        }
        None => None,
    };
    let pre = m.config.data.preprocess.clone();
    let train = extract_representation_dataset(&model, &train, &pre, kind)?;
    let val = val.map(|v| extract_representation_dataset(&model, &v, &pre, kind)).transpose()?;
    let cfg = TrainConfig { seed: m.seed, ..TrainConfig::representation() };
    let mut records: Vec<EpochRecord> = Vec::new();
    let (head, _) = train_probe_with_validation(&train, val.as_ref(), &cfg, |r, _| records.push(r.clone()))?;

    let mut csv = String::from("epoch,lr,train_loss,train_top1,val_loss,val_top1\n");
    for r in &records {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_metric, opt(r.val_loss), opt(r.val_metric));
    }
    if let Some(r) = records.last() {
        println!("{kind}: width {}, final train top1 {:.4}", train.width(), r.train_metric);
        if let Some(v) = r.val_metric {
            println!("{kind}: final val top1 {v:.4}");
        }
    }
    m.write(out, &head.to_archive().to_bytes())?;
    m.write(&sibling(out, "metrics.csv"), csv.as_bytes())?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn render(common: &Common, grid: &Path, px: usize, out: &Path) -> Result<()> {
    let mut m = start("render", common)?;
    m.input(grid);
    let text = std::fs::read_to_string(grid).map_err(|e| CliError::io(grid, e))?;
    let map = map_from_csv(&text, MapKind::Feature)?;
    m.write(out, &render_map(&map, px)?)?;
    m.finish(&sibling(out, "manifest.txt"))
}

fn carbon(common: &Common, ci: f64, pue: f64, power: f64, hours: f64, out: Option<&Path>) -> Result<()> {
    let m = start("carbon", common)?;
    let kg = carbon_estimate(&CarbonParams { carbon_intensity: ci, pue, power_kw: power, hours })?;
    println!("{kg:.2}");
    if let Some(out) = out {
        let mut m = m;
        m.write(out, format!("{kg:.2}\n").as_bytes())?;
        m.finish(&sibling(out, "manifest.txt"))?;
    }
    Ok(())
}
