use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{SequenceLayout, ViTConfig};
use super::params::{Block, Linear, Norm, ViTParams};
use crate::autograd::{Tape, Var};
use crate::data::align_corners_taps;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Additive score mask that zeroes attention after softmax without
/// producing infinities.
const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub params: ViTParams<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    /// Post-softmax attention of every block.
    pub attention: bool,
    /// Q, K, V and block outputs of every block.
    pub qkv: bool,
}

impl Capture {
    pub const ALL: Capture = Capture {
        attention: true,
        qkv: true,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub capture: Capture,
    /// Stops [CLS] and patch queries from reading register keys. With zeroed
    /// registers this makes a register model compute exactly what the
    /// register-free model computes on the other rows.
    pub mask_register_keys: bool,
}

impl From<Capture> for ForwardOptions {
    fn from(capture: Capture) -> Self {
        ForwardOptions {
            capture,
            mask_register_keys: false,
        }
    }
}

/// Per-block head-merged projections, each `[S, D]`, plus the block output.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTensors {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub layout: SequenceLayout,
    /// One `[H, S, S]` tensor per block when attention capture is on.
    pub attention: Vec<Tensor>,
    pub blocks: Vec<BlockTensors>,
    /// Final-block output tokens before the last LayerNorm, `[S, D]`.
    pub tokens: Tensor,
    /// What the classifier head reads: normalized [CLS] or patch mean, `[D]`.
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Activations {
    pub fn patch_tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.layout.patch_rows().map(|r| self.tokens.row(r))
    }

    pub fn register_outputs(&self) -> Vec<&[f64]> {
        self.layout.register_rows().map(|r| self.tokens.row(r)).collect()
    }

    pub fn cls_output(&self) -> Option<&[f64]> {
        self.layout.use_cls.then(|| self.tokens.row(0))
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Mean of the output patch tokens; [CLS] and register rows are excluded.
pub fn pooled_representation(acts: &Activations) -> Vec<f64> {
    let d = acts.tokens.dims()[1];
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for row in acts.patch_tokens() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn trunc_normal(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("positive dims")
}

impl ViTModel {
    /// Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let h = config.hidden_dim();
        let rng = &mut rng;
        let linear = |rng: &mut ChaCha8Rng, i: usize, o: usize| Linear {
            weight: trunc_normal(rng, &[i, o]),
            bias: Tensor::zeros(&[o]),
        };
        let norm = || Norm {
            weight: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        };
        let patch_embed = linear(rng, config.patch_dim(), d);
        let cls_token = config.use_cls.then(|| trunc_normal(rng, &[1, d]));
        let pos_embed = trunc_normal(rng, &[config.pos_rows(), d]);
        let registers = (config.num_registers > 0).then(|| trunc_normal(rng, &[config.num_registers, d]));
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: norm(),
                qkv: linear(rng, d, 3 * d),
                proj: linear(rng, d, d),
                norm2: norm(),
                fc1: linear(rng, d, h),
                fc2: linear(rng, h, d),
            })
            .collect();
        let head = linear(rng, d, config.num_classes);
        let params = ViTParams {
            patch_embed,
            cls_token,
            pos_embed,
            registers,
            blocks,
            norm: norm(),
            head,
        };
        Ok(ViTModel { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.numel());
        n
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ViTParams<Var> {
        self.params.map(&mut |_, t| {
            if trainable {
                let mut t = t.clone();
                t.requires_grad = true;
                tape.leaf(&t)
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn forward(&self, image: &Tensor, opts: impl Into<ForwardOptions>) -> Result<Activations> {
        let opts = opts.into();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let graph = build_graph(&self.config, &mut tape, &vars, image, &opts)?;
        graph.collect(&tape)
    }

    /// Patch embedding of `image` (`[H, W, 3]`), one row per patch in
    /// row-major grid order.
    pub fn embed_patches(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, self.config.patch_size)?;
        let mut tape = Tape::new();
        let x = tape.constant(patches);
        let w = tape.constant(self.params.patch_embed.weight.clone());
        let b = tape.constant(self.params.patch_embed.bias.clone());
        let xw = tape.matmul(x, w)?;
        let out = tape.add_bias(xw, b)?;
        Ok(tape.value(out).clone())
    }
}

/// Splits `[H, W, 3]` into `[G_h·G_w, P²·3]`, flattening each patch by
/// (row, col, channel).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let dims = image.dims();
    let [h, w, 3] = dims[..] else {
        return Err(Error::Shape {
            op: "patchify",
            lhs: dims.to_vec(),
            rhs: vec![patch, patch, 3],
        });
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: dims.to_vec(),
            rhs: vec![patch, patch, 3],
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut data = Vec::with_capacity(h * w * 3);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let start = ((pr * patch + r) * w + pc * patch) * 3;
                data.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * 3], data)
}

/// Bilinear (align-corners) resampling matrix from a `g_old²` grid to a
/// `g_new²` grid, so that `M · field` resamples every channel.
pub fn interpolation_matrix(g_old: usize, g_new: usize) -> Result<Tensor> {
    if g_old == 0 || g_new == 0 {
        return Err(Error::contract("grid sides must be at least 1"));
    }
    let taps = align_corners_taps(g_old, g_new);
    let mut m = Tensor::zeros(&[g_new * g_new, g_old * g_old]);
    let cols = g_old * g_old;
    let data = m.data_mut();
    for (i, &(r0, r1, fr)) in taps.iter().enumerate() {
        for (j, &(c0, c1, fc)) in taps.iter().enumerate() {
            let row = (i * g_new + j) * cols;
            data[row + r0 * g_old + c0] += (1.0 - fr) * (1.0 - fc);
            data[row + r0 * g_old + c1] += (1.0 - fr) * fc;
            data[row + r1 * g_old + c0] += fr * (1.0 - fc);
            data[row + r1 * g_old + c1] += fr * fc;
        }
    }
    Ok(m)
}

/// Resamples a `[G, G, D]` positional field to `[G', G', D]`.
pub fn interpolate_pos_embed(pos: &Tensor, new_grid: usize) -> Result<Tensor> {
    let dims = pos.dims();
    let [g, g2, d] = dims[..] else {
        return Err(Error::contract(format!("expected [G, G, D], got {dims:?}")));
    };
    if g != g2 {
        return Err(Error::contract(format!("grid must be square, got {dims:?}")));
    }
    let flat = pos.clone().reshape(vec![g * g, d])?;
    let m = interpolation_matrix(g, new_grid)?;
    crate::tensor::matmul(&m, &flat)?.reshape(vec![new_grid, new_grid, d])
}

/// Builds `[CLS]? ++ registers ++ patches` with positional embeddings added
/// to [CLS] and patch rows only. `pos_embed` has the [CLS] row first when
/// `cls` is present.
pub fn assemble_sequence(
    cls: Option<&Tensor>,
    registers: Option<&Tensor>,
    patch_tokens: &Tensor,
    pos_embed: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let cls = cls.map(|c| tape.constant(c.clone()));
    let regs = registers.map(|r| tape.constant(r.clone()));
    let patches = tape.constant(patch_tokens.clone());
    let pos = tape.constant(pos_embed.clone());
    let seq = assemble(&mut tape, cls, regs, patches, pos)?;
    Ok(tape.value(seq).clone())
}

fn assemble(
    tape: &mut Tape,
    cls: Option<Var>,
    registers: Option<Var>,
    patches: Var,
    pos: Var,
) -> Result<Var> {
    let (n, _) = tape.value(patches).matrix_dims()?;
    let (pos_rows, _) = tape.value(pos).matrix_dims()?;
    let offset = usize::from(cls.is_some());
    if pos_rows != n + offset {
        return Err(Error::Shape {
            op: "assemble_sequence",
            lhs: tape.value(pos).dims().to_vec(),
            rhs: tape.value(patches).dims().to_vec(),
        });
    }
    let mut parts = Vec::with_capacity(3);
    if let Some(c) = cls {
        let pc = tape.slice_rows(pos, 0, 1)?;
        parts.push(tape.add(c, pc)?);
    }
    if let Some(r) = registers {
        parts.push(r);
    }
    let pp = tape.slice_rows(pos, offset, offset + n)?;
    parts.push(tape.add(patches, pp)?);
    tape.concat_rows(&parts)
}

pub(crate) struct Graph {
    layout: SequenceLayout,
    heads: usize,
    attention: Vec<Vec<Var>>,
    blocks: Vec<[Var; 4]>,
    tokens: Var,
    representation: Var,
    pub logits: Var,
}

impl Graph {
    fn collect(&self, tape: &Tape) -> Result<Activations> {
        let s = self.layout.seq_len();
        let attention = self
            .attention
            .iter()
            .map(|heads| {
                let data = heads.iter().flat_map(|&h| tape.value(h).data().iter().copied()).collect();
                Tensor::new(vec![self.heads, s, s], data)
            })
            .collect::<Result<_>>()?;
        let blocks = self
            .blocks
            .iter()
            .map(|&[q, k, v, out]| BlockTensors {
                q: tape.value(q).clone(),
                k: tape.value(k).clone(),
                v: tape.value(v).clone(),
                out: tape.value(out).clone(),
            })
            .collect();
        Ok(Activations {
            layout: self.layout,
            attention,
            blocks,
            tokens: tape.value(self.tokens).clone(),
            representation: tape.value(self.representation).data().to_vec(),
            logits: tape.value(self.logits).data().to_vec(),
        })
    }
}

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let xw = tape.matmul(x, l.weight)?;
    tape.add_bias(xw, l.bias)
}

pub(crate) fn build_graph(
    cfg: &ViTConfig,
    tape: &mut Tape,
    p: &ViTParams<Var>,
    image: &Tensor,
    opts: &ForwardOptions,
) -> Result<Graph> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != dims[1] || dims[2] != 3 || dims[0] % cfg.patch_size != 0 {
        return Err(Error::Shape {
            op: "forward",
            lhs: dims.to_vec(),
            rhs: vec![cfg.image_size, cfg.image_size, 3],
        });
    }
    let grid = dims[0] / cfg.patch_size;
    let layout = cfg.layout(grid);
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let eps = cfg.layernorm_eps;

    let patches = tape.constant(patchify(image, cfg.patch_size)?);
    let embedded = linear(tape, patches, &p.patch_embed)?;

    let mut pos = p.pos_embed;
    if grid != cfg.grid() {
        let offset = usize::from(cfg.use_cls);
        let grid_pos = tape.slice_rows(pos, offset, offset + cfg.num_patches())?;
        let m = tape.constant(interpolation_matrix(cfg.grid(), grid)?);
        let resampled = tape.matmul(m, grid_pos)?;
        pos = if cfg.use_cls {
            let cls_pos = tape.slice_rows(pos, 0, 1)?;
            tape.concat_rows(&[cls_pos, resampled])?
        } else {
            resampled
        };
    }
    let mut x = assemble(tape, p.cls_token, p.registers, embedded, pos)?;

    let s = layout.seq_len();
    let mask = if opts.mask_register_keys && layout.num_registers > 0 {
        let mut m = Tensor::zeros(&[s, s]);
        let regs = layout.register_rows();
        for q in (0..s).filter(|q| !regs.contains(q)) {
            for k in regs.clone() {
                m.data_mut()[q * s + k] = MASKED_SCORE;
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };

    let scale = 1.0 / (hd as f64).sqrt();
    let mut attention = Vec::new();
    let mut blocks = Vec::new();
    for b in &p.blocks {
        let h = tape.layer_norm(x, b.norm1.weight, b.norm1.bias, eps)?;
        let qkv = linear(tape, h, &b.qkv)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, 2 * d)?;
        let v = tape.slice_cols(qkv, 2 * d, 3 * d)?;
        let mut head_out = Vec::with_capacity(cfg.heads);
        let mut head_attn = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 1)?;
            head_attn.push(attn);
            head_out.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_out)?;
        let projected = linear(tape, merged, &b.proj)?;
        x = tape.add(x, projected)?;

        let h2 = tape.layer_norm(x, b.norm2.weight, b.norm2.bias, eps)?;
        let hidden = linear(tape, h2, &b.fc1)?;
        let act = tape.gelu(hidden);
        let mlp = linear(tape, act, &b.fc2)?;
        x = tape.add(x, mlp)?;

        if opts.capture.attention {
            attention.push(head_attn);
        }
        if opts.capture.qkv {
            blocks.push([q, k, v, x]);
        }
    }

    let tokens = x;
    let normed = tape.layer_norm(tokens, p.norm.weight, p.norm.bias, eps)?;
    let representation = if cfg.use_cls {
        tape.slice_rows(normed, 0, 1)?
    } else {
        let rows = layout.patch_rows();
        let patch_rows = tape.slice_rows(normed, rows.start, rows.end)?;
        tape.mean_rows(patch_rows)?
    };
    let logits = linear(tape, representation, &p.head)?;
    Ok(Graph {
        layout,
        heads: cfg.heads,
        attention,
        blocks,
        tokens,
        representation,
        logits,
    })
}

/// Mean cross-entropy of a batch of `(image, label)` pairs.
pub(crate) fn batch_loss(
    cfg: &ViTConfig,
    tape: &mut Tape,
    p: &ViTParams<Var>,
    batch: &[(&Tensor, usize)],
) -> Result<Var> {
    let opts = ForwardOptions::default();
    let logits = batch
        .iter()
        .map(|(img, _)| build_graph(cfg, tape, p, img, &opts).map(|g| g.logits))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&logits)?;
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    tape.cross_entropy(stacked, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(r: usize) -> ViTConfig {
        ViTConfig {
            image_size: 4,
            patch_size: 2,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_registers: r,
            use_cls: true,
            num_classes: 3,
            layernorm_eps: 1e-6,
        }
    }

    fn image(side: usize) -> Tensor {
        let data = (0..side * side * 3).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        Tensor::new(vec![side, side, 3], data).unwrap()
    }

    #[test]
    fn patchify_row_major() {
        let t = Tensor::new(vec![4, 4, 3], (0..48).map(f64::from).collect()).unwrap();
        let p = patchify(&t, 2).unwrap();
        assert_eq!(p.dims(), &[4, 12]);
        // patch (0,1) starts at pixel (0,2)
        assert_eq!(p.row(1)[..3], [6.0, 7.0, 8.0]);
        // second pixel row of patch (1,0) is pixel (3,0)
        assert_eq!(p.row(2)[6..9], [36.0, 37.0, 38.0]);
        assert!(patchify(&Tensor::zeros(&[5, 5, 3]), 2).is_err());
    }

    #[test]
    fn identity_patch_embedding_returns_pixels() {
        let mut cfg = tiny(0);
        cfg.patch_size = 1;
        cfg.embed_dim = 3;
        cfg.heads = 1;
        let mut m = ViTModel::init(cfg, 0).unwrap();
        m.params.patch_embed.weight = Tensor::eye(3);
        let img = image(4);
        let tokens = m.embed_patches(&img).unwrap();
        assert_eq!(tokens.data(), img.data());

        m.params.patch_embed.weight = Tensor::zeros(&[3, 3]);
        m.params.patch_embed.bias = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let tokens = m.embed_patches(&img).unwrap();
        for r in 0..16 {
            assert_eq!(tokens.row(r), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn assemble_orders_cls_registers_patches() {
        let cls = Tensor::full(&[1, 2], 1.0);
        let regs = Tensor::full(&[4, 2], 7.0);
        let patches = Tensor::full(&[4, 2], 2.0);
        let pos = Tensor::full(&[5, 2], 0.5);
        let seq = assemble_sequence(Some(&cls), Some(&regs), &patches, &pos).unwrap();
        assert_eq!(seq.dims(), &[9, 2]);
        assert_eq!(seq.row(0), &[1.5, 1.5]);
        for r in 1..5 {
            assert_eq!(seq.row(r), &[7.0, 7.0], "registers carry no position");
        }
        for r in 5..9 {
            assert_eq!(seq.row(r), &[2.5, 2.5]);
        }
        let seq = assemble_sequence(None, Some(&Tensor::full(&[2, 2], 7.0)), &patches, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(seq.dims(), &[6, 2]);
        let seq = assemble_sequence(Some(&cls), None, &patches, &pos).unwrap();
        assert_eq!(seq.dims(), &[5, 2]);
    }

    #[test]
    fn interpolation_identity_constant_and_ramp() {
        let pos = Tensor::new(vec![3, 3, 2], (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let same = interpolate_pos_embed(&pos, 3).unwrap();
        for (a, b) in same.data().iter().zip(pos.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let flat = Tensor::full(&[2, 2, 3], 0.7);
        let up = interpolate_pos_embed(&flat, 5).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        // ramp f(r, c) = r on a 2x2 grid; align-corners maps new row i to i/3
        let ramp = Tensor::new(vec![2, 2, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let up = interpolate_pos_embed(&ramp, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((up.data()[i * 4 + j] - i as f64 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_shapes_and_row_stochastic_attention() {
        let m = ViTModel::init(tiny(2), 1).unwrap();
        let acts = m.forward(&image(4), Capture::ALL).unwrap();
        assert_eq!(acts.layout.seq_len(), 7);
        assert_eq!(acts.tokens.dims(), &[7, 4]);
        assert_eq!(acts.attention.len(), 1);
        assert_eq!(acts.attention[0].dims(), &[2, 7, 7]);
        for row in acts.attention[0].data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(acts.blocks[0].q.dims(), &[7, 4]);
        assert_eq!(acts.logits.len(), 3);
        assert_eq!(acts.register_outputs().len(), 2);
    }

    #[test]
    fn forward_rejects_bad_images() {
        let m = ViTModel::init(tiny(0), 1).unwrap();
        assert!(m.forward(&Tensor::zeros(&[4, 6, 3]), Capture::default()).is_err());
        assert!(m.forward(&Tensor::zeros(&[5, 5, 3]), Capture::default()).is_err());
    }

    #[test]
    fn pooled_mode_and_pooled_representation() {
        let mut cfg = tiny(2);
        cfg.use_cls = false;
        let m = ViTModel::init(cfg, 2).unwrap();
        let acts = m.forward(&image(4), Capture::default()).unwrap();
        assert_eq!(acts.tokens.dims(), &[6, 4]);
        let pooled = pooled_representation(&acts);
        let mut want = [0.0; 4];
        for r in 2..6 {
            for (w, v) in want.iter_mut().zip(acts.tokens.row(r)) {
                *w += v / 4.0;
            }
        }
        for (a, b) in pooled.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn high_resolution_forward_uses_interpolated_grid() {
        let m = ViTModel::init(tiny(1), 3).unwrap();
        let acts = m.forward(&image(8), Capture::ALL).unwrap();
        assert_eq!(acts.layout.grid, 4);
        assert_eq!(acts.tokens.dims(), &[1 + 1 + 16, 4]);
    }
}
