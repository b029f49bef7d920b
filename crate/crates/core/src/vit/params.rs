//! Parameter layout shared by stored tensors (`ViTParams<Tensor>`) and their
//! tape handles (`ViTParams<Var>`).
//!
//! Canonical entry names, in iteration order:
//!
//! | name | shape |
//! |------|-------|
//! | `patch_embed.weight` | `[P²·3, D]` |
//! | `patch_embed.bias` | `[D]` |
//! | `cls_token` | `[1, D]` (only with [CLS]) |
//! | `pos_embed` | `[use_cls + G², D]`, row 0 is the [CLS] slot |
//! | `registers` | `[R, D]` (only when R > 0) |
//! | `blocks.{i}.norm1.weight` / `.bias` | `[D]` |
//! | `blocks.{i}.attn.qkv.weight` / `.bias` | `[D, 3D]` / `[3D]` |
//! | `blocks.{i}.attn.proj.weight` / `.bias` | `[D, D]` / `[D]` |
//! | `blocks.{i}.norm2.weight` / `.bias` | `[D]` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `[D, hidden]` / `[hidden]` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `[hidden, D]` / `[D]` |
//! | `norm.weight` / `norm.bias` | `[D]` |
//! | `head.weight` / `head.bias` | `[D, C]` / `[C]` |

use super::config::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: Option<T>,
    pub pos_embed: T,
    pub registers: Option<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
}

impl<T> ViTParams<T> {
    /// Visits every entry in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        let _ = self.map(&mut |name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        for (n, t) in names.iter().zip(self.values_mut()) {
            f(n, t);
        }
    }

    /// Mutable references to every entry in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = vec![&mut self.patch_embed.weight, &mut self.patch_embed.bias];
        if let Some(c) = &mut self.cls_token {
            v.push(c);
        }
        v.push(&mut self.pos_embed);
        if let Some(r) = &mut self.registers {
            v.push(r);
        }
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1.weight,
                &mut b.norm1.bias,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.norm2.weight,
                &mut b.norm2.bias,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        v.extend([&mut self.norm.weight, &mut self.norm.bias, &mut self.head.weight, &mut self.head.bias]);
        v
    }

    /// Builds a same-shaped structure, calling `f` in canonical order.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ViTParams<U> {
        let lin = |f: &mut dyn FnMut(&str, &T) -> U, p: &str, l: &Linear<T>| Linear {
            weight: f(&format!("{p}.weight"), &l.weight),
            bias: f(&format!("{p}.bias"), &l.bias),
        };
        let norm = |f: &mut dyn FnMut(&str, &T) -> U, p: &str, n: &Norm<T>| Norm {
            weight: f(&format!("{p}.weight"), &n.weight),
            bias: f(&format!("{p}.bias"), &n.bias),
        };
        let patch_embed = lin(f, "patch_embed", &self.patch_embed);
        let cls_token = self.cls_token.as_ref().map(|c| f("cls_token", c));
        let pos_embed = f("pos_embed", &self.pos_embed);
        let registers = self.registers.as_ref().map(|r| f("registers", r));
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{i}");
                Block {
                    norm1: norm(f, &format!("{p}.norm1"), &b.norm1),
                    qkv: lin(f, &format!("{p}.attn.qkv"), &b.qkv),
                    proj: lin(f, &format!("{p}.attn.proj"), &b.proj),
                    norm2: norm(f, &format!("{p}.norm2"), &b.norm2),
                    fc1: lin(f, &format!("{p}.mlp.fc1"), &b.fc1),
                    fc2: lin(f, &format!("{p}.mlp.fc2"), &b.fc2),
                }
            })
            .collect();
        let norm_final = norm(f, "norm", &self.norm);
        let head = lin(f, "head", &self.head);
        ViTParams {
            patch_embed,
            cls_token,
            pos_embed,
            registers,
            blocks,
            norm: norm_final,
            head,
        }
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Expected dims of every canonical entry for `cfg`, in canonical order.
pub fn expected_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
    ];
    if cfg.use_cls {
        out.push(("cls_token".into(), vec![1, d]));
    }
    out.push(("pos_embed".into(), vec![cfg.pos_rows(), d]));
    if cfg.num_registers > 0 {
        out.push(("registers".into(), vec![cfg.num_registers, d]));
    }
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        out.extend([
            (format!("{p}.norm1.weight"), vec![d]),
            (format!("{p}.norm1.bias"), vec![d]),
            (format!("{p}.attn.qkv.weight"), vec![d, 3 * d]),
            (format!("{p}.attn.qkv.bias"), vec![3 * d]),
            (format!("{p}.attn.proj.weight"), vec![d, d]),
            (format!("{p}.attn.proj.bias"), vec![d]),
            (format!("{p}.norm2.weight"), vec![d]),
            (format!("{p}.norm2.bias"), vec![d]),
            (format!("{p}.mlp.fc1.weight"), vec![d, h]),
            (format!("{p}.mlp.fc1.bias"), vec![h]),
            (format!("{p}.mlp.fc2.weight"), vec![h, d]),
            (format!("{p}.mlp.fc2.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("norm.weight".into(), vec![d]),
        ("norm.bias".into(), vec![d]),
        ("head.weight".into(), vec![d, cfg.num_classes]),
        ("head.bias".into(), vec![cfg.num_classes]),
    ]);
    out
}
