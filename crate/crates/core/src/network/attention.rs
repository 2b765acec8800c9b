//! Single-head windowed self-attention blocks with optional cyclic shift.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid_shape, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Debug)]
pub struct Dense {
    /// `[in, out]`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub(crate) fn apply<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(&g.param(store, self.weight), Some(&g.param(store, self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn apply<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&g.param(store, self.gamma), &g.param(store, self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub channels: usize,
    pub window: usize,
    pub shifted: bool,
    pub norm1: Norm,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub proj: Dense,
    pub norm2: Norm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, window: usize, shifted: bool, rng: &mut impl Rng) -> Self {
        let c = channels;
        let hidden = MLP_RATIO * c;
        AttentionBlock {
            channels,
            window,
            shifted,
            norm1: Norm::new(store, &format!("{name}.norm1"), c),
            q: Dense::new(store, &format!("{name}.q"), c, c, rng),
            k: Dense::new(store, &format!("{name}.k"), c, c, rng),
            v: Dense::new(store, &format!("{name}.v"), c, c, rng),
            proj: Dense::new(store, &format!("{name}.proj"), c, c, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c),
            fc1: Dense::new(store, &format!("{name}.fc1"), c, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, c, rng),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        let c = channels;
        let h = MLP_RATIO * c;
        4 * c + 4 * (c * c + c) + (c * h + h) + (h * c + c)
    }

    pub fn shift(&self) -> usize {
        if self.shifted {
            self.window / 2
        } else {
            0
        }
    }
}

/// Flat source indices that reorder `[b, c, h, w]` into window-major token
/// rows `[b · windows · ws², c]` after rolling the grid by `-shift`.
pub fn window_partition_index(b: usize, c: usize, h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let y = (wy * ws + iy + shift) % h;
                        let x = (wx * ws + ix + shift) % w;
                        for ch in 0..c {
                            idx.push(((bi * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Output of one block plus its attention weights `[b · windows, ws², ws²]`.
pub fn window_attention_with_weights<'g>(
    g: &'g Graph,
    store: &ParamStore,
    blk: &AttentionBlock,
    u: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = u.shape();
    let ws = blk.window;
    if shape.len() != 4 || shape[1] != blk.channels || ws == 0 || !shape[2].is_multiple_of(ws) || !shape[3].is_multiple_of(ws) {
        return Err(invalid_shape(
            "window_attention_block",
            &shape,
            format!("expected [b, {}, h, w] with h, w divisible by window {ws}", blk.channels),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let fwd = window_partition_index(b, c, h, w, ws, blk.shift());
    let inv = Rc::new(inverse_permutation(&fwd));
    let n_tok = b * h * w;
    let n_win = n_tok / (ws * ws);
    let x = u.gather(Rc::new(fwd), &[n_tok, c])?;

    let n1 = blk.norm1.apply(g, store, x)?;
    let q = blk.q.apply(g, store, n1)?.reshape(&[n_win, ws * ws, c])?;
    let k = blk.k.apply(g, store, n1)?.reshape(&[n_win, ws * ws, c])?;
    let v = blk.v.apply(g, store, n1)?.reshape(&[n_win, ws * ws, c])?;
    let attn = q.batch_matmul(&k, true)?.mul_scalar(1.0 / (c as f64).sqrt()).softmax_last();
    let mixed = attn.batch_matmul(&v, false)?.reshape(&[n_tok, c])?;
    let x = x.add(&blk.proj.apply(g, store, mixed)?)?;

    let n2 = blk.norm2.apply(g, store, x)?;
    let y = blk.fc2.apply(g, store, blk.fc1.apply(g, store, n2)?.gelu())?;
    let x = x.add(&y)?;
    Ok((x.gather(inv, &shape)?, attn))
}

pub fn window_attention_block<'g>(g: &'g Graph, store: &ParamStore, blk: &AttentionBlock, u: Var<'g>) -> Result<Var<'g>> {
    Ok(window_attention_with_weights(g, store, blk, u)?.0)
}
