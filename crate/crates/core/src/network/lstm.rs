//! Convolutional LSTM cell with 1×1 gate convolutions.

use rand::Rng;

use crate::autodiff::{concat, Graph, Padding, Var};
use crate::error::{shape_mismatch, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gates are stacked along the output channels in the order input, forget,
/// output, candidate.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub channels: usize,
    /// `[4c, 2c, 1, 1]` over `[u, H_{t-1}]`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        LstmParams {
            channels,
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[4 * c, 2 * c, 1, 1], (1.0 / (2 * c) as f64).sqrt(), rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * c])),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        8 * channels * channels + 4 * channels
    }
}

/// Returns `(hidden, cell)`.
pub fn lstm_cell<'g>(
    g: &'g Graph,
    store: &ParamStore,
    p: &LstmParams,
    u: Var<'g>,
    hidden: Var<'g>,
    cell: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (us, hs, cs) = (u.shape(), hidden.shape(), cell.shape());
    if us != hs || hs != cs {
        return Err(shape_mismatch("lstm_cell", &us, &hs));
    }
    let c = p.channels;
    let z = concat(&[u, hidden], 1)?.conv2d(&g.param(store, p.weight), Some(&g.param(store, p.bias)), 1, Padding::Same)?;
    let i = z.narrow_axis1(0, c)?.sigmoid();
    let f = z.narrow_axis1(c, c)?.sigmoid();
    let o = z.narrow_axis1(2 * c, c)?.sigmoid();
    let cand = z.narrow_axis1(3 * c, c)?.tanh();
    let new_cell = f.mul(&cell)?.add(&i.mul(&cand)?)?;
    let new_hidden = o.mul(&new_cell.tanh())?;
    Ok((new_hidden, new_cell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "lstm", 2, &mut rng(1));
        store.set(p.weight, Tensor::zeros(&[8, 4, 1, 1])).unwrap();
        let shape = [1, 2, 3, 3];
        let cell = Tensor::randn(&shape, 1.0, &mut rng(2));
        let g = Graph::new();
        let (h, c) = lstm_cell(
            &g,
            &store,
            &p,
            g.constant(Tensor::randn(&shape, 1.0, &mut rng(3))),
            g.constant(Tensor::randn(&shape, 1.0, &mut rng(4))),
            g.constant(cell.clone()),
        )
        .unwrap();
        let expect_c = cell.map(|v| 0.5 * v);
        assert!(c.value().max_abs_diff(&expect_c) < 1e-15);
        assert!(h.value().max_abs_diff(&expect_c.map(|v| 0.5 * v.tanh())) < 1e-15);
    }

    #[test]
    fn zero_state_and_input_give_zero_hidden() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "lstm", 3, &mut rng(5));
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let (h, c) = lstm_cell(&g, &store, &p, z, z, z).unwrap();
        assert_eq!(h.value().max_abs(), 0.0);
        assert_eq!(c.value().max_abs(), 0.0);
    }

    #[test]
    fn gate_gradients() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "lstm", 2, &mut rng(6));
        store.set(p.bias, Tensor::randn(&[8], 0.5, &mut rng(7))).unwrap();
        let shape = [1, 2, 3, 4];
        let (u, h, c) = (
            Tensor::randn(&shape, 1.0, &mut rng(8)),
            Tensor::randn(&shape, 1.0, &mut rng(9)),
            Tensor::randn(&shape, 1.0, &mut rng(10)),
        );
        let r = check_param_gradients(
            &store,
            |g, s| {
                let (nh, nc) = lstm_cell(g, s, &p, g.constant(u.clone()), g.constant(h.clone()), g.constant(c.clone()))?;
                nh.square().sum().add(&nc.sum())
            },
            |_| true,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "lstm", 2, &mut rng(11));
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1, 2, 4, 3]));
        assert!(lstm_cell(&g, &store, &p, a, b, a).is_err());
    }
}
