//! Evaluation metrics on plain tensors.

use std::str::FromStr;

use crate::error::{invalid_shape, shape_mismatch, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over every element.
    Mean,
    /// Sum over each `[C, H, W]` frame, averaged over frames.
    SumPerFrame,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum_per_frame" => Ok(Reduction::SumPerFrame),
            _ => Err(Error::Config(format!("unknown reduction {s:?} (mean|sum_per_frame)"))),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn reduce(op: &'static str, pred: &Tensor, target: &Tensor, red: Reduction, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_same(op, pred, target)?;
    let total: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| f(p - t)).sum();
    match red {
        Reduction::Mean => Ok(total / pred.len() as f64),
        Reduction::SumPerFrame => {
            if pred.rank() < 3 {
                return Err(invalid_shape(op, pred.shape(), "per-frame reduction needs [.., C, H, W]"));
            }
            let frame: usize = pred.shape()[pred.rank() - 3..].iter().product();
            Ok(total / (pred.len() / frame) as f64)
        }
    }
}

pub fn mse(pred: &Tensor, target: &Tensor, red: Reduction) -> Result<f64> {
    reduce("mse", pred, target, red, |d| d * d)
}

pub fn mae(pred: &Tensor, target: &Tensor, red: Reduction) -> Result<f64> {
    reduce("mae", pred, target, red, f64::abs)
}

/// `‖p - t‖² / ‖t‖²` per leading-axis sample, averaged.
pub fn nmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("nmse", pred, target)?;
    if pred.rank() == 0 {
        return Err(invalid_shape("nmse", pred.shape(), "need a batch axis"));
    }
    let b = pred.shape()[0];
    let per = pred.len() / b;
    let mut acc = 0.0;
    for (p, t) in pred.data().chunks(per).zip(target.data().chunks(per)) {
        let den: f64 = t.iter().map(|v| v * v).sum();
        if den == 0.0 {
            return Err(Error::DivisionByZero("nmse: target sample with zero norm"));
        }
        let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
        acc += num / den;
    }
    Ok(acc / b as f64)
}

/// Normalised `n×n` Gaussian window.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(n * n);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Local statistics `(μx, μy, σx², σy², σxy)` of one window.
pub(crate) fn window_stats(x: &[f64], y: &[f64], w: usize, top: usize, left: usize, win: &[f64], n: usize) -> [f64; 5] {
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let k = win[i * n + j];
            let idx = (top + i) * w + left + j;
            mx += k * x[idx];
            my += k * y[idx];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let k = win[i * n + j];
            let idx = (top + i) * w + left + j;
            let (dx, dy) = (x[idx] - mx, y[idx] - my);
            vx += k * dx * dx;
            vy += k * dy * dy;
            cxy += k * dx * dy;
        }
    }
    [mx, my, vx, vy, cxy]
}

/// Mean SSIM of two `[C, H, W]` frames over all valid window positions.
pub fn ssim(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    check_same("ssim", pred, target)?;
    if pred.rank() != 3 {
        return Err(invalid_shape("ssim", pred.shape(), "expected [C, H, W]"));
    }
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(invalid_shape("ssim", pred.shape(), format!("frame smaller than the {n}×{n} window")));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("ssim data range must be positive, got {data_range}")));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let win = gaussian_window(n, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &pred.data()[ch * plane..(ch + 1) * plane];
        let y = &target.data()[ch * plane..(ch + 1) * plane];
        for top in 0..=h - n {
            for left in 0..=w - n {
                let [mx, my, vx, vy, cxy] = window_stats(x, y, w, top, left, &win, n);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM over every `[C, H, W]` frame of `[.., C, H, W]` tensors.
pub fn ssim_frames(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    check_same("ssim_frames", pred, target)?;
    if pred.rank() < 3 {
        return Err(invalid_shape("ssim_frames", pred.shape(), "expected [.., C, H, W]"));
    }
    let fshape = pred.shape()[pred.rank() - 3..].to_vec();
    let per: usize = fshape.iter().product();
    let frames = pred.len() / per;
    let mut acc = 0.0;
    for f in 0..frames {
        let p = Tensor::new(&fshape, pred.data()[f * per..(f + 1) * per].to_vec())?;
        let t = Tensor::new(&fshape, target.data()[f * per..(f + 1) * per].to_vec())?;
        acc += ssim(&p, &t, data_range)?;
    }
    Ok(acc / frames as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeadMetrics {
    pub mse: f64,
    pub mae: f64,
    /// `None` when frames are smaller than the SSIM window.
    pub ssim: Option<f64>,
    /// `None` when some target sample is identically zero.
    pub nmse: Option<f64>,
}

/// Metrics for each lead time of `[b, T, C, H, W]` forecasts.
pub fn per_lead(pred: &Tensor, target: &Tensor, red: Reduction, data_range: f64) -> Result<Vec<LeadMetrics>> {
    check_same("per_lead", pred, target)?;
    if pred.rank() != 5 {
        return Err(invalid_shape("per_lead", pred.shape(), "expected [b, T, C, H, W]"));
    }
    let t_out = pred.shape()[1];
    let (h, w) = (pred.shape()[3], pred.shape()[4]);
    (0..t_out)
        .map(|t| {
            let (p, q) = (pred.index_axis1(t), target.index_axis1(t));
            Ok(LeadMetrics {
                mse: mse(&p, &q, red)?,
                mae: mae(&p, &q, red)?,
                ssim: if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
                    Some(ssim_frames(&p, &q, data_range)?)
                } else {
                    None
                },
                nmse: nmse(&p, &q).ok(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mse_and_mae_examples() {
        let t = Tensor::randn(&[2, 3, 1, 4, 4], 1.0, &mut rng(1));
        assert_eq!(mse(&t, &t, Reduction::Mean).unwrap(), 0.0);
        let p = t.map(|v| v + 1.0);
        assert_eq!(mse(&p, &t, Reduction::Mean).unwrap(), 1.0);
        assert_eq!(mae(&p, &t, Reduction::Mean).unwrap(), 1.0);
        assert_eq!(mse(&p, &t, Reduction::SumPerFrame).unwrap(), 16.0);
        assert!(mse(&p, &Tensor::zeros(&[2, 3]), Reduction::Mean).is_err());
    }

    #[test]
    fn mse_matches_two_line_oracle() {
        let a = Tensor::randn(&[3, 5, 7], 1.0, &mut rng(2));
        let b = Tensor::randn(&[3, 5, 7], 1.0, &mut rng(3));
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((mse(&a, &b, Reduction::Mean).unwrap() - s / a.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn nmse_examples() {
        let t = Tensor::randn(&[3, 1, 4, 4], 1.0, &mut rng(4));
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&Tensor::zeros(&[3, 1, 4, 4]), &t).unwrap(), 1.0);
        assert!((nmse(&t.map(|v| 1.1 * v), &t).unwrap() - 0.01).abs() < 1e-12);
        assert!(nmse(&t, &Tensor::zeros(&[3, 1, 4, 4])).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let t = Tensor::rand_uniform(&[2, 16, 14], 0.0, 1.0, &mut rng(5));
        assert!((ssim(&t, &t, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[1, 12, 12], 0.4);
        assert!((ssim(&c, &c, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[1, 10, 12]), &Tensor::zeros(&[1, 10, 12]), 1.0).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng(6));
        let b = Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng(7));
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }

    /// Luminance × contrast × structure with `C3 = C2 / 2`, per window.
    #[test]
    fn inverted_contrast_matches_factorized_oracle() {
        let range = 1.0;
        let t = Tensor::from_fn(&[1, 14, 13], |i| {
            let (y, x) = (i[1] as f64, i[2] as f64);
            0.5 + 0.4 * (0.7 * x).sin() * (0.3 * y + 0.2).cos()
        });
        let p = t.map(|v| range - v);
        let got = ssim(&p, &t, range).unwrap();
        assert!(got < 1.0);
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let c3 = c2 / 2.0;
        let win = gaussian_window(11, 1.5);
        let mut acc = 0.0;
        let mut n = 0;
        for top in 0..=3 {
            for left in 0..=2 {
                let [mx, my, vx, vy, cxy] = window_stats(p.data(), t.data(), 13, top, left, &win, 11);
                let (sx, sy) = (vx.sqrt(), vy.sqrt());
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
                let s = (cxy + c3) / (sx * sy + c3);
                acc += l * c * s;
                n += 1;
            }
        }
        assert!((got - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn per_lead_reduction_identity() {
        let p = Tensor::rand_uniform(&[2, 4, 1, 12, 12], 0.0, 1.0, &mut rng(8));
        let t = Tensor::rand_uniform(&[2, 4, 1, 12, 12], 0.0, 1.0, &mut rng(9));
        let leads = per_lead(&p, &t, Reduction::Mean, 1.0).unwrap();
        assert_eq!(leads.len(), 4);
        let mean = leads.iter().map(|l| l.mse).sum::<f64>() / 4.0;
        assert!((mean - mse(&p, &t, Reduction::Mean).unwrap()).abs() < 1e-12);
        assert!(leads.iter().all(|l| l.ssim.is_some() && l.nmse.is_some()));
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w[0], w[120]);
    }
}
