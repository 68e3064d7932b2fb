//! Ordinal shape branch: per-pixel distance-to-boundary bin prediction and
//! its ordinal training objective.

use crate::encoder::ConvLayer;
use crate::error::{shape_err, Error, Result};
use crate::geometry::BinMap;
use crate::numerics::{Graph, Var};
use crate::params::{Binding, ParamStore};
use rand::Rng;

/// Upper clamp on `max_k p̂_k` inside `log(1 − max p̂)`.
pub const MAX_PROB_CLAMP: f64 = 1.0 - 1e-12;

/// Decoder `C → C → C → K`: two 3×3 conv + ReLU, then a 1×1 head.
#[derive(Clone, Debug)]
pub struct OsbParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: ConvLayer,
    pub bins: usize,
}

impl OsbParams {
    pub fn init(store: &mut ParamStore, channels: usize, bins: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvLayer::init(store, "osb.conv1", channels, channels, 3, 1, rng),
            conv2: ConvLayer::init(store, "osb.conv2", channels, channels, 3, 1, rng),
            head: ConvLayer::init(store, "osb.head", channels, bins, 1, 1, rng),
            bins,
        }
    }
}

/// Bin logits, their softmax over the bin axis, and the hard argmax map.
#[derive(Clone, Debug)]
pub struct BinPrediction {
    pub logits: Var,
    pub probs: Var,
    /// Per-pixel argmax of `probs`; lowest index wins ties.
    pub hard: Vec<usize>,
    pub bins: usize,
    pub height: usize,
    pub width: usize,
}

impl BinPrediction {
    /// Wraps logits `[K×h×w]` already on the graph.
    pub fn from_logits(g: &mut Graph, logits: Var) -> Result<Self> {
        let shape = g.shape(logits).to_vec();
        if shape.len() != 3 || shape[0] < 2 {
            return shape_err(format!("bin logits must be Kxhxw with K>=2, got {shape:?}"));
        }
        let (k, h, w) = (shape[0], shape[1], shape[2]);
        let probs = g.softmax(logits, 0)?;
        let p = g.value(probs).data();
        let plane = h * w;
        let hard = (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if p[c * plane + i] > p[best * plane + i] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Ok(Self {
            logits,
            probs,
            hard,
            bins: k,
            height: h,
            width: w,
        })
    }

    fn check_against(&self, gt: &BinMap) -> Result<usize> {
        if gt.height() != self.height || gt.width() != self.width || gt.k() != self.bins {
            return shape_err(format!(
                "prediction {}x{}x{} vs ground truth {}x{}x{}",
                self.bins,
                self.height,
                self.width,
                gt.k(),
                gt.height(),
                gt.width()
            ));
        }
        let n = gt.foreground_count();
        if n == 0 {
            return Err(Error::EmptyRegion("bin supervision needs foreground".into()));
        }
        Ok(n)
    }
}

pub fn predict_bins(g: &mut Graph, b: &Binding, params: &OsbParams, feat: Var) -> Result<BinPrediction> {
    let x = params.conv1.forward(g, b, feat)?;
    let x = g.relu(x);
    let x = params.conv2.forward(g, b, x)?;
    let x = g.relu(x);
    let logits = params.head.forward(g, b, x)?;
    BinPrediction::from_logits(g, logits)
}

/// Foreground cross-entropy `−β Σ_Ω log p̂_{z(x)}(x)` with `β = 1/(2|Ω|)`.
pub fn loss_cls(g: &mut Graph, pred: &BinPrediction, gt: &BinMap) -> Result<Var> {
    let n = pred.check_against(gt)?;
    let beta = 1.0 / (2.0 * n as f64);
    let targets: Vec<usize> = gt.bins().iter().map(|&z| z.max(0) as usize).collect();
    let weights: Vec<f64> = gt
        .bins()
        .iter()
        .map(|&z| if z >= 0 { beta } else { 0.0 })
        .collect();
    let logp = g.log_softmax(pred.logits, 0)?;
    g.nll(logp, &targets, &weights)
}

/// Ordinal-gap penalty `−β Σ_Ω (|ẑ−z|/K) · log(1 − max_k p̂_k)`.
///
/// The gap factor is a constant weight; gradient flows through the log term only.
pub fn loss_dist(g: &mut Graph, pred: &BinPrediction, gt: &BinMap) -> Result<Var> {
    let n = pred.check_against(gt)?;
    let beta = 1.0 / (2.0 * n as f64);
    let k = pred.bins as f64;
    let weights: Vec<f64> = gt
        .bins()
        .iter()
        .zip(&pred.hard)
        .map(|(&z, &zh)| {
            if z >= 0 {
                -beta * (zh as f64 - z as f64).abs() / k
            } else {
                0.0
            }
        })
        .collect();
    let top = g.max_axis(pred.probs, 0)?;
    let rest = g.affine(top, -1.0, 1.0);
    let rest = g.clamp_min(rest, 1.0 - MAX_PROB_CLAMP);
    let log_rest = g.log(rest);
    g.weighted_sum(log_rest, &weights)
}

/// `L_cls + λ_dist · L_dist`.
pub fn loss_osb(g: &mut Graph, pred: &BinPrediction, gt: &BinMap, lambda_dist: f64) -> Result<Var> {
    if lambda_dist < 0.0 {
        return Err(Error::Config(format!("lambda_dist must be >= 0, got {lambda_dist}")));
    }
    let cls = loss_cls(g, pred, gt)?;
    let dist = loss_dist(g, pred, gt)?;
    let dist = g.scale(dist, lambda_dist);
    g.add(cls, dist)
}

/// Mean `|ẑ − z|` over the foreground.
pub fn bin_mae(pred: &BinPrediction, gt: &BinMap) -> Result<f64> {
    let n = pred.check_against(gt)?;
    let total: f64 = gt
        .bins()
        .iter()
        .zip(&pred.hard)
        .filter(|(&z, _)| z >= 0)
        .map(|(&z, &zh)| (zh as f64 - z as f64).abs())
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    /// Single-pixel (1×1) prediction with the given probabilities.
    fn pixel_pred(g: &mut Graph, probs: &[f64]) -> BinPrediction {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let k = probs.len();
        let v = g.param(Tensor::new(&[k, 1, 1], logits).unwrap());
        BinPrediction::from_logits(g, v).unwrap()
    }

    fn pixel_gt(k: usize, z: i32) -> BinMap {
        BinMap::new(1, 1, k, vec![z]).unwrap()
    }

    #[test]
    fn equal_logits_are_uniform_with_bin_zero() {
        let mut g = Graph::new();
        let v = g.param(Tensor::zeros(&[4, 2, 2]));
        let p = BinPrediction::from_logits(&mut g, v).unwrap();
        assert!(g.value(p.probs).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(p.hard, vec![0; 4]);
    }

    #[test]
    fn dominant_logit_wins() {
        let mut g = Graph::new();
        let mut logits = vec![0.0; 3];
        logits[2] = 100.0;
        let v = g.param(Tensor::new(&[3, 1, 1], logits).unwrap());
        let p = BinPrediction::from_logits(&mut g, v).unwrap();
        assert_eq!(p.hard, vec![2]);
        assert!(g.value(p.probs).data()[2] > 1.0 - 1e-15);
    }

    #[test]
    fn cls_uniform_single_pixel() {
        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &[0.1; 10]);
        let l = loss_cls(&mut g, &p, &pixel_gt(10, 3)).unwrap();
        assert!((g.value(l).item() - 0.5 * 10f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 1.1513).abs() < 1e-4);
    }

    #[test]
    fn dist_examples() {
        let mut probs = vec![0.2 / 9.0; 10];
        probs[7] = 0.8;
        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &probs);
        assert_eq!(p.hard, vec![7]);
        let l = loss_dist(&mut g, &p, &pixel_gt(10, 4)).unwrap();
        let expected = 0.5 * 0.3 * -(0.2f64.ln());
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((g.value(l).item() - 0.2414).abs() < 1e-4);

        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &[0.1; 10]);
        assert_eq!(p.hard, vec![0]);
        let l = loss_dist(&mut g, &p, &pixel_gt(10, 9)).unwrap();
        assert!((g.value(l).item() - 0.5 * 0.9 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((g.value(l).item() - 0.0474).abs() < 1e-4);
    }

    #[test]
    fn zero_gap_means_zero_dist() {
        let mut probs = vec![0.05; 5];
        probs[2] = 0.8;
        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &probs);
        let l = loss_dist(&mut g, &p, &pixel_gt(5, 2)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn osb_combines_terms() {
        let mut probs = vec![0.2 / 9.0; 10];
        probs[7] = 0.8;
        let gt = pixel_gt(10, 4);
        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &probs);
        let cls = loss_cls(&mut g, &p, &gt).unwrap();
        let dist = loss_dist(&mut g, &p, &gt).unwrap();
        let both = loss_osb(&mut g, &p, &gt, 1.0).unwrap();
        let only_cls = loss_osb(&mut g, &p, &gt, 0.0).unwrap();
        assert!((g.value(both).item() - g.value(cls).item() - g.value(dist).item()).abs() < 1e-15);
        assert_eq!(g.value(only_cls).item(), g.value(cls).item());
        assert!(matches!(loss_osb(&mut g, &p, &gt, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_foreground_is_rejected() {
        let mut g = Graph::new();
        let p = pixel_pred(&mut g, &[0.5, 0.5]);
        let gt = BinMap::new(1, 1, 2, vec![-1]).unwrap();
        assert!(matches!(loss_cls(&mut g, &p, &gt), Err(Error::EmptyRegion(_))));
        assert!(matches!(loss_dist(&mut g, &p, &gt), Err(Error::EmptyRegion(_))));
        assert!(matches!(bin_mae(&p, &gt), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn mae_examples() {
        let mut g = Graph::new();
        // two pixels, hard bins (0, 3) against gt (0, 0)
        let logits = vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0];
        let v = g.param(Tensor::new(&[4, 1, 2], logits).unwrap());
        let p = BinPrediction::from_logits(&mut g, v).unwrap();
        assert_eq!(p.hard, vec![0, 3]);
        let gt = BinMap::new(1, 2, 4, vec![0, 0]).unwrap();
        assert_eq!(bin_mae(&p, &gt).unwrap(), 1.5);
        let exact = BinMap::new(1, 2, 4, vec![0, 3]).unwrap();
        assert_eq!(bin_mae(&p, &exact).unwrap(), 0.0);
        let off = BinMap::new(1, 2, 4, vec![1, 2]).unwrap();
        assert_eq!(bin_mae(&p, &off).unwrap(), 1.0);
    }
}
