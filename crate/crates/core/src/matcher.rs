//! Query classification against prototype sets, plus the training losses.

use crate::error::{shape_err, Error, Result};
use crate::gape::{pool_prototypes, GridSpec, PrototypeSet};
use crate::geometry::BinaryMask;
use crate::numerics::{Graph, Var, COSINE_EPS};
use crate::osb::BinPrediction;

pub const DEFAULT_ALPHA: f64 = 20.0;
pub const DEFAULT_LAMBDA_GEO: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct ScoreMaps {
    pub fg: Var,
    pub bg: Var,
    pub mask: BinaryMask,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub seg: Var,
    pub align: Var,
    pub osb: Var,
    pub total: Var,
    pub lambda_geo: f64,
}

fn cosine_stack(g: &mut Graph, feat: Var, protos: &[Var]) -> Result<Var> {
    if protos.is_empty() {
        return Err(Error::Contract("scoring needs at least one prototype".into()));
    }
    let maps = protos
        .iter()
        .map(|&p| g.cosine_map(feat, p, COSINE_EPS))
        .collect::<Result<Vec<_>>>()?;
    g.stack(&maps)
}

/// `Σ_i softmax_i(logit_i) · cos_i`, reduced over the leading prototype axis.
fn weighted_score(g: &mut Graph, cos: Var, logits: Var) -> Result<Var> {
    let w = g.softmax(logits, 0)?;
    let wc = g.mul(w, cos)?;
    g.sum_axis(wc, 0)
}

/// Softmax-weighted cosine similarity of every query pixel to a prototype list.
pub fn score(g: &mut Graph, feat_q: Var, protos: &[Var]) -> Result<Var> {
    let cos = cosine_stack(g, feat_q, protos)?;
    weighted_score(g, cos, cos)
}

fn hard_mask(g: &Graph, fg: Var, bg: Var) -> Result<BinaryMask> {
    let shape = g.shape(fg);
    let (h, w) = (shape[0], shape[1]);
    let bits = g
        .value(fg)
        .data()
        .iter()
        .zip(g.value(bg).data())
        .map(|(f, b)| f > b)
        .collect();
    BinaryMask::new(h, w, bits)
}

fn check_bg(protos: &PrototypeSet) -> Result<()> {
    if protos.bg.is_empty() {
        return Err(Error::DegenerateSupport("no background prototypes".into()));
    }
    if protos.fg.is_empty() {
        return Err(Error::DegenerateSupport("no foreground prototypes".into()));
    }
    Ok(())
}

/// Scores against enriched foreground and background prototypes; ties go to background.
pub fn classify(g: &mut Graph, feat_q: Var, protos: &PrototypeSet) -> Result<ScoreMaps> {
    check_bg(protos)?;
    let fg = score(g, feat_q, &protos.fg_enriched())?;
    let bg = score(g, feat_q, &protos.bg_protos())?;
    let mask = hard_mask(g, fg, bg)?;
    Ok(ScoreMaps { fg, bg, mask })
}

/// Like [`classify`], with foreground softmax logits gated by
/// `exp(−|ĝ(x) − d̄_i/(K−1)|/τ)` where `ĝ` is the query's normalised expected bin.
pub fn query_reweight(
    g: &mut Graph,
    feat_q: Var,
    protos: &PrototypeSet,
    pred_q: &BinPrediction,
    tau_gate: f64,
) -> Result<ScoreMaps> {
    if !(tau_gate > 0.0) {
        return Err(Error::Config(format!("tau_gate must be > 0, got {tau_gate}")));
    }
    check_bg(protos)?;
    let fs = g.shape(feat_q).to_vec();
    if fs.len() != 3 || fs[1] != pred_q.height || fs[2] != pred_q.width {
        return shape_err(format!(
            "query features {fs:?} vs bin prediction {}x{}",
            pred_q.height, pred_q.width
        ));
    }
    let kmax = (pred_q.bins - 1) as f64;
    let probs = g.value(pred_q.probs).data();
    let plane = pred_q.height * pred_q.width;
    let g_hat: Vec<f64> = (0..plane)
        .map(|i| (0..pred_q.bins).map(|k| k as f64 * probs[k * plane + i]).sum::<f64>() / kmax)
        .collect();
    let mut gates = Vec::with_capacity(protos.fg.len() * plane);
    for slot in &protos.fg {
        let d = slot.mean_bin.ok_or_else(|| {
            Error::State("query re-weighting needs mean bins on every foreground prototype".into())
        })? / kmax;
        gates.extend(g_hat.iter().map(|&gh| (-(gh - d).abs() / tau_gate).exp()));
    }
    let cos = cosine_stack(g, feat_q, &protos.fg_enriched())?;
    let logits = g.mul_const(cos, &gates)?;
    let fg = weighted_score(g, cos, logits)?;
    let bg = score(g, feat_q, &protos.bg_protos())?;
    let mask = hard_mask(g, fg, bg)?;
    Ok(ScoreMaps { fg, bg, mask })
}

/// Mean pixelwise cross-entropy of `softmax(α·S_bg, α·S_fg)` against `gt`.
pub fn seg_loss(g: &mut Graph, scores: &ScoreMaps, gt: &BinaryMask, alpha: f64) -> Result<Var> {
    let shape = g.shape(scores.fg).to_vec();
    if shape != [gt.height(), gt.width()] || g.shape(scores.bg) != shape.as_slice() {
        return shape_err(format!(
            "scores {shape:?} vs mask {}x{}",
            gt.height(),
            gt.width()
        ));
    }
    let both = g.stack(&[scores.bg, scores.fg])?;
    let logits = g.scale(both, alpha);
    let logp = g.log_softmax(logits, 0)?;
    let targets: Vec<usize> = gt.bits().iter().map(|&b| b as usize).collect();
    let w = 1.0 / targets.len() as f64;
    g.nll(logp, &targets, &vec![w; targets.len()])
}

/// Role-swapped loss: prototypes pooled from the query under its hard
/// prediction classify the support. Returns `None` when the prediction has no
/// usable foreground or background cell.
pub fn align_loss(
    g: &mut Graph,
    feat_s: Var,
    mask_s: &BinaryMask,
    feat_q: Var,
    pred_q: &BinaryMask,
    grid: &GridSpec,
    alpha: f64,
) -> Result<Option<Var>> {
    let protos = match pool_prototypes(g, feat_q, pred_q, grid) {
        Ok(p) if !p.bg.is_empty() => p,
        Ok(_) | Err(Error::DegenerateSupport(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let scores = classify(g, feat_s, &protos)?;
    seg_loss(g, &scores, mask_s, alpha).map(Some)
}

pub fn total_loss(g: &mut Graph, seg: Var, align: Var, osb: Var, lambda_geo: f64) -> Result<LossBundle> {
    if lambda_geo < 0.0 {
        return Err(Error::Config(format!("lambda_geo must be >= 0, got {lambda_geo}")));
    }
    let sa = g.add(seg, align)?;
    let geo = g.scale(osb, lambda_geo);
    let total = g.add(sa, geo)?;
    Ok(LossBundle {
        seg,
        align,
        osb,
        total,
        lambda_geo,
    })
}
