//! Pixel losses for channel supervision, detection-head losses and the
//! weighted total.
//!
//! Every loss has a plain form returning the scalar and a `*_var` form that
//! records it on a [`Graph`] with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::channels::{ChannelKind, ChannelMap};
use crate::error::{Error, Result};
use crate::heads::CLASS_COUNT;
use crate::tensor::Tensor;

/// Probability clamp for log terms.
pub const PROB_EPS: f64 = 1e-7;
/// Smooth-L1 transition point for RPN regression.
pub const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 transition point for FRCNN regression.
pub const FRCNN_SMOOTH_L1_BETA: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{}: prediction {:?} vs supervisor {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Class-balanced binary cross-entropy, averaged over pixels and channels.
/// `β` is computed per channel plane from the count of supervisor values
/// above 0.5.
pub fn balanced_bce_with_grad(c: &Tensor, s: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(c, s, "balanced_bce")?;
    let (ch, h, w) = c.dims3()?;
    let n = h * w;
    let mut grad = Tensor::zeros(c.shape());
    let mut total = 0.0;
    for k in 0..ch {
        let sp = &s.data()[k * n..(k + 1) * n];
        let cp = &c.data()[k * n..(k + 1) * n];
        let pos = sp.iter().filter(|&&v| v > 0.5).count() as f64;
        let beta_pos = 1.0 - pos / n as f64;
        let beta_neg = pos / n as f64;
        let scale = 1.0 / (n * ch) as f64;
        let g = &mut grad.data_mut()[k * n..(k + 1) * n];
        let mut plane = 0.0;
        for i in 0..n {
            let p = sp[i];
            let beta = if p > 0.5 { beta_pos } else { beta_neg };
            let q = cp[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            plane += beta * (-p * q.ln() - (1.0 - p) * (1.0 - q).ln());
            if cp[i] > PROB_EPS && cp[i] < 1.0 - PROB_EPS {
                g[i] = scale * beta * (-p / q + (1.0 - p) / (1.0 - q));
            }
        }
        total += plane / n as f64;
    }
    Ok((total / ch as f64, grad))
}

pub fn balanced_bce(c: &Tensor, s: &Tensor) -> Result<f64> {
    balanced_bce_with_grad(c, s).map(|r| r.0)
}

pub fn balanced_bce_var(g: &mut Graph, c: Var, s: &Tensor) -> Result<Var> {
    let (v, grad) = balanced_bce_with_grad(g.value(c), s)?;
    Ok(g.scalar_with_grads(&[c], v, vec![grad]))
}

/// Mean over pixels of `−ln C[S]` for a K×H×W distribution and integer
/// codes S (1×H×W).
pub fn pixel_ce_with_grad(c: &Tensor, s: &Tensor) -> Result<(f64, Tensor)> {
    let (k, h, w) = c.dims3()?;
    let (sc, sh, sw) = s.dims3()?;
    if sc != 1 || (sh, sw) != (h, w) {
        return Err(Error::Shape(format!(
            "pixel_ce: prediction {:?} vs labels {:?}",
            c.shape(),
            s.shape()
        )));
    }
    let n = h * w;
    let mut grad = Tensor::zeros(c.shape());
    let mut total = 0.0;
    for (i, &lv) in s.data().iter().enumerate() {
        if lv < 0.0 || lv.fract() != 0.0 || lv as usize >= k {
            return Err(Error::LabelOutOfRange {
                label: lv.max(0.0) as usize,
                class_count: k,
            });
        }
        let idx = lv as usize * n + i;
        let raw = c.data()[idx];
        let q = raw.clamp(PROB_EPS, 1.0);
        total -= q.ln();
        if raw > PROB_EPS {
            grad.data_mut()[idx] = -1.0 / (q * n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

pub fn pixel_ce(c: &Tensor, s: &Tensor) -> Result<f64> {
    pixel_ce_with_grad(c, s).map(|r| r.0)
}

pub fn pixel_ce_var(g: &mut Graph, c: Var, s: &Tensor) -> Result<Var> {
    let (v, grad) = pixel_ce_with_grad(g.value(c), s)?;
    Ok(g.scalar_with_grads(&[c], v, vec![grad]))
}

pub fn pixel_mse_with_grad(c: &Tensor, s: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(c, s, "pixel_mse")?;
    let n = c.len() as f64;
    let mut grad = Tensor::zeros(c.shape());
    let mut total = 0.0;
    for (i, (a, b)) in c.data().iter().zip(s.data()).enumerate() {
        let r = a - b;
        total += r * r;
        grad.data_mut()[i] = 2.0 * r / n;
    }
    Ok((total / n, grad))
}

pub fn pixel_mse(c: &Tensor, s: &Tensor) -> Result<f64> {
    pixel_mse_with_grad(c, s).map(|r| r.0)
}

pub fn pixel_mse_var(g: &mut Graph, c: Var, s: &Tensor) -> Result<Var> {
    let (v, grad) = pixel_mse_with_grad(g.value(c), s)?;
    Ok(g.scalar_with_grads(&[c], v, vec![grad]))
}

/// Loss selected by the supervisor's kind.
pub fn pixel_loss_var(g: &mut Graph, c: Var, supervisor: &ChannelMap) -> Result<Var> {
    match supervisor.kind {
        ChannelKind::Binary => balanced_bce_var(g, c, &supervisor.data),
        ChannelKind::Multiclass { .. } => pixel_ce_var(g, c, &supervisor.data),
        ChannelKind::Regression => pixel_mse_var(g, c, &supervisor.data),
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Sigmoid cross-entropy of `A×1` objectness logits over the sampled
/// anchors, averaged over the sample.
pub fn rpn_cls_var(g: &mut Graph, logits: Var, positives: &[usize], negatives: &[usize]) -> Result<Var> {
    let x = g.value(logits);
    let count = positives.len() + negatives.len();
    let mut grad = Tensor::zeros(x.shape());
    if count == 0 {
        return Ok(g.scalar_with_grads(&[logits], 0.0, vec![grad]));
    }
    let mut total = 0.0;
    for (idx, y) in positives.iter().map(|&i| (i, 1.0)).chain(negatives.iter().map(|&i| (i, 0.0))) {
        let v = *x
            .data()
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("anchor {} out of range", idx)))?;
        total += v.max(0.0) - v * y + (-v.abs()).exp().ln_1p();
        grad.data_mut()[idx] += (crate::autograd::sigmoid(v) - y) / count as f64;
    }
    Ok(g.scalar_with_grads(&[logits], total / count as f64, vec![grad]))
}

/// Smooth-L1 between `A×4` deltas and targets on positive anchors,
/// normalized by the sampled anchor count.
pub fn rpn_bbox_var(g: &mut Graph, deltas: Var, positives: &[usize], targets: &[[f64; 4]], sampled: usize) -> Result<Var> {
    let d = g.value(deltas);
    let mut grad = Tensor::zeros(d.shape());
    if positives.is_empty() || sampled == 0 {
        return Ok(g.scalar_with_grads(&[deltas], 0.0, vec![grad]));
    }
    if targets.len() != positives.len() {
        return Err(Error::Shape("one regression target per positive anchor".into()));
    }
    let mut total = 0.0;
    for (&i, t) in positives.iter().zip(targets) {
        for k in 0..4 {
            let (v, dv) = smooth_l1(d.data()[4 * i + k] - t[k], RPN_SMOOTH_L1_BETA);
            total += v;
            grad.data_mut()[4 * i + k] = dv / sampled as f64;
        }
    }
    Ok(g.scalar_with_grads(&[deltas], total / sampled as f64, vec![grad]))
}

/// Softmax cross-entropy over `N×3` class logits, averaged over RoIs.
pub fn frcnn_cls_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = g.value(logits).dims2()?;
    if n != labels.len() || k != CLASS_COUNT {
        return Err(Error::Shape(format!("frcnn logits {}×{} for {} labels", n, k, labels.len())));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    if n == 0 {
        return Ok(g.scalar_with_grads(&[logits], 0.0, vec![grad]));
    }
    let probs = crate::heads::softmax_rows(g.value(logits));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, class_count: k });
        }
        let row = &g.value(logits).data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for c in 0..k {
            let ind = if c == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + c] = (probs.data()[i * k + c] - ind) / n as f64;
        }
    }
    Ok(g.scalar_with_grads(&[logits], total / n as f64, vec![grad]))
}

/// Smooth-L1 between the class-specific slice of `N×12` deltas and `N×4`
/// targets on foreground RoIs, normalized by the RoI count. Gradients reach
/// both inputs.
pub fn frcnn_bbox_var(g: &mut Graph, deltas: Var, targets: Var, labels: &[usize]) -> Result<Var> {
    let (n, dk) = g.value(deltas).dims2()?;
    let (tn, tk) = g.value(targets).dims2()?;
    if dk != 4 * CLASS_COUNT || tk != 4 || tn != n || labels.len() != n {
        return Err(Error::Shape("frcnn bbox loss expects N×12 deltas and N×4 targets".into()));
    }
    let mut gd = Tensor::zeros(&[n, dk]);
    let mut gt = Tensor::zeros(&[n, 4]);
    let mut total = 0.0;
    if n > 0 {
        let d = g.value(deltas).data();
        let t = g.value(targets).data();
        for (i, &y) in labels.iter().enumerate() {
            if y == 0 {
                continue;
            }
            for k in 0..4 {
                let (v, dv) = smooth_l1(d[i * dk + 4 * y + k] - t[i * 4 + k], FRCNN_SMOOTH_L1_BETA);
                total += v;
                gd.data_mut()[i * dk + 4 * y + k] = dv / n as f64;
                gt.data_mut()[i * 4 + k] = -dv / n as f64;
            }
        }
        total /= n as f64;
    }
    Ok(g.scalar_with_grads(&[deltas, targets], total, vec![gd, gt]))
}

/// λ₁..λ₄ for the RPN and FRCNN terms; the channel term has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_bbox: f64,
    pub frcnn_cls: f64,
    pub frcnn_bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_bbox: 1.0,
            frcnn_cls: 1.0,
            frcnn_bbox: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(rpn_cls: f64, rpn_bbox: f64, frcnn_cls: f64, frcnn_bbox: f64) -> Result<Self> {
        let w = LossWeights {
            rpn_cls,
            rpn_bbox,
            frcnn_cls,
            frcnn_bbox,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rpn_cls, self.rpn_bbox, self.frcnn_cls, self.frcnn_bbox];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {:?}", all)));
        }
        Ok(())
    }
}

/// `L_cfn + λ₁L_rpn_cls + λ₂L_rpn_bbox + λ₃L_frcnn_cls + λ₄L_frcnn_bbox`.
pub fn total_loss(cfn: f64, rpn_cls: f64, rpn_bbox: f64, frcnn_cls: f64, frcnn_bbox: f64, w: &LossWeights) -> f64 {
    cfn + w.rpn_cls * rpn_cls + w.rpn_bbox * rpn_bbox + w.frcnn_cls * frcnn_cls + w.frcnn_bbox * frcnn_bbox
}

/// The five loss terms; inactive terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cfn: Option<Var>,
    pub rpn_cls: Option<Var>,
    pub rpn_bbox: Option<Var>,
    pub frcnn_cls: Option<Var>,
    pub frcnn_bbox: Option<Var>,
}

impl LossTerms {
    pub fn total_var(&self, g: &mut Graph, w: &LossWeights) -> Option<Var> {
        let terms: Vec<(Var, f64)> = [
            (self.cfn, 1.0),
            (self.rpn_cls, w.rpn_cls),
            (self.rpn_bbox, w.rpn_bbox),
            (self.frcnn_cls, w.frcnn_cls),
            (self.frcnn_bbox, w.frcnn_bbox),
        ]
        .into_iter()
        .filter_map(|(v, k)| v.map(|v| (v, k)))
        .collect();
        (!terms.is_empty()).then(|| g.weighted_sum(&terms))
    }
}
