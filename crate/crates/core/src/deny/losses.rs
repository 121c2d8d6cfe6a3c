//! Loss functions on logit batches, each returning its value and its exact
//! gradient with respect to the logits it consumed. All losses are batch means.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Gradients of a loss that reads two logit batches (correct-key and invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct PairLossGrad {
    pub value: f64,
    pub grad_ok: Array2<f64>,
    pub grad_invalid: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxLossGrad {
    pub value: f64,
    pub grad_invalid: Array1<f64>,
    pub grad_authorized: Array1<f64>,
}

/// Row-wise log-softmax.
pub fn log_softmax(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(z: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(z).mapv(f64::exp)
}

/// Shannon entropy `−Σ p log p` of a probability vector (0·log 0 = 0).
pub fn entropy(p: ArrayView1<f64>) -> Result<f64> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Numerical("entropy of a vector with negative entries".into()));
    }
    let s = p.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Numerical(format!("entropy of a vector summing to {s}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Per-row entropies of `softmax(z)` and `∂(−H)/∂z = p ⊙ (log p + H)`.
fn neg_entropy_rows(z: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let logp = log_softmax(z);
    let p = logp.mapv(f64::exp);
    let h: Array1<f64> = (&p * &logp).sum_axis(Axis(1)).mapv(|v| -v);
    let mut grad = logp;
    for ((mut g, pr), &hi) in grad.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(h.iter()) {
        g.zip_mut_with(&pr, |g, &p| *g = p * (*g + hi));
    }
    (h, grad)
}

/// Mean entropy of `softmax(z)` over the rows.
pub fn mean_entropy(z: ArrayView2<f64>) -> f64 {
    let (h, _) = neg_entropy_rows(z);
    h.mean().unwrap_or(0.0)
}

fn check_nonempty(z: &ArrayView2<f64>) -> Result<usize> {
    let n = z.nrows();
    if n == 0 || z.ncols() == 0 {
        return Err(Error::Dimension("empty logit batch".into()));
    }
    Ok(n)
}

fn check_labels(y: &[usize], n: usize, classes: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::Dimension(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(z)` against integer targets.
pub fn cross_entropy(z: ArrayView2<f64>, y: &[usize]) -> Result<LossGrad> {
    let n = check_nonempty(&z)?;
    check_labels(y, n, z.ncols())?;
    let logp = log_softmax(z);
    let mut value = 0.0;
    let mut grad = logp.mapv(f64::exp);
    for (i, &c) in y.iter().enumerate() {
        value -= logp[[i, c]];
        grad[[i, c]] -= 1.0;
    }
    grad /= n as f64;
    Ok(LossGrad { value: value / n as f64, grad })
}

/// Mode A: `−E[H(softmax(z))]`.
pub fn loss_a(z: ArrayView2<f64>) -> Result<LossGrad> {
    let n = check_nonempty(&z)? as f64;
    let (h, mut grad) = neg_entropy_rows(z);
    grad /= n;
    Ok(LossGrad { value: -h.sum() / n, grad })
}

/// Squared entropy-gap hinge `E[(max{0, log C − H − gap})²]`.
pub fn loss_a_soft(z: ArrayView2<f64>, gap: f64) -> Result<LossGrad> {
    let n = check_nonempty(&z)? as f64;
    let h_max = (z.ncols() as f64).ln();
    let (h, mut grad) = neg_entropy_rows(z);
    let mut value = 0.0;
    for (mut g, &hi) in grad.axis_iter_mut(Axis(0)).zip(h.iter()) {
        let s = h_max - hi - gap;
        if s > 0.0 {
            value += s * s;
            g *= 2.0 * s / n;
        } else {
            g.fill(0.0);
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// Mode B: cross-entropy toward the last (reject) index.
pub fn loss_b(z: ArrayView2<f64>) -> Result<LossGrad> {
    let n = check_nonempty(&z)?;
    let reject = vec![z.ncols() - 1; n];
    cross_entropy(z, &reject)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with logits against a constant target.
pub fn bce_with_logits(r: ArrayView1<f64>, target: f64) -> Result<(f64, Array1<f64>)> {
    let n = r.len();
    if n == 0 {
        return Err(Error::Dimension("empty reject-logit batch".into()));
    }
    let value = r.iter().map(|&x| softplus(x) - target * x).sum::<f64>() / n as f64;
    let grad = r.mapv(|x| (sigmoid(x) - target) / n as f64);
    Ok((value, grad))
}

/// Auxiliary reject head: BCE toward 1 on invalid forwards plus BCE toward 0
/// on authorized forwards.
pub fn loss_b_aux(r_invalid: ArrayView1<f64>, r_authorized: ArrayView1<f64>) -> Result<AuxLossGrad> {
    let (vi, gi) = bce_with_logits(r_invalid, 1.0)?;
    let (va, ga) = bce_with_logits(r_authorized, 0.0)?;
    Ok(AuxLossGrad { value: vi + va, grad_invalid: gi, grad_authorized: ga })
}

/// Mode C: `E[max(0, m − (z^ok_y − z^w_y))]`.
pub fn loss_c(z_ok: ArrayView2<f64>, z_w: ArrayView2<f64>, y: &[usize], margin: f64) -> Result<PairLossGrad> {
    let n = check_nonempty(&z_ok)?;
    if z_w.dim() != z_ok.dim() {
        return Err(Error::Dimension("paired forwards differ in shape".into()));
    }
    check_labels(y, n, z_ok.ncols())?;
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_ok = Array2::zeros(z_ok.raw_dim());
    let mut grad_w = Array2::zeros(z_w.raw_dim());
    for (i, &c) in y.iter().enumerate() {
        let h = margin - (z_ok[[i, c]] - z_w[[i, c]]);
        if h > 0.0 {
            value += h;
            grad_ok[[i, c]] = -inv;
            grad_w[[i, c]] = inv;
        }
    }
    Ok(PairLossGrad { value: value * inv, grad_ok, grad_invalid: grad_w })
}

/// Mode C plus a hinge that keeps the wrong-key true-class logit at least
/// `margin` below the best competing semantic logit:
/// `max(0, m − (max_{c≠y} z^w_c − z^w_y))`. Competitors range over the first
/// `num_classes` columns.
pub fn loss_cplus(
    z_ok: ArrayView2<f64>,
    z_w: ArrayView2<f64>,
    y: &[usize],
    margin: f64,
    num_classes: usize,
) -> Result<PairLossGrad> {
    let mut out = loss_c(z_ok, z_w, y, margin)?;
    let n = y.len();
    if num_classes < 2 || num_classes > z_w.ncols() {
        return Err(Error::Dimension(format!("{num_classes} semantic classes in {} logits", z_w.ncols())));
    }
    let inv = 1.0 / n as f64;
    let mut extra = 0.0;
    for (i, &c) in y.iter().enumerate() {
        let (best, best_val) = (0..num_classes)
            .filter(|&j| j != c)
            .map(|j| (j, z_w[[i, j]]))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        let h = margin - (best_val - z_w[[i, c]]);
        if h > 0.0 {
            extra += h;
            out.grad_invalid[[i, best]] -= inv;
            out.grad_invalid[[i, c]] += inv;
        }
    }
    out.value += extra * inv;
    Ok(out)
}

/// `½ A_soft(z_invalid) + ½ C(z_ok, z_w)`.
pub fn loss_ac(
    z_invalid: ArrayView2<f64>,
    z_ok: ArrayView2<f64>,
    z_w: ArrayView2<f64>,
    y: &[usize],
    margin: f64,
    gap: f64,
) -> Result<PairLossGrad> {
    let a = loss_a_soft(z_invalid, gap)?;
    let c = loss_c(z_ok, z_w, y, margin)?;
    if a.grad.dim() != c.grad_invalid.dim() {
        return Err(Error::Dimension("A_soft and C read different logit shapes".into()));
    }
    Ok(PairLossGrad {
        value: 0.5 * a.value + 0.5 * c.value,
        grad_ok: c.grad_ok * 0.5,
        grad_invalid: (a.grad + c.grad_invalid) * 0.5,
    })
}
