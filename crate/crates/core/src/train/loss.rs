use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::{Real, Volume};

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossGrad<T = f32> {
    pub loss: f64,
    pub grad: Volume<T>,
}

fn check<T: Real>(logits: &Volume<T>, gt: &LabelVolume) -> Result<()> {
    if logits.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "logit dims {:?} differ from label dims {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    let c = logits.channels();
    if let Some(&bad) = gt.labels().iter().find(|&&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    Ok(())
}

/// Softmax over channels for every voxel, channel-major.
pub(crate) fn softmax<T: Real>(logits: &Volume<T>) -> Vec<f64> {
    let n = logits.voxels();
    let c = logits.channels();
    let z = logits.data();
    let mut p = vec![0.0; c * n];
    for v in 0..n {
        let m = (0..c)
            .map(|k| z[k * n + v].wide())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (z[k * n + v].wide() - m).exp();
            p[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            p[k * n + v] /= s;
        }
    }
    p
}

/// Mean voxel-wise cross-entropy of softmax(logits) against `gt`.
pub fn ce_loss<T: Real>(logits: &Volume<T>, gt: &LabelVolume) -> Result<LossGrad<T>> {
    check(logits, gt)?;
    let n = logits.voxels();
    let c = logits.channels();
    let z = logits.data();
    let p = softmax(logits);
    let mut loss = 0.0;
    for (v, &l) in gt.labels().iter().enumerate() {
        let m = (0..c)
            .map(|k| z[k * n + v].wide())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = m
            + (0..c)
                .map(|k| (z[k * n + v].wide() - m).exp())
                .sum::<f64>()
                .ln();
        loss += lse - z[l as usize * n + v].wide();
    }
    let inv = 1.0 / n as f64;
    let mut grad = p;
    for (v, &l) in gt.labels().iter().enumerate() {
        grad[l as usize * n + v] -= 1.0;
    }
    let grad = grad.into_iter().map(|g| T::of(g * inv)).collect();
    Ok(LossGrad {
        loss: loss * inv,
        grad: Volume::from_parts(logits.dims().to_vec(), c, grad),
    })
}

/// `1 - mean_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)` over the
/// foreground classes 1..C.
pub fn soft_dice_loss<T: Real>(
    logits: &Volume<T>,
    gt: &LabelVolume,
    smooth: f64,
) -> Result<LossGrad<T>> {
    check(logits, gt)?;
    let n = logits.voxels();
    let c = logits.channels();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "soft Dice needs a foreground class".into(),
        ));
    }
    let p = softmax(logits);
    let labels = gt.labels();
    let fg = (c - 1) as f64;
    let mut loss = 1.0;
    // dL/dp, channel-major; background column stays zero.
    let mut dp = vec![0.0; c * n];
    for k in 1..c {
        let pk = &p[k * n..(k + 1) * n];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (v, &pv) in pk.iter().enumerate() {
            let g = (labels[v] as usize == k) as u8 as f64;
            inter += pv * g;
            psum += pv;
            gsum += g;
        }
        let num = 2.0 * inter + smooth;
        let den = psum + gsum + smooth;
        loss -= num / den / fg;
        for v in 0..n {
            let g = (labels[v] as usize == k) as u8 as f64;
            dp[k * n + v] = -(2.0 * g * den - num) / (den * den) / fg;
        }
    }
    let mut grad = vec![T::zero(); c * n];
    for v in 0..n {
        let dot: f64 = (0..c).map(|j| p[j * n + v] * dp[j * n + v]).sum();
        for k in 0..c {
            grad[k * n + v] = T::of(p[k * n + v] * (dp[k * n + v] - dot));
        }
    }
    Ok(LossGrad {
        loss,
        grad: Volume::from_parts(logits.dims().to_vec(), c, grad),
    })
}

/// Average of cross-entropy and soft Dice; the gradient is averaged too.
pub fn combined_loss<T: Real>(
    logits: &Volume<T>,
    gt: &LabelVolume,
    smooth: f64,
) -> Result<LossGrad<T>> {
    let ce = ce_loss(logits, gt)?;
    let dice = soft_dice_loss(logits, gt, smooth)?;
    let grad = ce
        .grad
        .data()
        .iter()
        .zip(dice.grad.data())
        .map(|(a, b)| T::of(0.5 * (a.wide() + b.wide())))
        .collect();
    Ok(LossGrad {
        loss: 0.5 * (ce.loss + dice.loss),
        grad: Volume::from_parts(logits.dims().to_vec(), logits.channels(), grad),
    })
}
