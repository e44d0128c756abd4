//! Photometric and regularization losses, plus flow accuracy metrics.
//!
//! Every differentiable loss returns its value together with the analytic
//! gradient with respect to the quantity being optimized (the flow field for
//! the data and smoothness terms, the reconstructed image for SSIM). All
//! reductions are sequential so results do not depend on thread count.

use std::fmt;

use crate::error::{Error, Result};
use crate::fields::{warp_with_jacobian, FlowField, Image, Mask};

/// Side length and stride of the SSIM patches.
pub const SSIM_PATCH: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 1e-3;

pub const CENSUS_ALPHA: f64 = 0.45;
pub const CENSUS_EPSILON: f64 = 0.001;

/// Outlier thresholds: absolute endpoint error in pixels and fraction of
/// the ground-truth magnitude.
pub const FL_ABS_THRESHOLD: f64 = 3.0;
pub const FL_REL_THRESHOLD: f64 = 0.05;

pub const DEFAULT_SCALE_WEIGHTS: [f64; 5] = [0.16, 0.08, 0.04, 0.02, 0.01];

/// Term weights and Charbonnier parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Per-scale weights, coarsest first.
    pub delta: Vec<f64>,
    pub alpha_pixel: f64,
    pub alpha_smooth: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 1.0,
            delta: DEFAULT_SCALE_WEIGHTS.to_vec(),
            alpha_pixel: 0.45,
            alpha_smooth: 0.45,
            epsilon: 0.001,
        }
    }
}

impl LossWeights {
    /// Exponents 0.4 (data) and 0.3 (smoothness).
    pub fn with_split_alphas() -> Self {
        Self {
            alpha_pixel: 0.4,
            alpha_smooth: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2, self.lambda3];
        if weights
            .iter()
            .chain(&self.delta)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "Charbonnier epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        for (name, a) in [("alpha_pixel", self.alpha_pixel), ("alpha_smooth", self.alpha_smooth)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

/// One named term of an objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
}

impl LossTerm {
    pub fn weighted(&self) -> f64 {
        self.weight * self.raw
    }
}

/// Named loss terms and their weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(terms: Vec<LossTerm>) -> Self {
        let total = terms.iter().map(LossTerm::weighted).sum();
        Self { terms, total }
    }

    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.terms {
            writeln!(f, "{}={}", t.name, t.raw)?;
            writeln!(f, "{}_weight={}", t.name, t.weight)?;
        }
        writeln!(f, "total={}", self.total)
    }
}

/// Generalized Charbonnier penalty `(x^2 + eps^2)^alpha`.
#[inline]
pub fn charbonnier(x: f64, alpha: f64, epsilon: f64) -> f64 {
    (x * x + epsilon * epsilon).powf(alpha)
}

/// Derivative of [`charbonnier`] with respect to `x`.
#[inline]
pub fn charbonnier_grad(x: f64, alpha: f64, epsilon: f64) -> f64 {
    2.0 * alpha * x * (x * x + epsilon * epsilon).powf(alpha - 1.0)
}

fn check_pair(i1: &Image, i2: &Image, flow: &FlowField) -> Result<()> {
    i1.ensure_same_shape(i2)?;
    flow.ensure_dims(i1.width(), i1.height())
}

/// Per-pixel data penalty: Charbonnier of `i1 - warp(i2, flow)` averaged
/// over channels.
pub fn pixel_loss_map(i1: &Image, i2: &Image, flow: &FlowField, w: &LossWeights) -> Result<Vec<f64>> {
    check_pair(i1, i2, flow)?;
    let rec = crate::fields::inverse_warp(i2, flow)?;
    let c = i1.channels();
    Ok(i1
        .data()
        .chunks_exact(c)
        .zip(rec.data().chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| charbonnier(x - y, w.alpha_pixel, w.epsilon))
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Mean Charbonnier reconstruction error and its gradient w.r.t. the flow.
pub fn pixel_loss(
    i1: &Image,
    i2: &Image,
    flow: &FlowField,
    w: &LossWeights,
) -> Result<(f64, FlowField)> {
    masked_pixel_loss(i1, i2, flow, w, None).map(|(l, g, _)| (l, g))
}

/// Data term averaged over the pixels where `exclude` is false.
///
/// Returns the loss, its flow gradient, and whether no pixel survived the
/// mask (in which case the loss and gradient are zero).
pub fn masked_pixel_loss(
    i1: &Image,
    i2: &Image,
    flow: &FlowField,
    w: &LossWeights,
    exclude: Option<&Mask>,
) -> Result<(f64, FlowField, bool)> {
    check_pair(i1, i2, flow)?;
    if let Some(m) = exclude {
        if m.dims() != flow.dims() {
            return Err(Error::shape(
                format!("{}x{}", flow.width(), flow.height()),
                format!("mask {}x{}", m.width(), m.height()),
            ));
        }
    }
    let (rec, jac) = warp_with_jacobian(i2, flow)?;
    let c = i1.channels();
    let n = i1.pixel_count();
    let kept = exclude.map_or(n, |m| n - m.count());
    let mut grad = FlowField::zeros(flow.width(), flow.height());
    if kept == 0 {
        return Ok((0.0, grad, true));
    }
    let norm = 1.0 / (kept * c) as f64;
    let mut total = 0.0;
    let (a, b) = (i1.data(), rec.data());
    for p in 0..n {
        if exclude.is_some_and(|m| m.flags()[p]) {
            continue;
        }
        let (mut gu, mut gv) = (0.0, 0.0);
        for ch in 0..c {
            let k = p * c + ch;
            let r = a[k] - b[k];
            total += charbonnier(r, w.alpha_pixel, w.epsilon);
            let d = charbonnier_grad(r, w.alpha_pixel, w.epsilon);
            gu -= d * jac.du[k];
            gv -= d * jac.dv[k];
        }
        grad.u_mut()[p] = gu * norm;
        grad.v_mut()[p] = gv * norm;
    }
    Ok((total * norm, grad, false))
}

/// Charbonnier penalty on first (`order = 1`) or second (`order = 2`)
/// finite differences of both flow components along both axes.
///
/// Differences that would reach past the border are omitted; the loss is
/// the mean over all remaining difference terms.
pub fn smoothness_loss(flow: &FlowField, w: &LossWeights, order: u8) -> Result<(f64, FlowField)> {
    if order != 1 && order != 2 {
        return Err(Error::invalid(format!(
            "smoothness order must be 1 or 2, got {order}"
        )));
    }
    let (width, height) = flow.dims();
    let mut grad = FlowField::zeros(width, height);
    let (a, e) = (w.alpha_smooth, w.epsilon);
    let o = order as usize;
    let terms_x = width.saturating_sub(o) * height;
    let terms_y = width * height.saturating_sub(o);
    let count = 2 * (terms_x + terms_y);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    let mut penalize = |field: &[f64], g: &mut [f64], i: usize, stride: usize| {
        if o == 1 {
            let d = field[i + stride] - field[i];
            total += charbonnier(d, a, e);
            let gd = charbonnier_grad(d, a, e);
            g[i + stride] += gd;
            g[i] -= gd;
        } else {
            let d = field[i + 2 * stride] - 2.0 * field[i + stride] + field[i];
            total += charbonnier(d, a, e);
            let gd = charbonnier_grad(d, a, e);
            g[i + 2 * stride] += gd;
            g[i + stride] -= 2.0 * gd;
            g[i] += gd;
        }
    };
    for (field, is_u) in [(flow.u(), true), (flow.v(), false)] {
        let g = if is_u { grad.u_mut() } else { grad.v_mut() };
        for y in 0..height {
            for x in 0..width.saturating_sub(o) {
                penalize(field, g, y * width + x, 1);
            }
        }
        for y in 0..height.saturating_sub(o) {
            for x in 0..width {
                penalize(field, g, y * width + x, width);
            }
        }
    }
    let norm = 1.0 / count as f64;
    grad.scale(norm);
    Ok((total * norm, grad))
}

#[derive(Clone, Copy, Debug)]
struct PatchMoments {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> PatchMoments {
    let n = pairs.clone().count() as f64;
    let (sx, sy) = pairs.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mu_x, mu_y) = (sx / n, sy / n);
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mu_x, y - mu_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    PatchMoments {
        mu_x,
        mu_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    }
}

fn ssim_from_moments(m: &PatchMoments, c1: f64, c2: f64) -> f64 {
    let num = (2.0 * m.mu_x * m.mu_y + c1) * (2.0 * m.cov + c2);
    let den = (m.mu_x * m.mu_x + m.mu_y * m.mu_y + c1) * (m.var_x + m.var_y + c2);
    num / den
}

/// Structural similarity of two equally sized patches, using population
/// (divide-by-n) moments.
pub fn ssim(patch1: &[f64], patch2: &[f64], c1: f64, c2: f64) -> Result<f64> {
    if patch1.len() != patch2.len() || patch1.is_empty() {
        return Err(Error::shape(
            format!("{} samples", patch1.len()),
            format!("{} samples", patch2.len()),
        ));
    }
    let m = moments(patch1.iter().copied().zip(patch2.iter().copied()));
    Ok(ssim_from_moments(&m, c1, c2))
}

/// Mean of `1 - SSIM` over non-overlapping 8x8 patches (per channel), and
/// its gradient with respect to `rec`. Pixels in partial trailing patches
/// do not contribute.
pub fn ssim_loss(reference: &Image, rec: &Image) -> Result<(f64, Vec<f64>)> {
    reference.ensure_same_shape(rec)?;
    let (w, h, c) = (reference.width(), reference.height(), reference.channels());
    if w < SSIM_PATCH || h < SSIM_PATCH {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_PATCH}x{SSIM_PATCH} pixels, got {w}x{h}"
        )));
    }
    let (px, py) = (w / SSIM_PATCH, h / SSIM_PATCH);
    let patches = px * py * c;
    let n = (SSIM_PATCH * SSIM_PATCH) as f64;
    let mut grad = vec![0.0; rec.data().len()];
    let mut total = 0.0;
    let (xs, ys) = (reference.data(), rec.data());
    let index = |bx: usize, by: usize, k: usize, ch: usize| {
        let (x, y) = (bx * SSIM_PATCH + k % SSIM_PATCH, by * SSIM_PATCH + k / SSIM_PATCH);
        (y * w + x) * c + ch
    };
    for by in 0..py {
        for bx in 0..px {
            for ch in 0..c {
                let taps = (0..SSIM_PATCH * SSIM_PATCH).map(|k| {
                    let i = index(bx, by, k, ch);
                    (xs[i], ys[i])
                });
                let m = moments(taps);
                let a = 2.0 * m.mu_x * m.mu_y + SSIM_C1;
                let b = 2.0 * m.cov + SSIM_C2;
                let cc = m.mu_x * m.mu_x + m.mu_y * m.mu_y + SSIM_C1;
                let d = m.var_x + m.var_y + SSIM_C2;
                let s = a * b / (cc * d);
                total += 1.0 - s;
                for k in 0..SSIM_PATCH * SSIM_PATCH {
                    let i = index(bx, by, k, ch);
                    let (x, y) = (xs[i], ys[i]);
                    let da = 2.0 * m.mu_x / n;
                    let db = 2.0 * (x - m.mu_x) / n;
                    let dc = 2.0 * m.mu_y / n;
                    let dd = 2.0 * (y - m.mu_y) / n;
                    let ds = (da * b + a * db) / (cc * d) - s * (dc * d + cc * dd) / (cc * d);
                    grad[i] = -ds / patches as f64;
                }
            }
        }
    }
    Ok((total / patches as f64, grad))
}

/// Ternary census signature of every pixel: for each other pixel in the
/// `window x window` neighborhood (clamped to the border), `+1` if it is
/// brighter than the center by more than `t`, `-1` if darker by more than
/// `t`, else `0`. Returns `pixels * (window^2 - 1)` entries.
pub fn census_signature(img: &Image, window: usize, t: f64) -> Result<Vec<i8>> {
    if img.channels() != 1 {
        return Err(Error::invalid("census transform expects a grayscale image"));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("census window must be odd, got {window}")));
    }
    let (w, h) = (img.width(), img.height());
    let r = (window / 2) as isize;
    let per = window * window - 1;
    let mut sig = Vec::with_capacity(w * h * per);
    for y in 0..h {
        for x in 0..w {
            let center = img.get(x, y, 0);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let qx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let qy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let d = img.get(qx, qy, 0) - center;
                    sig.push(if d > t {
                        1
                    } else if d < -t {
                        -1
                    } else {
                        0
                    });
                }
            }
        }
    }
    Ok(sig)
}

/// Per-pixel soft Hamming distance between census signatures.
pub fn census_distance_map(i1: &Image, rec: &Image, window: usize, t: f64) -> Result<Vec<f64>> {
    i1.ensure_same_shape(rec)?;
    let s1 = census_signature(i1, window, t)?;
    let s2 = census_signature(rec, window, t)?;
    let per = window * window - 1;
    Ok(s1
        .chunks_exact(per)
        .zip(s2.chunks_exact(per))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| charbonnier(f64::from(p - q), CENSUS_ALPHA, CENSUS_EPSILON))
                .sum()
        })
        .collect())
}

/// Mean census distance between two grayscale images.
pub fn census_distance(i1: &Image, rec: &Image, window: usize, t: f64) -> Result<f64> {
    let map = census_distance_map(i1, rec, window, t)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// `lambda1 * pixel + lambda2 * smooth + lambda3 * ssim`.
pub fn scale_loss(pixel: f64, smooth: f64, ssim: f64, w: &LossWeights) -> LossReport {
    LossReport::from_terms(vec![
        LossTerm {
            name: "pixel".into(),
            raw: pixel,
            weight: w.lambda1,
        },
        LossTerm {
            name: "smooth".into(),
            raw: smooth,
            weight: w.lambda2,
        },
        LossTerm {
            name: "ssim".into(),
            raw: ssim,
            weight: w.lambda3,
        },
    ])
}

/// Weighted sum of per-scale losses.
pub fn total_loss(per_scale: &[f64], delta: &[f64]) -> Result<LossReport> {
    if per_scale.len() != delta.len() {
        return Err(Error::shape(
            format!("{} scale weights", per_scale.len()),
            format!("{}", delta.len()),
        ));
    }
    Ok(LossReport::from_terms(
        per_scale
            .iter()
            .zip(delta)
            .enumerate()
            .map(|(s, (&raw, &weight))| LossTerm {
                name: format!("scale{s}"),
                raw,
                weight,
            })
            .collect(),
    ))
}

fn endpoint_errors<'a>(
    flow: &'a FlowField,
    gt: &'a FlowField,
    valid: Option<&'a Mask>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    gt.ensure_dims(flow.width(), flow.height())?;
    if let Some(m) = valid {
        if m.dims() != flow.dims() {
            return Err(Error::shape(
                format!("{}x{}", flow.width(), flow.height()),
                format!("mask {}x{}", m.width(), m.height()),
            ));
        }
        if m.count() == 0 {
            return Err(Error::invalid("valid mask selects no pixels"));
        }
    }
    Ok((0..flow.len())
        .filter(move |&p| valid.is_none_or(|m| m.flags()[p]))
        .map(move |p| {
            let du = flow.u()[p] - gt.u()[p];
            let dv = flow.v()[p] - gt.v()[p];
            (du.hypot(dv), gt.u()[p].hypot(gt.v()[p]))
        }))
}

/// Mean endpoint error over valid pixels.
pub fn epe(flow: &FlowField, gt: &FlowField, valid: Option<&Mask>) -> Result<f64> {
    let (sum, n) = endpoint_errors(flow, gt, valid)?.fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Fraction of valid pixels whose endpoint error exceeds both 3 px and 5 %
/// of the ground-truth magnitude.
pub fn fl_outliers(flow: &FlowField, gt: &FlowField, valid: Option<&Mask>) -> Result<f64> {
    let (bad, n) = endpoint_errors(flow, gt, valid)?.fold((0usize, 0usize), |(b, n), (e, mag)| {
        let outlier = e > FL_ABS_THRESHOLD && e > FL_REL_THRESHOLD * mag;
        (b + usize::from(outlier), n + 1)
    });
    Ok(bad as f64 / n as f64)
}

/// Endpoint error against a proxy ground truth plus `lambda` times the
/// reconstruction loss.
pub fn guided_loss(
    flow: &FlowField,
    proxy_gt: &FlowField,
    i1: &Image,
    i2: &Image,
    lambda: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    let e = epe(flow, proxy_gt, None)?;
    let (reconst, _) = pixel_loss(i1, i2, flow, w)?;
    Ok(LossReport::from_terms(vec![
        LossTerm {
            name: "epe".into(),
            raw: e,
            weight: 1.0,
        },
        LossTerm {
            name: "reconst".into(),
            raw: reconst,
            weight: lambda,
        },
    ]))
}
