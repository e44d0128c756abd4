//! Joint image-label propagation, label boundaries, boundary label
//! relaxation and mIoU.

use crate::error::{Error, Result};
use crate::fields::{inverse_warp, nn_warp_labels, FlowField, Image, LabelMap, Mask, VOID};

/// Unnormalized per-pixel class scores, row-major with the class index
/// fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("logits need at least 2 classes, got {classes}")));
        }
        if data.len() != width * height * classes {
            return Err(Error::shape(
                format!("{width}x{height}x{classes} = {} scores", width * height * classes),
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scores of pixel `(x, y)`.
    pub fn scores(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.data[i..i + self.classes]
    }

    /// Per-pixel argmax, ties to the lower class.
    pub fn argmax(&self) -> LabelMap {
        let ids = self
            .data
            .chunks(self.classes)
            .map(|s| {
                s.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0 as u8
            })
            .collect();
        LabelMap::new(self.width, self.height, self.classes, ids).expect("argmax ids are in range")
    }
}

/// Warps a frame and its labels with the same motion field.
pub fn joint_propagate(img: &Image, labels: &LabelMap, flow: &FlowField) -> Result<(Image, LabelMap)> {
    if (img.width(), img.height()) != labels.dims() {
        return Err(Error::shape(img.shape_string(), format!("{}x{} labels", labels.width(), labels.height())));
    }
    Ok((inverse_warp(img, flow)?, nn_warp_labels(labels, flow)?))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    Ok(())
}

/// Sorted distinct non-VOID ids in the image-clipped window around `(x, y)`.
fn window_classes(labels: &LabelMap, x: usize, y: usize, window: usize, out: &mut Vec<u8>) {
    let r = window / 2;
    out.clear();
    let (w, h) = labels.dims();
    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
            let id = labels.get(xx, yy);
            if id != VOID && !out.contains(&id) {
                out.push(id);
            }
        }
    }
    out.sort_unstable();
}

/// Flags non-VOID pixels whose window holds a different non-VOID id.
pub fn boundary_mask(labels: &LabelMap, window: usize) -> Result<Mask> {
    check_window(window)?;
    let (w, h) = labels.dims();
    let mut set = Vec::new();
    let mut flags = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let flagged = labels.get(x, y) != VOID && {
                window_classes(labels, x, y, window, &mut set);
                set.len() > 1
            };
            flags.push(flagged);
        }
    }
    Mask::new(w, h, flags)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_pair(logits: &Logits, labels: &LabelMap) -> Result<()> {
    if (logits.width, logits.height) != labels.dims() {
        return Err(Error::shape(
            format!("{}x{} labels", logits.width, logits.height),
            format!("{}x{}", labels.width(), labels.height()),
        ));
    }
    if let Some(&id) = labels.ids().iter().find(|&&id| id != VOID && id as usize >= logits.classes) {
        return Err(Error::invalid(format!(
            "label {id} out of range for {} classes",
            logits.classes
        )));
    }
    Ok(())
}

/// Per-pixel `-log sum_{c in N} softmax(c)`; `None` at VOID pixels.
pub fn relaxed_loss_map(logits: &Logits, labels: &LabelMap, window: usize) -> Result<Vec<Option<f64>>> {
    check_window(window)?;
    check_pair(logits, labels)?;
    let mut set = Vec::new();
    let mut out = Vec::with_capacity(labels.ids().len());
    for y in 0..logits.height {
        for x in 0..logits.width {
            if labels.get(x, y) == VOID {
                out.push(None);
                continue;
            }
            window_classes(labels, x, y, window, &mut set);
            let s = logits.scores(x, y);
            let all = log_sum_exp(s.iter().copied());
            let union = log_sum_exp(set.iter().map(|&k| s[k as usize]));
            out.push(Some(all - union));
        }
    }
    Ok(out)
}

/// Per-pixel one-hot cross-entropy; `None` at VOID pixels.
pub fn cross_entropy_map(logits: &Logits, labels: &LabelMap) -> Result<Vec<Option<f64>>> {
    check_pair(logits, labels)?;
    Ok(labels
        .ids()
        .iter()
        .zip(logits.data.chunks(logits.classes))
        .map(|(&id, s)| (id != VOID).then(|| log_sum_exp(s.iter().copied()) - s[id as usize]))
        .collect())
}

/// Boundary-relaxed cross-entropy averaged over non-VOID pixels, with its
/// gradient with respect to the logits.
pub fn relaxed_loss(logits: &Logits, labels: &LabelMap, window: usize) -> Result<(f64, Vec<f64>)> {
    check_window(window)?;
    check_pair(logits, labels)?;
    let valid = labels.ids().iter().filter(|&&id| id != VOID).count();
    if valid == 0 {
        return Err(Error::invalid("every pixel is VOID"));
    }
    let c = logits.classes;
    let norm = 1.0 / valid as f64;
    let mut grad = vec![0.0; logits.data.len()];
    let mut total = 0.0;
    let mut set = Vec::new();
    let mut in_set = vec![false; c];
    for y in 0..logits.height {
        for x in 0..logits.width {
            if labels.get(x, y) == VOID {
                continue;
            }
            window_classes(labels, x, y, window, &mut set);
            let i = (y * logits.width + x) * c;
            let s = &logits.data[i..i + c];
            let all = log_sum_exp(s.iter().copied());
            let union = log_sum_exp(set.iter().map(|&k| s[k as usize]));
            total += all - union;
            in_set.iter_mut().for_each(|f| *f = false);
            set.iter().for_each(|&k| in_set[k as usize] = true);
            // d/dz_j = p_j - [j in N] p_j / P_N
            for j in 0..c {
                let p = (s[j] - all).exp();
                let member = if in_set[j] { (s[j] - union).exp() } else { 0.0 };
                grad[i + j] = (p - member) * norm;
            }
        }
    }
    Ok((total * norm, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Mean intersection over union over pixels whose ground truth is not VOID.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MiouReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            format!("{}x{} labels", gt.width(), gt.height()),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    if classes == 0 || classes > VOID as usize {
        return Err(Error::invalid(format!("class count must be in 1..=255, got {classes}")));
    }
    for map in [pred, gt] {
        if let Some(&id) = map.ids().iter().find(|&&id| id != VOID && id as usize >= classes) {
            return Err(Error::invalid(format!("label {id} out of range for {classes} classes")));
        }
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut valid = 0usize;
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if g == VOID {
            continue;
        }
        valid += 1;
        union[g as usize] += 1;
        if p == g {
            inter[g as usize] += 1;
        } else if p != VOID {
            union[p as usize] += 1;
        }
    }
    if valid == 0 {
        return Err(Error::invalid("ground truth has no valid pixels"));
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, mean })
}
