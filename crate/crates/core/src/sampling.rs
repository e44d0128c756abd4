//! Temporal and spatial sampling: random temporal skipping, class-uniform
//! crops, and the depth-sequence operators STDN and MDMM.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{LabelMap, VOID};

/// Rejection attempts per stride bound before the bound is lowered.
pub const RTS_TRIES: usize = 100;
pub const STDN_PERCENTILE: f64 = 0.95;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `N + 1` frame indices starting at a uniform `t` with strides drawn
/// uniformly from `[0, max_stride]`. A stride of 0 repeats a frame.
///
/// Draws whose last index falls outside `[0, T)` are rejected; after
/// [`RTS_TRIES`] rejections the stride bound drops by one, down to 0, which
/// always succeeds.
pub fn rts_indices(t_len: usize, n: usize, max_stride: usize, seed: u64) -> Result<Vec<usize>> {
    if t_len < 1 || n < 1 {
        return Err(Error::invalid(format!(
            "need T >= 1 and N >= 1, got T={t_len}, N={n}"
        )));
    }
    let mut rng = rng(seed);
    for bound in (0..=max_stride).rev() {
        for _ in 0..RTS_TRIES {
            let mut idx = Vec::with_capacity(n + 1);
            idx.push(rng.gen_range(0..t_len));
            for _ in 0..n {
                let next = idx.last().copied().unwrap_or(0) + rng.gen_range(0..=bound);
                idx.push(next);
            }
            if idx[n] < t_len {
                return Ok(idx);
            }
        }
    }
    unreachable!("stride bound 0 always yields in-range indices")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub image_index: usize,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    /// Class whose component centroid this crop is centered on.
    pub target: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropPlan {
    pub crops: Vec<Crop>,
    /// Set when no non-VOID class exists and every crop is random.
    pub no_class_present: bool,
}

/// Per-class connected-component centroids `(image, cx, cy)` with
/// 4-connectivity, indexed by class id.
pub fn component_centroids(labels: &[LabelMap], classes: usize) -> Result<Vec<Vec<(usize, f64, f64)>>> {
    let mut out = vec![Vec::new(); classes];
    for (index, map) in labels.iter().enumerate() {
        let (w, h) = map.dims();
        let ids = map.ids();
        if let Some(&id) = ids.iter().find(|&&id| id != VOID && id as usize >= classes) {
            return Err(Error::invalid(format!("label {id} out of range for {classes} classes")));
        }
        let mut seen = vec![false; w * h];
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            let id = ids[start];
            if id == VOID || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
            while let Some(p) = queue.pop_front() {
                let (x, y) = (p % w, p / w);
                sx += x as f64;
                sy += y as f64;
                count += 1;
                let neighbours = [
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                    (y > 0).then(|| p - w),
                    (y + 1 < h).then(|| p + w),
                ];
                for q in neighbours.into_iter().flatten() {
                    if !seen[q] && ids[q] == id {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
            out[id as usize].push((index, sx / count as f64, sy / count as f64));
        }
    }
    Ok(out)
}

/// `count / 2` uniformly random crops followed by crops centered on random
/// component centroids, cycling over the present classes in ascending order.
pub fn class_uniform_crops(
    labels: &[LabelMap],
    crop: usize,
    classes: usize,
    count: usize,
    seed: u64,
) -> Result<CropPlan> {
    if labels.is_empty() {
        return Err(Error::invalid("no label maps given"));
    }
    if crop == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    if let Some((i, m)) = labels
        .iter()
        .enumerate()
        .find(|(_, m)| crop > m.width().min(m.height()))
    {
        return Err(Error::invalid(format!(
            "crop {crop} exceeds label map {i} of size {}x{}",
            m.width(),
            m.height()
        )));
    }
    let centroids = component_centroids(labels, classes)?;
    let present: Vec<usize> = (0..classes).filter(|&c| !centroids[c].is_empty()).collect();
    let mut rng = rng(seed);
    let random_count = if present.is_empty() { count } else { count / 2 };
    let mut crops = Vec::with_capacity(count);
    for _ in 0..random_count {
        let image_index = rng.gen_range(0..labels.len());
        let m = &labels[image_index];
        crops.push(Crop {
            image_index,
            x: rng.gen_range(0..=m.width() - crop),
            y: rng.gen_range(0..=m.height() - crop),
            width: crop,
            height: crop,
            target: None,
        });
    }
    for k in 0..count - random_count {
        let class = present[k % present.len()];
        let comps = &centroids[class];
        let (image_index, cx, cy) = comps[rng.gen_range(0..comps.len())];
        let m = &labels[image_index];
        let place = |c: f64, limit: usize| ((c - crop as f64 / 2.0 + 0.5).round().max(0.0) as usize).min(limit - crop);
        crops.push(Crop {
            image_index,
            x: place(cx, m.width()),
            y: place(cy, m.height()),
            width: crop,
            height: crop,
            target: Some(class as u8),
        });
    }
    Ok(CropPlan {
        crops,
        no_class_present: present.is_empty(),
    })
}

/// A single-channel raster of nonnegative relative depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("depth map must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::shape(width * height, format!("{} samples", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("depth sample {i} = {} is not a finite nonnegative value", data[i])));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Equally sized depth frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthClip {
    frames: Vec<DepthMap>,
}

impl DepthClip {
    pub fn new(frames: Vec<DepthMap>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("depth clip has no frames"))?;
        let dims = (first.width, first.height);
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| (f.width, f.height) != dims) {
            return Err(Error::shape(
                format!("{}x{} frames", dims.0, dims.1),
                format!("frame {i} of {}x{}", f.width, f.height),
            ));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[DepthMap] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }
}

/// Nearest-rank percentile: the smallest sample with at least a fraction
/// `q` of the samples at or below it.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Row ranges of the top, middle and bottom thirds; the remainder goes to
/// the bottom.
pub fn thirds(height: usize) -> [std::ops::Range<usize>; 3] {
    let t = height / 3;
    [0..t, t..2 * t, 2 * t..height]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StdnResult {
    pub clip: DepthClip,
    /// `(frame, third)` pairs whose own percentile was 0 and were left
    /// unscaled.
    pub unscaled: Vec<(usize, usize)>,
}

/// Spatio-temporal depth normalization over windows of `n` frames.
pub fn stdn(clip: &DepthClip, n: usize) -> Result<StdnResult> {
    if n < 1 {
        return Err(Error::invalid("STDN window must be at least 1 frame"));
    }
    let (w, h) = clip.dims();
    let mut frames: Vec<Vec<f64>> = clip.frames.iter().map(|f| f.data.clone()).collect();
    let mut unscaled = Vec::new();
    for start in (0..clip.len()).step_by(n) {
        let window = start..(start + n).min(clip.len());
        for (third, rows) in thirds(h).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let span = rows.start * w..rows.end * w;
            let mut pooled: Vec<f64> = window
                .clone()
                .flat_map(|f| frames[f][span.clone()].iter().copied())
                .collect();
            let target = percentile(&mut pooled, STDN_PERCENTILE);
            for f in window.clone() {
                let own = percentile(&mut frames[f][span.clone()].to_vec(), STDN_PERCENTILE);
                if own == 0.0 {
                    unscaled.push((f, third));
                    continue;
                }
                let scale = target / own;
                frames[f][span.clone()].iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    let frames = frames
        .into_iter()
        .map(|data| DepthMap { width: w, height: h, data })
        .collect();
    Ok(StdnResult {
        clip: DepthClip { frames },
        unscaled,
    })
}

/// Sum of `N` absolute inter-frame differences starting at `t_start`.
pub fn mdmm(clip: &DepthClip, t_start: usize, n: usize) -> Result<DepthMap> {
    if t_start + n >= clip.len() {
        return Err(Error::invalid(format!(
            "MDMM range {t_start}+{n} needs more than {} frames",
            clip.len()
        )));
    }
    let (w, h) = clip.dims();
    let mut acc = vec![0.0; w * h];
    for t in t_start..t_start + n {
        for ((a, p), q) in acc.iter_mut().zip(&clip.frames[t].data).zip(&clip.frames[t + 1].data) {
            *a += (q - p).abs();
        }
    }
    DepthMap::new(w, h, acc)
}
