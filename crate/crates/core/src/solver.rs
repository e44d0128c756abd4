//! Coarse-to-fine variational flow estimation.
//!
//! Minimizes `lambda1 * pixel + lambda2 * smooth (+ lambda3 * ssim)` directly
//! over a dense flow field. Each pyramid level runs gradient descent with a
//! backtracking line search, so the per-level objective never increases.
//! The flow starts at zero on the coarsest level and is bilinearly upsampled
//! (with components rescaled) between levels.

use crate::error::{Error, Result};
use crate::fields::{warp_with_jacobian, FlowField, Image, Mask, OcclusionMask};
use crate::losses::{epe, masked_pixel_loss, smoothness_loss, ssim_loss, LossWeights};
use crate::occlusion::{occlusion_masks, DEFAULT_ALPHA1, DEFAULT_ALPHA2};

/// Smallest allowed pyramid level along either axis.
pub const MIN_LEVEL_SIZE: usize = 8;
/// Maximum number of step halvings per line search.
pub const MAX_HALVINGS: usize = 20;
/// Charbonnier offset of the default solver weights. Near-zero offsets make
/// the penalty's curvature at the origin large, and plain gradient descent
/// then stalls; this value keeps descent well conditioned on intensities in
/// `[0, 1]`.
pub const SOLVER_EPSILON: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Requested number of levels; levels that would fall below 8x8 are
    /// dropped.
    pub pyramid_levels: usize,
    pub scale_factor: f64,
    pub iters_per_level: usize,
    /// Initial line-search step per pixel. Losses are means over pixels, so
    /// the step applied at a level is `step * pixel_count`.
    pub step: f64,
    pub weights: LossWeights,
    pub smooth_order: u8,
    pub use_ssim: bool,
    pub bidirectional: bool,
    pub occlusion_second_pass: bool,
    pub occlusion_alpha1: f64,
    pub occlusion_alpha2: f64,
    /// Carried for reproducibility bookkeeping; the solver itself draws no
    /// random numbers.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            scale_factor: 0.5,
            iters_per_level: 200,
            step: 1.0,
            weights: LossWeights {
                epsilon: SOLVER_EPSILON,
                ..LossWeights::default()
            },
            smooth_order: 1,
            use_ssim: false,
            bidirectional: false,
            occlusion_second_pass: false,
            occlusion_alpha1: DEFAULT_ALPHA1,
            occlusion_alpha2: DEFAULT_ALPHA2,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.pyramid_levels == 0 {
            return Err(Error::invalid("pyramid_levels must be at least 1"));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::invalid(format!(
                "scale_factor must be in (0, 1), got {}",
                self.scale_factor
            )));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid(format!("step must be positive, got {}", self.step)));
        }
        if self.smooth_order != 1 && self.smooth_order != 2 {
            return Err(Error::invalid("smooth_order must be 1 or 2"));
        }
        Ok(())
    }
}

/// Objective terms after one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub total: f64,
    pub pixel: f64,
    pub smooth: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub flow: FlowField,
    /// Trace of the final optimization stage (finest level, or the masked
    /// second pass when one ran). Monotone non-increasing.
    pub loss_trace: Vec<TraceEntry>,
    /// One trace per stage, coarsest level first.
    pub level_traces: Vec<Vec<TraceEntry>>,
    pub epe: Option<f64>,
    pub masks: Option<(OcclusionMask, OcclusionMask)>,
}

impl SolveResult {
    /// Records the endpoint error against a ground-truth field.
    pub fn with_ground_truth(mut self, gt: &FlowField) -> Result<Self> {
        self.epe = Some(epe(&self.flow, gt, None)?);
        Ok(self)
    }
}

/// Area-weighted downsampling to `floor(size * factor)` along each axis.
/// For `factor = 0.5` on even sizes this is a 2x2 box average.
pub fn downsample(img: &Image, factor: f64) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let dw = ((w as f64 * factor).floor() as usize).max(1);
    let dh = ((h as f64 * factor).floor() as usize).max(1);
    let wx = area_weights(w, dw);
    let wy = area_weights(h, dh);
    // Horizontal pass: h x dw
    let mut tmp = vec![0.0; h * dw * c];
    for y in 0..h {
        for (dx, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * dw + dx) * c + ch] = taps.iter().map(|&(x, t)| t * img.get(x, y, ch)).sum();
            }
        }
    }
    let mut out = vec![0.0; dh * dw * c];
    for (dy, taps) in wy.iter().enumerate() {
        for dx in 0..dw {
            for ch in 0..c {
                out[(dy * dw + dx) * c + ch] = taps
                    .iter()
                    .map(|&(y, t)| t * tmp[(y * dw + dx) * c + ch])
                    .sum::<f64>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    Image::from_valid(dw, dh, c, out)
}

/// Overlap weights of each destination cell with the source pixels.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let (lo, hi) = (d as f64 * ratio, (d + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then(|| (s, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Bilinear flow upsampling to `width x height` with components scaled by
/// the resolution ratio.
pub fn upsample_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let (cw, ch) = flow.dims();
    let (rx, ry) = (width as f64 / cw as f64, height as f64 / ch as f64);
    let mut u = Vec::with_capacity(width * height);
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let sx = (x as f64 + 0.5) / rx - 0.5;
            let sy = (y as f64 + 0.5) / ry - 0.5;
            let (a, b) = flow.sample(sx, sy);
            u.push(a * rx);
            v.push(b * ry);
        }
    }
    FlowField::new(width, height, u, v).expect("upsampled flow is finite")
}

/// Images of every pyramid level, finest first.
fn pyramid(img: &Image, cfg: &SolverConfig) -> Vec<Image> {
    let mut levels = vec![img.clone()];
    while levels.len() < cfg.pyramid_levels {
        let last = levels.last().expect("non-empty");
        let next_w = (last.width() as f64 * cfg.scale_factor).floor() as usize;
        let next_h = (last.height() as f64 * cfg.scale_factor).floor() as usize;
        if next_w < MIN_LEVEL_SIZE || next_h < MIN_LEVEL_SIZE {
            break;
        }
        levels.push(downsample(last, cfg.scale_factor));
    }
    levels
}

struct Objective<'a> {
    i1: &'a Image,
    i2: &'a Image,
    cfg: &'a SolverConfig,
    exclude: Option<&'a Mask>,
}

impl Objective<'_> {
    fn eval(&self, flow: &FlowField) -> Result<(TraceEntry, FlowField)> {
        let w = &self.cfg.weights;
        let (pixel, mut grad, _) = masked_pixel_loss(self.i1, self.i2, flow, w, self.exclude)?;
        grad.scale(w.lambda1);
        let (smooth, gs) = smoothness_loss(flow, w, self.cfg.smooth_order)?;
        grad.add_scaled(&gs, w.lambda2);
        let mut ssim = 0.0;
        if self.cfg.use_ssim {
            let (rec, jac) = warp_with_jacobian(self.i2, flow)?;
            let (l, g_img) = ssim_loss(self.i1, &rec)?;
            ssim = l;
            let c = self.i1.channels();
            let mut gf = FlowField::zeros(flow.width(), flow.height());
            for p in 0..flow.len() {
                let (mut gu, mut gv) = (0.0, 0.0);
                for ch in 0..c {
                    let k = p * c + ch;
                    gu += g_img[k] * jac.du[k];
                    gv += g_img[k] * jac.dv[k];
                }
                gf.u_mut()[p] = gu;
                gf.v_mut()[p] = gv;
            }
            grad.add_scaled(&gf, w.lambda3);
        }
        let total = w.lambda1 * pixel + w.lambda2 * smooth + if self.cfg.use_ssim { w.lambda3 * ssim } else { 0.0 };
        if !total.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "objective became non-finite (pixel={pixel}, smooth={smooth}, ssim={ssim})"
            )));
        }
        Ok((
            TraceEntry {
                iter: 0,
                total,
                pixel,
                smooth,
                ssim,
            },
            grad,
        ))
    }

    /// Gradient descent with backtracking from `flow`.
    fn descend(&self, mut flow: FlowField) -> Result<(FlowField, Vec<TraceEntry>)> {
        let mut step = self.cfg.step * flow.len() as f64;
        let (mut current, mut grad) = self.eval(&flow)?;
        let mut trace = vec![current];
        for iter in 1..=self.cfg.iters_per_level {
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let candidate = flow.stepped(&grad, step);
                let (entry, g) = self.eval(&candidate)?;
                if entry.total < current.total {
                    accepted = Some((candidate, entry, g));
                    break;
                }
                step *= 0.5;
            }
            let Some((next, mut entry, g)) = accepted else {
                break;
            };
            entry.iter = iter;
            trace.push(entry);
            flow = next;
            current = entry;
            grad = g;
            step *= 2.0;
        }
        Ok((flow, trace))
    }
}

fn check_inputs(i1: &Image, i2: &Image, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    i1.ensure_same_shape(i2)?;
    if i1.width() < MIN_LEVEL_SIZE || i1.height() < MIN_LEVEL_SIZE {
        return Err(Error::invalid(format!(
            "images must be at least {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}, got {}x{}",
            i1.width(),
            i1.height()
        )));
    }
    Ok(())
}

/// Estimates the flow that warps `i2` onto `i1`.
pub fn solve_flow(i1: &Image, i2: &Image, cfg: &SolverConfig) -> Result<SolveResult> {
    check_inputs(i1, i2, cfg)?;
    let p1 = pyramid(i1, cfg);
    let p2 = pyramid(i2, cfg);
    let coarsest = p1.last().expect("non-empty");
    let mut flow = FlowField::zeros(coarsest.width(), coarsest.height());
    let mut level_traces = Vec::with_capacity(p1.len());
    for (a, b) in p1.iter().zip(&p2).rev() {
        if flow.dims() != (a.width(), a.height()) {
            flow = upsample_flow(&flow, a.width(), a.height());
        }
        let objective = Objective {
            i1: a,
            i2: b,
            cfg,
            exclude: None,
        };
        let (next, trace) = objective.descend(flow)?;
        flow = next;
        level_traces.push(trace);
    }
    Ok(SolveResult {
        flow,
        loss_trace: level_traces.last().cloned().unwrap_or_default(),
        level_traces,
        epe: None,
        masks: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalResult {
    pub forward: SolveResult,
    pub backward: SolveResult,
    pub forward_occlusion: OcclusionMask,
    pub backward_occlusion: OcclusionMask,
}

/// Solves forward and backward flow, derives occlusion masks, and
/// optionally re-optimizes both with occluded pixels removed from the data
/// term (the smoothness term still covers them).
pub fn solve_bidirectional(i1: &Image, i2: &Image, cfg: &SolverConfig) -> Result<BidirectionalResult> {
    let mut forward = solve_flow(i1, i2, cfg)?;
    let mut backward = solve_flow(i2, i1, cfg)?;
    let (of, ob) = occlusion_masks(
        &forward.flow,
        &backward.flow,
        cfg.occlusion_alpha1,
        cfg.occlusion_alpha2,
    )?;
    if cfg.occlusion_second_pass {
        for (result, (a, b, mask)) in [(&mut forward, (i1, i2, &of)), (&mut backward, (i2, i1, &ob))] {
            let objective = Objective {
                i1: a,
                i2: b,
                cfg,
                exclude: Some(mask),
            };
            let (flow, trace) = objective.descend(result.flow.clone())?;
            result.flow = flow;
            result.loss_trace = trace.clone();
            result.level_traces.push(trace);
        }
    }
    forward.masks = Some((of.clone(), ob.clone()));
    backward.masks = Some((ob.clone(), of.clone()));
    Ok(BidirectionalResult {
        forward,
        backward,
        forward_occlusion: of,
        backward_occlusion: ob,
    })
}
