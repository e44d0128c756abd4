//! Dense 2D rasters and the sampling primitives built on them.
//!
//! Coordinates follow the Middlebury convention: `x` is the column, `y` the
//! row, a flow vector `(u, v)` moves `u` columns right and `v` rows down.
//! All rasters are row-major; multi-channel images interleave channels.
//!
//! Image sampling clamps to the border. Label sampling outside the grid
//! yields [`VOID`].

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Reserved label id for do-not-care pixels.
pub const VOID: u8 = 255;

/// Rasters with at least this many samples are processed row-parallel.
const PAR_MIN_SAMPLES: usize = 1 << 14;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "raster dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

fn for_each_row<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if buf.len() >= PAR_MIN_SAMPLES {
        buf.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
    } else {
        buf.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
    }
}

/// A real-valued raster with 1 or 3 channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                width * height * channels,
                format!("{} samples", data.len()),
            ));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::invalid(format!(
                "image sample {i} = {} is outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Internal constructor for results that are convex combinations of
    /// valid samples and therefore already in range.
    pub(crate) fn from_valid(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Luma conversion (Rec. 601 weights); grayscale images are returned as-is.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image::from_valid(self.width, self.height, 1, data)
    }

    /// Bilinear sample of every channel at column `x`, row `y`, clamped to
    /// the border.
    pub fn sample(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid(format!(
                "sample coordinates must be finite, got ({x}, {y})"
            )));
        }
        let tap = Tap::new(x, y, self.width, self.height);
        Ok((0..self.channels)
            .map(|c| tap.value(&self.data, self.width, self.channels, c))
            .collect())
    }
}

/// The four bilinear support pixels of a clamped coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// The unclamped coordinate lies inside the grid along each axis; the
    /// derivative along a clamped axis is zero.
    live_x: bool,
    live_y: bool,
}

impl Tap {
    #[inline]
    pub(crate) fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let (x0, x1, fx, live_x) = Self::axis(x, width);
        let (y0, y1, fy, live_y) = Self::axis(y, height);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            live_x,
            live_y,
        }
    }

    #[inline]
    fn axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
        if n == 1 {
            return (0, 0, 0.0, false);
        }
        let hi = (n - 1) as f64;
        let live = (0.0..=hi).contains(&p);
        let pc = p.clamp(0.0, hi);
        let p0 = (pc.floor() as usize).min(n - 2);
        (p0, p0 + 1, pc - p0 as f64, live)
    }

    #[inline]
    fn corners(&self, data: &[f64], width: usize, stride: usize, c: usize) -> [f64; 4] {
        let at = |x: usize, y: usize| data[(y * width + x) * stride + c];
        [
            at(self.x0, self.y0),
            at(self.x1, self.y0),
            at(self.x0, self.y1),
            at(self.x1, self.y1),
        ]
    }

    #[inline]
    pub(crate) fn value(&self, data: &[f64], width: usize, stride: usize, c: usize) -> f64 {
        let [a, b, d, e] = self.corners(data, width, stride, c);
        let top = (1.0 - self.fx) * a + self.fx * b;
        let bottom = (1.0 - self.fx) * d + self.fx * e;
        (1.0 - self.fy) * top + self.fy * bottom
    }

    /// Value and partial derivatives with respect to `x` and `y`.
    #[inline]
    pub(crate) fn value_grad(
        &self,
        data: &[f64],
        width: usize,
        stride: usize,
        c: usize,
    ) -> (f64, f64, f64) {
        let [a, b, d, e] = self.corners(data, width, stride, c);
        let at = |x: usize, y: usize| data[(y * width + x) * stride + c];
        let top = (1.0 - self.fx) * a + self.fx * b;
        let bottom = (1.0 - self.fx) * d + self.fx * e;
        let value = (1.0 - self.fy) * top + self.fy * bottom;
        // On an interior lattice line the slope is the mean of both sides,
        // so descent from an integer position has no directional bias.
        let dx = if !self.live_x {
            0.0
        } else if self.fx == 0.0 && self.x0 > 0 {
            let (l0, l1) = (at(self.x0 - 1, self.y0), at(self.x0 - 1, self.y1));
            let right = (1.0 - self.fy) * (b - a) + self.fy * (e - d);
            let left = (1.0 - self.fy) * (a - l0) + self.fy * (d - l1);
            0.5 * (left + right)
        } else {
            (1.0 - self.fy) * (b - a) + self.fy * (e - d)
        };
        let dy = if !self.live_y {
            0.0
        } else if self.fy == 0.0 && self.y0 > 0 {
            let above = (1.0 - self.fx) * at(self.x0, self.y0 - 1) + self.fx * at(self.x1, self.y0 - 1);
            0.5 * ((bottom - top) + (top - above))
        } else {
            bottom - top
        };
        (value, dx, dy)
    }
}

/// Per-pixel displacement `(u, v)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::shape(
                format!("{n} flow vectors"),
                format!("u: {}, v: {}", u.len(), v.len()),
            ));
        }
        if u.iter().chain(v.iter()).any(|c| !c.is_finite()) {
            return Err(Error::invalid("flow components must be finite"));
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
        }
    }

    /// Builds a field from `f(x, y) -> (u, v)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let n = width * height;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(width, height, u, v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub(crate) fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub(crate) fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// The location pixel `(x, y)` reads from when warping with this field.
    #[inline]
    pub fn source_coord(&self, x: usize, y: usize) -> (f64, f64) {
        let (u, v) = self.at(x, y);
        (x as f64 + u, y as f64 + v)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub(crate) fn ensure_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{width}x{height}"),
                format!("flow {}x{}", self.width, self.height),
            ))
        }
    }

    /// Bilinear sample of both components, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let tap = Tap::new(x, y, self.width, self.height);
        (
            tap.value(&self.u, self.width, 1, 0),
            tap.value(&self.v, self.width, 1, 0),
        )
    }

    /// `self - step * dir`, componentwise.
    pub(crate) fn stepped(&self, dir: &FlowField, step: f64) -> FlowField {
        let u = self.u.iter().zip(&dir.u).map(|(a, g)| a - step * g).collect();
        let v = self.v.iter().zip(&dir.v).map(|(a, g)| a - step * g).collect();
        FlowField {
            width: self.width,
            height: self.height,
            u,
            v,
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &FlowField, scale: f64) {
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a += scale * b;
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += scale * b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.u.iter_mut().chain(self.v.iter_mut()).for_each(|c| *c *= s);
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|c| c.is_finite())
    }
}

/// Categorical per-pixel class ids with [`VOID`] for do-not-care pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, ids: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if classes == 0 || classes > VOID as usize {
            return Err(Error::invalid(format!(
                "class count must be in 1..={}, got {classes}",
                VOID
            )));
        }
        if ids.len() != width * height {
            return Err(Error::shape(width * height, format!("{} label ids", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&id| id != VOID && id as usize >= classes) {
            return Err(Error::invalid(format!(
                "label id {bad} is not below the class count {classes}"
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            ids,
        })
    }

    /// Class count inferred as one past the largest non-VOID id.
    pub fn infer_classes(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        let classes = ids
            .iter()
            .filter(|&&id| id != VOID)
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(1);
        Self::new(width, height, classes, ids)
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

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Re-declares the class count, keeping the ids.
    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Self::new(self.width, self.height, classes, self.ids)
    }
}

/// Binary per-pixel flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    flags: Vec<bool>,
}

/// `true` marks an occluded pixel.
pub type OcclusionMask = Mask;

impl Mask {
    pub fn new(width: usize, height: usize, flags: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if flags.len() != width * height {
            return Err(Error::shape(width * height, format!("{} flags", flags.len())));
        }
        Ok(Self {
            width,
            height,
            flags,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            flags: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.flags[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.flags.len() as f64
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Reconstructs the source frame by sampling `target` at every pixel's
/// flow-displaced location: `out(x, y) = target(x + u, y + v)`.
pub fn inverse_warp(target: &Image, flow: &FlowField) -> Result<Image> {
    flow.ensure_dims(target.width, target.height)?;
    let (w, c) = (target.width, target.channels);
    let mut out = vec![0.0; target.data.len()];
    for_each_row(&mut out, w * c, |y, row| {
        for x in 0..w {
            let (sx, sy) = flow.source_coord(x, y);
            let tap = Tap::new(sx, sy, w, target.height);
            for ch in 0..c {
                row[x * c + ch] = tap.value(&target.data, w, c, ch);
            }
        }
    });
    Ok(Image::from_valid(w, target.height, c, out))
}

/// Derivatives of the warped image with respect to each flow component,
/// laid out like the image data (channel-interleaved).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpJacobian {
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Analytic derivative of [`inverse_warp`] with respect to the flow.
///
/// Bilinear interpolation is piecewise linear, so the derivative is exact
/// away from lattice lines; on an interior lattice line it is the mean of
/// the two one-sided slopes. Along an axis where the sample was clamped the
/// derivative is zero.
pub fn warp_jacobian(target: &Image, flow: &FlowField) -> Result<WarpJacobian> {
    warp_with_jacobian(target, flow).map(|(_, j)| j)
}

/// [`inverse_warp`] and [`warp_jacobian`] in a single pass.
pub fn warp_with_jacobian(target: &Image, flow: &FlowField) -> Result<(Image, WarpJacobian)> {
    flow.ensure_dims(target.width, target.height)?;
    let (w, h, c) = (target.width, target.height, target.channels);
    let n = target.data.len();
    let mut out = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let row_len = w * c;
    let fill = |y: usize, o: &mut [f64], gu: &mut [f64], gv: &mut [f64]| {
        for x in 0..w {
            let (sx, sy) = flow.source_coord(x, y);
            let tap = Tap::new(sx, sy, w, h);
            for ch in 0..c {
                let (val, gx, gy) = tap.value_grad(&target.data, w, c, ch);
                o[x * c + ch] = val;
                gu[x * c + ch] = gx;
                gv[x * c + ch] = gy;
            }
        }
    };
    if n >= PAR_MIN_SAMPLES {
        out.par_chunks_mut(row_len)
            .zip(du.par_chunks_mut(row_len))
            .zip(dv.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(y, ((o, gu), gv))| fill(y, o, gu, gv));
    } else {
        out.chunks_mut(row_len)
            .zip(du.chunks_mut(row_len))
            .zip(dv.chunks_mut(row_len))
            .enumerate()
            .for_each(|(y, ((o, gu), gv))| fill(y, o, gu, gv));
    }
    Ok((Image::from_valid(w, h, c, out), WarpJacobian { du, dv }))
}

/// Nearest-neighbor label warp. Sources outside the grid become [`VOID`].
pub fn nn_warp_labels(labels: &LabelMap, flow: &FlowField) -> Result<LabelMap> {
    flow.ensure_dims(labels.width, labels.height)?;
    let (w, h) = (labels.width, labels.height);
    let mut ids = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = flow.source_coord(x, y);
            ids.push(match nearest_index(sx, sy, w, h) {
                Some((qx, qy)) => labels.get(qx, qy),
                None => VOID,
            });
        }
    }
    Ok(LabelMap {
        width: w,
        height: h,
        classes: labels.classes,
        ids,
    })
}

/// Rounds a coordinate to the nearest lattice point, `None` if off-grid.
#[inline]
pub fn nearest_index(x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let (rx, ry) = (x.round(), y.round());
    if rx < 0.0 || ry < 0.0 || rx > (width - 1) as f64 || ry > (height - 1) as f64 {
        None
    } else {
        Some((rx as usize, ry as usize))
    }
}

/// Flow clipped to `[-cap, cap]` and quantized to bytes, interleaved `(u, v)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFlow {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl QuantizedFlow {
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(2).copied().collect()
    }
}

/// Maps one component: `-cap -> 0`, `0 -> 128`, `+cap -> 255`, rounding
/// half up.
#[inline]
pub fn quantize_component(value: f64, cap: f64) -> u8 {
    let clipped = value.clamp(-cap, cap);
    let scaled = (clipped + cap) / (2.0 * cap) * 255.0;
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn flow_normalize(flow: &FlowField, cap: f64) -> Result<QuantizedFlow> {
    if !(cap > 0.0) || !cap.is_finite() {
        return Err(Error::invalid(format!("clip cap must be positive, got {cap}")));
    }
    let data = flow
        .u
        .iter()
        .zip(&flow.v)
        .flat_map(|(&u, &v)| [quantize_component(u, cap), quantize_component(v, cap)])
        .collect();
    Ok(QuantizedFlow {
        width: flow.width,
        height: flow.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_slope_is_two_sided() {
        // Row values 0, 0.2, 0.8: left slope 0.2, right slope 0.6 at x = 1.
        let img = Image::from_fn(3, 3, 1, |x, y, _| [0.0, 0.2, 0.8][x] * (1.0 - 0.1 * y as f64)).unwrap();
        let j = warp_jacobian(&img, &FlowField::zeros(3, 3)).unwrap();
        assert!((j.du[1] - 0.4).abs() < 1e-12);
        let t = Image::from_fn(3, 3, 1, |x, y, _| img.get(y, x, 0)).unwrap();
        let j = warp_jacobian(&t, &FlowField::zeros(3, 3)).unwrap();
        assert!((j.dv[3] - 0.4).abs() < 1e-12);
    }

    fn gray(w: usize, h: usize, data: &[f64]) -> Image {
        Image::new(w, h, 1, data.to_vec()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.gen::<f64>()).unwrap()
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn bilinear_center_is_average() {
        let img = gray(2, 2, &[1.0 / 4.0, 2.0 / 4.0, 3.0 / 4.0, 1.0]);
        let s = img.sample(0.5, 0.5).unwrap()[0];
        assert!((s - 2.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_exact_on_lattice() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(img.sample(1.0, 0.0).unwrap()[0], 0.2);
        assert_eq!(img.sample(0.0, 1.0).unwrap()[0], 0.3);
        assert_eq!(img.sample(1.0, 1.0).unwrap()[0], 0.4);
    }

    #[test]
    fn bilinear_clamps_to_edge() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        // (5, 0) clamps to column 1 of row 0.
        assert_eq!(img.sample(5.0, 0.0).unwrap()[0], 0.2);
        assert_eq!(img.sample(-3.0, 7.0).unwrap()[0], 0.3);
    }

    #[test]
    fn bilinear_rejects_non_finite() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(
            img.sample(f64::NAN, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(img.sample(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn warp_shift_by_one_column() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let out = inverse_warp(&img, &FlowField::constant(2, 2, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[0.2, 0.2, 0.4, 0.4]);
    }

    #[test]
    fn warp_shape_mismatch() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(
            inverse_warp(&img, &FlowField::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
        assert!(warp_jacobian(&img, &FlowField::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_warp_rgb_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 7, 5, 3);
        let out = inverse_warp(&img, &FlowField::zeros(7, 5)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn jacobian_of_constant_image_is_zero() {
        let img = Image::filled(5, 4, 1, 0.3).unwrap();
        let flow = FlowField::constant(5, 4, 0.37, -0.21);
        let j = warp_jacobian(&img, &flow).unwrap();
        assert!(j.du.iter().chain(&j.dv).all(|&d| d == 0.0));
    }

    #[test]
    fn jacobian_of_ramp_is_slope() {
        let slope = 0.1;
        let img = Image::from_fn(8, 3, 1, |x, _, _| x as f64 * slope).unwrap();
        let flow = FlowField::constant(8, 3, 0.3, 0.4);
        let j = warp_jacobian(&img, &flow).unwrap();
        // Columns whose source stays inside the grid.
        for y in 0..2 {
            for x in 0..6 {
                assert!((j.du[y * 8 + x] - slope).abs() < 1e-12);
                assert!(j.dv[y * 8 + x].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..10 {
            let img = random_image(&mut rng, 6, 6, 1);
            let flow = FlowField::from_fn(6, 6, |_, _| {
                (rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4))
            })
            .unwrap();
            let j = warp_jacobian(&img, &flow).unwrap();
            let plus = inverse_warp(&img, &flow_offset(&flow, h, 0.0)).unwrap();
            let minus = inverse_warp(&img, &flow_offset(&flow, -h, 0.0)).unwrap();
            let plus_v = inverse_warp(&img, &flow_offset(&flow, 0.0, h)).unwrap();
            let minus_v = inverse_warp(&img, &flow_offset(&flow, 0.0, -h)).unwrap();
            for i in 0..36 {
                let fd_u = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                let fd_v = (plus_v.data()[i] - minus_v.data()[i]) / (2.0 * h);
                let (sx, sy) = flow.source_coord(i % 6, i / 6);
                // Skip samples within h of a lattice line where the derivative jumps.
                let near = |p: f64| (p - p.round()).abs() < 2.0 * h || p < h || p > 5.0 - h;
                if !near(sx) && !near(sy) {
                    assert!((fd_u - j.du[i]).abs() <= 1e-4 * fd_u.abs().max(1e-3));
                    assert!((fd_v - j.dv[i]).abs() <= 1e-4 * fd_v.abs().max(1e-3));
                }
            }
        }
    }

    fn flow_offset(flow: &FlowField, du: f64, dv: f64) -> FlowField {
        let u = flow.u().iter().map(|a| a + du).collect();
        let v = flow.v().iter().map(|a| a + dv).collect();
        FlowField::new(flow.width(), flow.height(), u, v).unwrap()
    }

    #[test]
    fn label_warp_cases() {
        let labels = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let same = nn_warp_labels(&labels, &FlowField::zeros(2, 2)).unwrap();
        assert_eq!(same, labels);
        let down = nn_warp_labels(&labels, &FlowField::constant(2, 2, 0.0, 1.0)).unwrap();
        assert_eq!(down.ids(), &[1, 1, VOID, VOID]);
        let small = nn_warp_labels(&labels, &FlowField::constant(2, 2, 0.4, 0.0)).unwrap();
        assert_eq!(small, labels);
    }

    #[test]
    fn label_map_validates_ids() {
        assert!(LabelMap::new(2, 1, 2, vec![0, 2]).is_err());
        assert!(LabelMap::new(2, 1, 2, vec![0, VOID]).is_ok());
        assert_eq!(
            LabelMap::infer_classes(3, 1, vec![4, VOID, 1]).unwrap().classes(),
            5
        );
    }

    #[test]
    fn normalize_endpoints() {
        let flow = FlowField::new(4, 1, vec![-20.0, 0.0, 20.0, 35.0], vec![0.0; 4]).unwrap();
        let q = flow_normalize(&flow, 20.0).unwrap();
        assert_eq!(q.channel(0), vec![0, 128, 255, 255]);
        assert_eq!(q.channel(1), vec![128; 4]);
        assert!(flow_normalize(&flow, 0.0).is_err());
        assert!(flow_normalize(&flow, -1.0).is_err());
    }
}
