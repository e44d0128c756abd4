//! Middlebury color coding of flow fields.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{FlowField, Image};
use crate::sampling::percentile;

/// Hue segments of the wheel: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
pub const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
pub const DEFAULT_MAX_PERCENTILE: f64 = 0.99;

/// The 55 wheel colors in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_SEGMENTS.iter().sum());
    for (seg, &n) in WHEEL_SEGMENTS.iter().enumerate() {
        for i in 0..n {
            let ramp = (255.0 * i as f64 / n as f64).floor();
            wheel.push(match seg {
                0 => [255.0, ramp, 0.0],
                1 => [255.0 - ramp, 255.0, 0.0],
                2 => [0.0, 255.0, ramp],
                3 => [0.0, 255.0 - ramp, 255.0],
                4 => [ramp, 0.0, 255.0],
                _ => [255.0, 0.0, 255.0 - ramp],
            });
        }
    }
    wheel
}

/// Color of one vector already divided by the normalizing magnitude.
fn encode(wheel: &[[f64; 3]], u: f64, v: f64) -> [f64; 3] {
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / PI;
    // Spans the full wheel so that a = -1 and a = +1 coincide.
    let fk = ((a + 1.0) / 2.0 * n as f64).rem_euclid(n as f64);
    let k0 = (fk.floor() as usize) % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        out[c] = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
    }
    out
}

/// RGB rendering of `flow`; magnitudes are normalized by `max_mag`, which
/// defaults to the field's 99th-percentile magnitude. Zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> Result<Image> {
    let max = match max_mag {
        Some(m) if !(m > 0.0) || !m.is_finite() => {
            return Err(Error::invalid(format!("max_mag must be positive, got {m}")));
        }
        Some(m) => m,
        None => percentile(&mut flow.magnitudes(), DEFAULT_MAX_PERCENTILE),
    };
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let wheel = color_wheel();
    let mut data = Vec::with_capacity(flow.len() * 3);
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        data.extend(encode(&wheel, u * scale, v * scale));
    }
    Image::new(flow.width(), flow.height(), 3, data)
}
