//! Reproducible synthetic inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fields::Image;

/// Uniform noise box-blurred with the given radius, on a canvas padded by
/// `pad` pixels on every side. Returns the canvas and its side length.
fn blurred_canvas(seed: u64, width: usize, height: usize, pad: usize, radius: usize) -> (Vec<f64>, usize, usize) {
    let (cw, ch) = (width + 2 * pad, height + 2 * pad);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..cw * ch).map(|_| rng.gen::<f64>()).collect();
    let r = radius as i64;
    let mut out = vec![0.0; cw * ch];
    for y in 0..ch as i64 {
        for x in 0..cw as i64 {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(ch as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(cw as i64 - 1) {
                    s += noise[yy as usize * cw + xx as usize];
                    n += 1.0;
                }
            }
            out[y as usize * cw + x as usize] = s / n;
        }
    }
    (out, cw, ch)
}

/// Grayscale box-blurred noise texture.
pub fn smoothed_texture(seed: u64, width: usize, height: usize, radius: usize) -> Result<Image> {
    let (canvas, cw, _) = blurred_canvas(seed, width, height, 0, radius);
    Image::from_fn(width, height, 1, |x, y, _| canvas[y * cw + x])
}

/// `(I1, I2)` where `I2(x, y) = I1(x - tx, y - ty)` on a shared texture, so
/// the flow taking `I2` back to `I1` is the constant `(tx, ty)`. Content
/// shifted in from outside comes from the same texture rather than a
/// border.
pub fn translated_pair(seed: u64, width: usize, height: usize, tx: i64, ty: i64) -> Result<(Image, Image)> {
    let pad = tx.unsigned_abs().max(ty.unsigned_abs()) as usize + 1;
    let (canvas, cw, _) = blurred_canvas(seed, width, height, pad, 2);
    let crop = |ox: i64, oy: i64| {
        Image::from_fn(width, height, 1, |x, y, _| {
            let cx = (x + pad) as i64 + ox;
            let cy = (y + pad) as i64 + oy;
            canvas[cy as usize * cw + cx as usize]
        })
    };
    Ok((crop(0, 0)?, crop(-tx, -ty)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_is_an_exact_shift() {
        let (a, b) = translated_pair(3, 12, 10, 2, -1).unwrap();
        for y in 1..9 {
            for x in 0..10 {
                assert_eq!(a.get(x, y, 0), b.get(x + 2, y - 1, 0));
            }
        }
        assert_eq!(smoothed_texture(1, 8, 8, 2).unwrap(), smoothed_texture(1, 8, 8, 2).unwrap());
    }
}
