//! Image and mask primitives shared by the generators, patch ops, and scoring.
//!
//! Images are `H x W x C` arrays with values in `[0, 1]`; masks are `H x W`
//! booleans.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `H x W x C` image with pixel values in `[0, 1]`.
pub type Image<F> = Array3<F>;

/// `H x W` boolean mask.
pub type Mask = Array2<bool>;

/// (height, width) of an image.
pub fn dims<F: Scalar>(img: &Image<F>) -> (usize, usize) {
    let s = img.shape();
    (s[0], s[1])
}

/// Check that every pixel is finite and inside `[0, 1]`.
pub fn validate_pixels<F: Scalar>(img: &Image<F>) -> Result<()> {
    for &v in img.iter() {
        if !v.is_finite() || v < F::zero() || v > F::one() {
            return Err(Error::Numerical(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Channel-mean grayscale view of an image.
pub fn to_gray<F: Scalar>(img: &Image<F>) -> Array2<F> {
    let (h, w) = dims(img);
    let c = img.shape()[2];
    let inv = F::from_f64_lossy(1.0 / c as f64);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = F::zero();
        for ch in 0..c {
            acc += img[[y, x, ch]];
        }
        acc * inv
    })
}

/// Bilinear resize to `(out_h, out_w)`.
///
/// Sample positions follow the half-pixel convention, so resizing to the
/// input size reproduces the input exactly.
pub fn resize_bilinear<F: Scalar>(img: &Image<F>, out_h: usize, out_w: usize) -> Image<F> {
    let (h, w) = dims(img);
    let c = img.shape()[2];
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array3::from_shape_fn((out_h, out_w, c), |(oy, ox, ch)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = F::from_f64_lossy(fy - y0 as f64);
        let wx = F::from_f64_lossy(fx - x0 as f64);
        let one = F::one();
        let top = img[[y0, x0, ch]] * (one - wx) + img[[y0, x1, ch]] * wx;
        let bot = img[[y1, x0, ch]] * (one - wx) + img[[y1, x1, ch]] * wx;
        top * (one - wy) + bot * wy
    })
}

/// Fraction of set pixels in a mask.
pub fn mask_fraction(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}
