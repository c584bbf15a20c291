use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bilinear resampling of an `[H0, W0, C]` image to `[height, width, C]` on
/// a corner-aligned grid: output corners coincide with input corners.
pub fn downsample_image(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if img.ndim() != 3 {
        return Err(Error::Input(format!("image must be [H, W, C], got {:?}", img.shape())));
    }
    let [h0, w0, c] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    if h0 < 2 || w0 < 2 {
        return Err(Error::Input(format!("image {h0}x{w0} is too small to resample")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Input("target size must be positive".into()));
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let px = |y: usize, x: usize, ch: usize| img.data()[(y * w0 + x) * c + ch];
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        let (y0, y1, fy) = coord(i, h0, height);
        for j in 0..width {
            let (x0, x1, fx) = coord(j, w0, width);
            for ch in 0..c {
                let top = (1.0 - fx) * px(y0, x0, ch) + fx * px(y0, x1, ch);
                let bottom = (1.0 - fx) * px(y1, x0, ch) + fx * px(y1, x1, ch);
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Tensor::new(vec![height, width, c], out)
}
