//! Patch extraction for convolutions.
//!
//! Activations travel through the network as `(batch, channels * h * w)`
//! row-major matrices. Convolutions unfold one image at a time into a
//! `(channels * k * k, out_h * out_w)` column block and run one GEMM per
//! image, which keeps the working set in cache.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Spatial geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the unfolded column matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }
}

/// Unfold one image into `out`, a `(patch_len, out_positions)` row-major
/// buffer. `out` must be zeroed (padding cells are never written).
pub fn im2col_into(img: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(out.len(), g.patch_len() * positions);
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut out[row * positions..(row + 1) * positions];
                for r in 0..oh {
                    let ih = (r * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let dst = &mut dst_row[r * ow..(r + 1) * ow];
                    if g.stride == 1 {
                        // Contiguous run of valid columns.
                        let lo = g.padding.saturating_sub(kj);
                        let hi = ow.min(g.width + g.padding - kj);
                        if lo < hi {
                            let s0 = lo + kj - g.padding;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (q, d) in dst.iter_mut().enumerate() {
                            let iw = (q * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-add `cols` into `img`.
pub fn col2im_add(cols: &[f32], g: &ConvGeometry, img: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.patch_len() * positions);
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &cols[row * positions..(row + 1) * positions];
                for r in 0..oh {
                    let ih = (r * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let src = &src_row[r * ow..(r + 1) * ow];
                    for (q, v) in src.iter().enumerate() {
                        let iw = (q * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Unfold `x` (`batch` rows of `channels*height*width`) into patch columns
/// `(patch_len, batch*out_positions)`.
pub fn im2col(x: &[f32], batch: usize, g: &ConvGeometry) -> Array2<f32> {
    let positions = g.out_positions();
    let mut cols = Array2::<f32>::zeros((g.patch_len(), batch * positions));
    let mut block = vec![0.0f32; g.patch_len() * positions];
    for n in 0..batch {
        block.iter_mut().for_each(|v| *v = 0.0);
        im2col_into(&x[n * g.image_len()..(n + 1) * g.image_len()], g, &mut block);
        for (r, chunk) in block.chunks_exact(positions).enumerate() {
            cols.row_mut(r).as_slice_mut().unwrap()[n * positions..(n + 1) * positions].copy_from_slice(chunk);
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f32>, batch: usize, g: &ConvGeometry) -> Array2<f32> {
    let positions = g.out_positions();
    let mut x = Array2::<f32>::zeros((batch, g.image_len()));
    let mut block = vec![0.0f32; g.patch_len() * positions];
    for n in 0..batch {
        for (r, chunk) in block.chunks_exact_mut(positions).enumerate() {
            chunk.copy_from_slice(&cols.row(r).as_slice().unwrap()[n * positions..(n + 1) * positions]);
        }
        col2im_add(&block, g, x.row_mut(n).into_slice().unwrap());
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> ConvGeometry {
        ConvGeometry { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 }
    }

    #[test]
    fn output_size_matches_formula() {
        let g = ConvGeometry { channels: 1, height: 28, width: 28, kernel: 4, stride: 2, padding: 1 };
        assert_eq!(g.out_height(), 14);
        let g = ConvGeometry { channels: 1, height: 3, width: 3, kernel: 4, stride: 2, padding: 1 };
        assert_eq!(g.out_height(), 1);
    }

    // <im2col(x), c> == <x, col2im(c)> for random x, c.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geometry();
        let batch = 3;
        let x: Vec<f32> = (0..batch * g.image_len()).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
        let cols = im2col(&x, batch, &g);
        let c = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        let lhs: f32 = cols.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, batch, &g);
        let rhs: f32 = back.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}
