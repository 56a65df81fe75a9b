//! Direct im2col/col2im kernels shared by the convolution ops.

use crate::scalar::Scalar;

/// Spatial geometry of a square-kernel 2-D convolution, expressed from the
/// forward-convolution point of view: `image` is the input plane of a
/// `conv2d` (or the output plane of a `conv_transpose2d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// `floor((size + 2·padding − kernel)/stride) + 1`, or `None` when the kernel
/// does not fit inside the padded input.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `(size − 1)·stride − 2·padding + kernel + output_padding`, or `None` if negative.
pub fn conv_transpose_out_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let grown = (size.checked_sub(1)?) * stride + kernel + output_padding;
    grown.checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Unfolds one image (C×H×W) into a `(C·K·K) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let n_cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_height {
                    let ih = oh as isize * s - p + ki as isize;
                    let seg = &mut out[oh * g.out_width..(oh + 1) * g.out_width];
                    if ih < 0 || ih >= g.height as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = ow as isize * s - p + kj as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let n_cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_height {
                    let ih = oh as isize * s - p + ki as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_width {
                        let iw = ow as isize * s - p + kj as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_width + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_follow_the_shape_formulas() {
        assert_eq!(conv_out_extent(64, 5, 2, 2), Some(32));
        assert_eq!(conv_out_extent(3, 2, 1, 0), Some(2));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out_extent(32, 5, 2, 2, 1), Some(64));
        assert_eq!(conv_transpose_out_extent(2, 2, 2, 0, 0), Some(4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_height: 3,
            out_width: 2,
        };
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
