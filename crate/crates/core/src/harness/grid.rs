use cvaegan_tensor::{Scalar, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::imageio::tensor_to_rgb;

pub const GRID_COLUMNS: usize = 8;

/// Tiles the images of `[N, 3, H, W]` row-major into `columns` columns;
/// unfilled cells stay black.
pub fn make_grid<T: Scalar>(images: &Tensor<T>, columns: usize) -> Result<RgbImage> {
    let [n, 3, h, w] = images.shape() else {
        return Err(Error::config(format!("grid expects [N, 3, H, W], got {:?}", images.shape())));
    };
    let (n, h, w) = (*n, *h as u32, *w as u32);
    if n == 0 || columns == 0 {
        return Err(Error::config("grid needs at least one image and one column"));
    }
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let mut grid = RgbImage::new(cols as u32 * w, rows as u32 * h);
    for i in 0..n {
        let tile = tensor_to_rgb(images, i)?;
        let (x, y) = ((i % cols) as u32 * w, (i / cols) as u32 * h);
        image::imageops::replace(&mut grid, &tile, x as i64, y as i64);
    }
    Ok(grid)
}
