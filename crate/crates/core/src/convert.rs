//! Conversions between pixel grids and network tensors.

use histosynth_tensor::{Scalar, Tensor};

use crate::data::grid::{Grid, RgbImage, SubtypeMask};
use crate::error::{Error, Result};
use crate::subtype::NUM_CLASSES;

fn common_dims<P: Copy>(grids: &[&Grid<P>]) -> Result<(usize, usize)> {
    let first = grids.first().ok_or_else(|| Error::Empty("no grids to convert".into()))?;
    let dims = first.dims();
    if grids.iter().any(|g| g.dims() != dims) {
        return Err(Error::Shape("grids in one batch must share a size".into()));
    }
    Ok(dims)
}

/// `[N, 3, H, W]` tensor with pixel values mapped from `0..=255` to `[-1, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let (w, h) = common_dims(images)?;
    let plane = w * h;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        for (i, px) in img.pixels().iter().enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + i] = T::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Inverse of [`images_to_tensor`], clamping and rounding to 8 bits.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
    }
    let plane = w * h;
    let d = t.data();
    let to_u8 = |v: T| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    Ok((0..n)
        .map(|b| {
            RgbImage::from_fn(w, h, |x, y| {
                let i = y * w + x;
                [
                    to_u8(d[(b * 3) * plane + i]),
                    to_u8(d[(b * 3 + 1) * plane + i]),
                    to_u8(d[(b * 3 + 2) * plane + i]),
                ]
            })
        })
        .collect())
}

/// `[N, 6, H, W]` one-hot encoding of subtype masks.
pub fn masks_to_one_hot<T: Scalar>(masks: &[&SubtypeMask]) -> Result<Tensor<T>> {
    let (w, h) = common_dims(masks)?;
    let plane = w * h;
    let mut data = vec![T::zero(); masks.len() * NUM_CLASSES * plane];
    for (n, m) in masks.iter().enumerate() {
        for (i, &code) in m.pixels().iter().enumerate() {
            if code as usize >= NUM_CLASSES {
                return Err(Error::Validation(format!("subtype code {code} outside 0..=5")));
            }
            data[(n * NUM_CLASSES + code as usize) * plane + i] = T::one();
        }
    }
    Ok(Tensor::new(&[masks.len(), NUM_CLASSES, h, w], data)?)
}

/// `[N, 1, H, W]` tensor from 0/1 grids.
pub fn binary_to_tensor<T: Scalar>(targets: &[&Grid<u8>]) -> Result<Tensor<T>> {
    let (w, h) = common_dims(targets)?;
    let data = targets
        .iter()
        .flat_map(|t| t.pixels().iter().map(|&v| if v > 0 { T::one() } else { T::zero() }))
        .collect();
    Ok(Tensor::new(&[targets.len(), 1, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 3, |x, y| [(x * 50) as u8, (y * 100) as u8, 255]);
        let t = images_to_tensor::<f32>(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(tensor_to_images(&t).unwrap(), vec![img]);
    }

    #[test]
    fn one_hot_has_a_single_one_per_pixel() {
        let m = SubtypeMask::from_fn(4, 4, |x, y| ((x + y) % 6) as u8);
        let t = masks_to_one_hot::<f64>(&[&m]).unwrap();
        for i in 0..16 {
            let s: f64 = (0..6).map(|c| t.data()[c * 16 + i]).sum();
            assert_eq!(s, 1.0);
            assert_eq!(t.data()[m.pixels()[i] as usize * 16 + i], 1.0);
        }
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let a = SubtypeMask::filled(2, 2, 0);
        let b = SubtypeMask::filled(3, 2, 0);
        assert!(masks_to_one_hot::<f32>(&[&a, &b]).is_err());
    }
}
