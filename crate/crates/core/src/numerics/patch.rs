//! Non-overlapping p×p patchification.
//!
//! Patches are numbered row-major over the patch grid. Within a patch the
//! flattening order is (row, column, channel), channel fastest. Pixel values
//! are scaled to [0, 1] by dividing by 255.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::stream::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    /// N × (p·p·3)
    pub patches: Matrix,
    pub patch_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

pub fn patchify(image: &Image, p: usize) -> Result<PatchSet> {
    let (h, w) = (image.height(), image.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * 3;
    let data = image.data();
    let mut patches = Matrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row_mut(gy * gw + gx);
            for r in 0..p {
                let src = ((gy * p + r) * w + gx * p) * 3;
                for (dst, &v) in row[r * p * 3..(r + 1) * p * 3].iter_mut().zip(&data[src..src + p * 3]) {
                    *dst = f64::from(v) / 255.0;
                }
            }
        }
    }
    Ok(PatchSet {
        patches,
        patch_size: p,
        grid_height: gh,
        grid_width: gw,
    })
}

/// Inverse of [`patchify`]; values are rounded back to 8 bits.
pub fn unpatchify(set: &PatchSet) -> Result<Image> {
    let p = set.patch_size;
    let (gh, gw) = (set.grid_height, set.grid_width);
    if set.patches.rows() != gh * gw || set.patches.cols() != p * p * 3 {
        return Err(Error::DimensionMismatch {
            expected: gh * gw * p * p * 3,
            actual: set.patches.rows() * set.patches.cols(),
        });
    }
    let (h, w) = (gh * p, gw * p);
    let mut data = vec![0u8; h * w * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = set.patches.row(gy * gw + gx);
            for r in 0..p {
                let dst = ((gy * p + r) * w + gx * p) * 3;
                for (d, &v) in data[dst..dst + p * 3].iter_mut().zip(&row[r * p * 3..(r + 1) * p * 3]) {
                    *d = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Image::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.gen()).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn counts() {
        let set = patchify(&random_image(4, 4, 0), 2).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.patch_dim(), 12);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let set = patchify(&Image::filled(8, 12, [10, 20, 30]).unwrap(), 4).unwrap();
        for i in 1..set.len() {
            assert_eq!(set.patches.row(i), set.patches.row(0));
        }
    }

    #[test]
    fn flattening_order_is_row_column_channel() {
        // 2x2 image, one 2x2 patch: values identify (row, col, channel)
        let data: Vec<u8> = (0..12).collect();
        let set = patchify(&Image::new(2, 2, data).unwrap(), 2).unwrap();
        let got: Vec<u8> = set.patches.row(0).iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(got, (0..12).collect::<Vec<u8>>());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..5 {
            let img = random_image(32, 24, seed);
            assert_eq!(unpatchify(&patchify(&img, 8).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn indivisible_dimensions_fail() {
        assert!(patchify(&random_image(10, 8, 0), 4).is_err());
        assert!(patchify(&random_image(8, 8, 0), 0).is_err());
    }
}
