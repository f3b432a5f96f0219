//! Pixel-space types: RGB images in [0,1] and binary masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image, interleaved row-major, values nominally in [0,1].
///
/// Values may leave [0,1] transiently inside loss pipelines (decoded
/// predictions are not clamped there); clamping happens at PNG export only.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("empty image {height}x{width}")));
        }
        Ok(Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        };
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                let i = (y * width + x) * 3;
                img.data[i..i + 3].copy_from_slice(&px);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn set_px(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn px(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::dim(format!(
                "image dims {}x{} vs {}x{}",
                self.height, other.height, self.width, other.width
            )));
        }
        Ok(())
    }

    /// Planar [3, h, w] tensor.
    pub fn to_chw<S: Scalar>(&self) -> Tensor<S> {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t.data_mut()[(c * h + y) * w + x] = S::from_f64(self.get(y, x, c));
                }
            }
        }
        t
    }

    pub fn from_chw<S: Scalar>(t: &Tensor<S>) -> Image {
        assert_eq!(t.shape()[0], 3, "from_chw expects 3 channels");
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let mut img = Image {
            height: h,
            width: w,
            data: vec![0.0; h * w * 3],
        };
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, c, t.data()[(c * h + y) * w + x].to_f64());
                }
            }
        }
        img
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Copy a window; the window must fit.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of range");
        Image::from_fn(h, w, |y, x| self.px(y0 + y, x0 + x))
    }

    /// Nearest-neighbour resample.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            let sy = (y * self.height / h).min(self.height - 1);
            let sx = (x * self.width / w).min(self.width - 1);
            self.px(sy, sx)
        })
    }

    /// 8-bit PNG export; values are clamped here and nowhere else.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.px(y, x);
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
            }
        }
        buf.save(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png write {path:?}: {e}"))))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png read {path:?}: {e}"))))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w)?;
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set_px(y, x, [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ]);
            }
        }
        Ok(out)
    }
}

/// Binary mask over the person canvas: values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == 1)
    }

    /// Chebyshev dilation by radius r (neighbourhood max).
    pub fn dilate(&self, r: usize) -> BinaryMask {
        let mut out = BinaryMask::new(self.height, self.width);
        let ri = r as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut hit = false;
                'scan: for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0
                            && sy < self.height as isize
                            && sx >= 0
                            && sx < self.width as isize
                            && self.get(sy as usize, sx as usize)
                        {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                out.set(y as usize, x as usize, hit);
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| a == 0 || b == 1)
    }

    /// Single-channel [1, h, w] tensor of {0,1}.
    pub fn to_chw1<S: Scalar>(&self) -> Tensor<S> {
        let mut t = Tensor::zeros(&[1, self.height, self.width]);
        for (o, &v) in t.data_mut().iter_mut().zip(&self.data) {
            *o = S::from_f64(v as f64);
        }
        t
    }

    /// [3, h, w] tensor with the mask replicated per channel.
    pub fn to_chw3<S: Scalar>(&self) -> Tensor<S> {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for (i, &v) in self.data.iter().enumerate() {
                t.data_mut()[c * h * w + i] = S::from_f64(v as f64);
            }
        }
        t
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                buf.put_pixel(x as u32, y as u32, image::Luma([if self.get(y, x) { 255 } else { 0 }]));
            }
        }
        buf.save(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png write {path:?}: {e}"))))
    }

    pub fn load_png(path: &Path) -> Result<BinaryMask> {
        let img = image::open(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png read {path:?}: {e}"))))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = BinaryMask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, img.get_pixel(x as u32, y as u32).0[0] >= 128);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_roundtrip() {
        let img = Image::from_fn(4, 3, |y, x| [y as f64 / 4.0, x as f64 / 3.0, 0.25]);
        let t: Tensor<f64> = img.to_chw();
        assert_eq!(t.shape(), &[3, 4, 3]);
        assert_eq!(Image::from_chw(&t), img);
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = std::env::temp_dir().join("gardiff_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.png");
        // Values on the u8 grid survive the roundtrip exactly.
        let img = Image::from_fn(5, 7, |y, x| {
            [
                ((y * 7 + x) % 256) as f64 / 255.0,
                ((y * 3 + x * 5) % 256) as f64 / 255.0,
                0.0,
            ]
        });
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn dilation_is_superset_and_monotone() {
        let mut m = BinaryMask::new(16, 16);
        m.set(8, 8, true);
        m.set(2, 13, true);
        let d0 = m.dilate(0);
        let d3 = m.dilate(3);
        assert_eq!(d0, m);
        assert!(m.is_subset_of(&d3));
        // Full 7x7 square plus a border-clipped 6x6, overlapping in 2 px.
        assert_eq!(d3.count_ones(), 49 + 36 - 2);
    }
}
