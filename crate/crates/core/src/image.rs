//! Raster containers and PNG I/O.
//!
//! Images are three-channel planar buffers (channel, row, column) with
//! values in [0, 1]. 8-bit PNGs map linearly to [0, 1]; 16-bit PNGs are
//! accepted on ingest. Label maps are single-channel 8-bit class indices.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::resize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Hsv,
}

#[derive(Clone, Debug)]
pub struct Image<F: Real> {
    pub h: usize,
    pub w: usize,
    pub space: ColorSpace,
    data: Vec<F>,
}

impl<F: Real> Image<F> {
    pub fn zeros(h: usize, w: usize, space: ColorSpace) -> Self {
        Image {
            h,
            w,
            space,
            data: vec![F::zero(); 3 * h * w],
        }
    }

    pub fn from_planar(h: usize, w: usize, space: ColorSpace, data: Vec<F>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected 3*{h}*{w} = {}",
                data.len(),
                3 * h * w
            )));
        }
        Ok(Image { h, w, space, data })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[F] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Copy the `ph x pw` patch whose top-left corner is (y0, x0).
    pub fn extract_patch(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(3 * ph * pw);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in 0..ph {
                let row = &plane[(y0 + y) * self.w + x0..(y0 + y) * self.w + x0 + pw];
                out.extend_from_slice(row);
            }
        }
        out
    }

    pub fn write_patch(&mut self, y0: usize, x0: usize, ph: usize, pw: usize, patch: &[F]) {
        debug_assert_eq!(patch.len(), 3 * ph * pw);
        let w = self.w;
        for c in 0..3 {
            let plane = self.plane_mut(c);
            for y in 0..ph {
                let src = &patch[(c * ph + y) * pw..(c * ph + y) * pw + pw];
                plane[(y0 + y) * w + x0..(y0 + y) * w + x0 + pw].copy_from_slice(src);
            }
        }
    }

    /// Bilinear resize of all three planes (half-pixel centers).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image<F> {
        let mut out = Image::zeros(out_h, out_w, self.space);
        for c in 0..3 {
            let mut plane = vec![F::zero(); out_h * out_w];
            resize::bilinear_plane(self.plane(c), self.h, self.w, &mut plane, out_h, out_w);
            out.plane_mut(c).copy_from_slice(&plane);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image<F> {
        let mut out = self.clone();
        for c in 0..3 {
            let plane = out.plane_mut(c);
            for y in 0..self.h {
                plane[y * self.w..(y + 1) * self.w].reverse();
            }
        }
        out
    }

    pub fn cast<G: Real>(&self) -> Image<G> {
        Image {
            h: self.h,
            w: self.w,
            space: self.space,
            data: self.data.iter().map(|v| G::c(v.as_f64())).collect(),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image<F>> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let mut img = Image::zeros(h, w, ColorSpace::Rgb);
        match dynimg {
            image::DynamicImage::ImageRgb16(buf) => {
                for (i, px) in buf.pixels().enumerate() {
                    let (y, x) = (i / w, i % w);
                    for c in 0..3 {
                        img.set(c, y, x, F::c(px.0[c] as f64 / 65535.0));
                    }
                }
            }
            image::DynamicImage::ImageRgba16(buf) => {
                for (i, px) in buf.pixels().enumerate() {
                    let (y, x) = (i / w, i % w);
                    for c in 0..3 {
                        img.set(c, y, x, F::c(px.0[c] as f64 / 65535.0));
                    }
                }
            }
            image::DynamicImage::ImageLuma16(buf) => {
                for (i, px) in buf.pixels().enumerate() {
                    let (y, x) = (i / w, i % w);
                    for c in 0..3 {
                        img.set(c, y, x, F::c(px.0[0] as f64 / 65535.0));
                    }
                }
            }
            other => {
                let rgb = other.to_rgb8();
                for (i, px) in rgb.pixels().enumerate() {
                    let (y, x) = (i / w, i % w);
                    for c in 0..3 {
                        img.set(c, y, x, F::c(px.0[c] as f64 / 255.0));
                    }
                }
            }
        }
        Ok(img)
    }

    /// Write as 8-bit RGB PNG; values are clamped then quantized.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut px = [0u8; 3];
                for (c, b) in px.iter_mut().enumerate() {
                    let v = self.at(c, y, x).as_f64().clamp(0.0, 1.0);
                    *b = (v * 255.0).round() as u8;
                }
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Single-channel class-index raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn downsample_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let ys = resize::nearest_indices(self.h, out_h);
        let xs = resize::nearest_indices(self.w, out_w);
        let mut out = LabelMap::new(out_h, out_w);
        for (oy, &sy) in ys.iter().enumerate() {
            for (ox, &sx) in xs.iter().enumerate() {
                out.set(oy, ox, self.at(sy, sx));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<LabelMap> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let gray = dynimg.to_luma8();
        Ok(LabelMap {
            h,
            w,
            data: gray.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.w as u32, self.h as u32, self.data.clone())
            .expect("label buffer size");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::<f64>::zeros(5, 7, ColorSpace::Rgb);
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    let q = ((y * 7 + x + c * 11) % 256) as f64 / 255.0;
                    img.set(c, y, x, q);
                }
            }
        }
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = Image::<f64>::load_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_round_trip() {
        let mut img = Image::<f64>::zeros(8, 8, ColorSpace::Rgb);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.001;
        }
        let patch = img.extract_patch(2, 3, 4, 5);
        let mut img2 = img.clone();
        img2.write_patch(2, 3, 4, 5, &patch);
        assert_eq!(img.data(), img2.data());
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut lbl = LabelMap::new(4, 6);
        for (i, v) in lbl.data.iter_mut().enumerate() {
            *v = (i % 4) as u8;
        }
        let path = dir.path().join("l.png");
        lbl.save_png(&path).unwrap();
        assert_eq!(LabelMap::load_png(&path).unwrap(), lbl);
    }
}
