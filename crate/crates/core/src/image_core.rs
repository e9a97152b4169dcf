//! Raster containers, sampling, and PNG / binary PNM I/O.
//!
//! Pixel `(x, y)` has its centre at integer coordinates; samples are stored
//! row-major and channel-interleaved as `f64` in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};

/// Label value used for pixels without a source.
pub const DEFAULT_IGNORE_LABEL: u32 = 255;

/// How samples outside the raster are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FillMode {
    /// Out-of-range neighbours read as 0 (black).
    #[default]
    Zero,
    /// Out-of-range neighbours read the nearest edge pixel.
    Clamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{} samples", width * height * channels),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image samples"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    pub(crate) fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Index of the first sample of pixel `(ix, iy)` after applying the fill
    /// policy, or `None` when it reads as zero.
    #[inline]
    pub(crate) fn neighbor_offset(&self, ix: i64, iy: i64, fill: FillMode) -> Option<usize> {
        let (w, h) = (self.width as i64, self.height as i64);
        let (ix, iy) = match fill {
            FillMode::Zero => {
                if ix < 0 || iy < 0 || ix >= w || iy >= h {
                    return None;
                }
                (ix, iy)
            }
            FillMode::Clamp => (ix.clamp(0, w - 1), iy.clamp(0, h - 1)),
        };
        Some((iy as usize * self.width + ix as usize) * self.channels)
    }

    /// Bilinear interpolation at `(x, y)` written into `out` (one value per
    /// channel).
    pub fn sample_bilinear_into(&self, x: f64, y: f64, fill: FillMode, out: &mut [f64]) -> Result<()> {
        if x.is_nan() || y.is_nan() {
            return Err(Error::NonFinite("sample coordinates"));
        }
        let taps = BilinearTaps::new(self, x, y, fill);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = taps.value(self, c);
        }
        Ok(())
    }

    pub fn sample_bilinear(&self, x: f64, y: f64, fill: FillMode) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(x, y, fill, &mut out)?;
        Ok(out)
    }

    /// Single-channel luma; BT.601 weights for RGB input.
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        ImageBuffer::from_fn(self.width, self.height, 1, |x, y, _| {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        })
    }

    /// Bilinear resize with pixel-centre alignment and edge clamping.
    pub fn resized(&self, width: usize, height: usize) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = ImageBuffer::new(width, height, self.channels);
        let ch = self.channels;
        for y in 0..height {
            for x in 0..width {
                let taps = BilinearTaps::new(
                    self,
                    (x as f64 + 0.5) * sx - 0.5,
                    (y as f64 + 0.5) * sy - 0.5,
                    FillMode::Clamp,
                );
                for c in 0..ch {
                    out.data[(y * width + x) * ch + c] = taps.value(self, c);
                }
            }
        }
        out
    }

    /// 2x2 box-filter downsampling. Odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> ImageBuffer {
        let (w, h) = (self.width / 2, self.height / 2);
        ImageBuffer::from_fn(w, h, self.channels, |x, y, c| {
            0.25 * (self.get(2 * x, 2 * y, c)
                + self.get(2 * x + 1, 2 * y, c)
                + self.get(2 * x, 2 * y + 1, c)
                + self.get(2 * x + 1, 2 * y + 1, c))
        })
    }

    /// Centre crop to a square of side `min(width, height)`.
    pub fn center_square(&self) -> ImageBuffer {
        let side = self.width.min(self.height);
        let ox = (self.width - side) / 2;
        let oy = (self.height - side) / 2;
        ImageBuffer::from_fn(side, side, self.channels, |x, y, c| self.get(x + ox, y + oy, c))
    }
}

/// The four neighbours and weights used by bilinear interpolation at one
/// location. Shared by sampling, the rectification layer and its backward
/// pass so that all of them agree on the fill policy.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    pub wx: f64,
    pub wy: f64,
    /// Offsets of (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1).
    pub offsets: [Option<usize>; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(img: &ImageBuffer, x: f64, y: f64, fill: FillMode) -> Self {
        let fx = x.floor();
        let fy = y.floor();
        let (x0, y0) = (fx as i64, fy as i64);
        Self {
            wx: x - fx,
            wy: y - fy,
            offsets: [
                img.neighbor_offset(x0, y0, fill),
                img.neighbor_offset(x0 + 1, y0, fill),
                img.neighbor_offset(x0, y0 + 1, fill),
                img.neighbor_offset(x0 + 1, y0 + 1, fill),
            ],
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (wx, wy) = (self.wx, self.wy);
        [
            (1.0 - wx) * (1.0 - wy),
            wx * (1.0 - wy),
            (1.0 - wx) * wy,
            wx * wy,
        ]
    }

    #[inline]
    pub fn corners(&self, img: &ImageBuffer, c: usize) -> [f64; 4] {
        self.offsets.map(|o| o.map_or(0.0, |o| img.data[o + c]))
    }

    #[inline]
    pub fn value(&self, img: &ImageBuffer, c: usize) -> f64 {
        let v = self.corners(img, c);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// Spatial derivatives `(dI/dx, dI/dy)` of the interpolant.
    #[inline]
    pub fn gradient(&self, img: &ImageBuffer, c: usize) -> (f64, f64) {
        let v = self.corners(img, c);
        let (wx, wy) = (self.wx, self.wy);
        let dx = (1.0 - wy) * (v[1] - v[0]) + wy * (v[3] - v[2]);
        let dy = (1.0 - wx) * (v[2] - v[0]) + wx * (v[3] - v[1]);
        (dx, dy)
    }
}

/// Per-pixel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// True everywhere except a border of `margin` pixels.
    pub fn interior(width: usize, height: usize, margin: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            x >= margin && y >= margin && x + margin < width && y + margin < height
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Half-resolution mask matching [`ImageBuffer::downsample2`]: a pixel
    /// is set only if all four pixels of its 2x2 block are.
    pub fn downsample2(&self) -> Mask {
        Mask::from_fn(self.width / 2, self.height / 2, |x, y| {
            let (x2, y2) = (2 * x, 2 * y);
            self.get(x2, y2) && self.get(x2 + 1, y2) && self.get(x2, y2 + 1) && self.get(x2 + 1, y2 + 1)
        })
    }

    /// Pixels with at least one non-zero channel. Exact black marks the
    /// area outside a fisheye image's field of view.
    pub fn non_black(img: &ImageBuffer) -> Mask {
        let ch = img.channels();
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.data().chunks_exact(ch).map(|px| px.iter().any(|&v| v != 0.0)).collect(),
        }
    }
}

/// Integer class-ID raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u32>,
    ignore_label: u32,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, value: u32, ignore_label: u32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            ignore_label,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u32>, ignore_label: u32) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                format!("{} labels", width * height),
                format!("{} labels", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
            ignore_label,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ignore_label(&self) -> u32 {
        self.ignore_label
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-neighbour lookup, rounding half up on both axes.
    pub fn sample_nearest(&self, x: f64, y: f64) -> Result<u32> {
        if x.is_nan() || y.is_nan() {
            return Err(Error::NonFinite("sample coordinates"));
        }
        let ix = (x + 0.5).floor();
        let iy = (y + 0.5).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
            return Ok(self.ignore_label);
        }
        Ok(self.get(ix as usize, iy as usize))
    }

    /// Nearest-neighbour resize with pixel-centre alignment.
    pub fn resized(&self, width: usize, height: usize) -> LabelMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
                data.push(self.get(ix, iy));
            }
        }
        LabelMap {
            width,
            height,
            data,
            ignore_label: self.ignore_label,
        }
    }

    pub fn center_square(&self) -> LabelMap {
        let side = self.width.min(self.height);
        let ox = (self.width - side) / 2;
        let oy = (self.height - side) / 2;
        let mut data = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                data.push(self.get(x + ox, y + oy));
            }
        }
        LabelMap {
            width: side,
            height: side,
            data,
            ignore_label: self.ignore_label,
        }
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| fmt_err(e.to_string()))
}

/// Quantizes `[0, 1]` to 8 bits: clamp, scale by 255, round half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Loads an 8-bit PNG or binary PPM/PGM. Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = decode(path)?;
    let scale = 1.0 / 255.0;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f64 * scale).collect()),
        DynamicImage::ImageLumaA8(b) => (
            1,
            b.pixels().map(|p| p.0[0] as f64 * scale).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f64 * scale).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            b.pixels()
                .flat_map(|p| [p.0[0], p.0[1], p.0[2]])
                .map(|v| v as f64 * scale)
                .collect(),
        ),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported pixel format {:?}; only 8-bit images are accepted", other.color()),
            })
        }
    };
    ImageBuffer::from_vec(w, h, channels, data)
}

/// Saves as 8-bit PNG, or binary PPM/PGM for `.ppm`/`.pgm`/`.pnm`.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    write_buffer(path, &bytes, img.width, img.height, color)
}

fn write_buffer(
    path: &Path,
    bytes: &[u8],
    width: usize,
    height: usize,
    color: image::ExtendedColorType,
) -> Result<()> {
    let format = image::ImageFormat::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported output format {format:?}"),
        });
    }
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, format).map_err(
        |e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        },
    )
}

/// Loads a label map stored as an 8-bit grayscale PGM or PNG
/// (class ID = gray level).
pub fn load_labels(path: impl AsRef<Path>, ignore_label: u32) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("label maps must be 8-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    LabelMap::from_vec(w, h, data, ignore_label)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = labels
        .data
        .iter()
        .map(|&v| {
            u8::try_from(v).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("class ID {v} does not fit in 8 bits"),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    write_buffer(path, &bytes, labels.width, labels.height, image::ExtendedColorType::L8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |x, _, _| x as f64 / w as f64)
    }

    #[test]
    fn mask_downsample_needs_whole_block() {
        let m = Mask::from_fn(4, 2, |x, y| !(x == 3 && y == 1));
        let d = m.downsample2();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.data(), &[true, false]);
    }

    #[test]
    fn non_black_checks_every_channel() {
        let img = ImageBuffer::from_fn(3, 1, 3, |x, _, c| if x == 1 && c == 2 { 0.1 } else if x == 2 { 1.0 } else { 0.0 });
        assert_eq!(Mask::non_black(&img).data(), &[false, true, true]);
    }

    #[test]
    fn bilinear_at_grid_points_is_exact() {
        let img = ImageBuffer::from_fn(5, 4, 3, |x, y, c| (x * 7 + y * 3 + c) as f64 / 40.0);
        for y in 0..4 {
            for x in 0..5 {
                let v = img.sample_bilinear(x as f64, y as f64, FillMode::Zero).unwrap();
                for (c, vc) in v.iter().enumerate() {
                    assert_eq!(*vc, img.get(x, y, c));
                }
            }
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let img = ImageBuffer::from_vec(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.5, 0.5, FillMode::Zero).unwrap()[0], 0.5);
    }

    #[test]
    fn bilinear_ramp() {
        let img = ramp(8, 8);
        let v = img.sample_bilinear(1.25, 2.75, FillMode::Zero).unwrap()[0];
        assert!((v - 1.25 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_fill_policies() {
        let img = ImageBuffer::filled(4, 4, 1, 1.0);
        assert_eq!(img.sample_bilinear(-0.5, 1.0, FillMode::Zero).unwrap()[0], 0.5);
        assert_eq!(img.sample_bilinear(-0.5, 1.0, FillMode::Clamp).unwrap()[0], 1.0);
        assert_eq!(img.sample_bilinear(-7.0, 20.0, FillMode::Zero).unwrap()[0], 0.0);
        assert!(img.sample_bilinear(f64::NAN, 1.0, FillMode::Zero).is_err());
    }

    #[test]
    fn nearest_examples() {
        let lbl = LabelMap::from_vec(6, 6, (0..36).collect(), 255).unwrap();
        assert_eq!(lbl.sample_nearest(2.4, 3.4).unwrap(), lbl.get(2, 3));
        assert_eq!(lbl.sample_nearest(-1.0, 0.0).unwrap(), 255);
        assert_eq!(lbl.sample_nearest(2.5, 3.5).unwrap(), lbl.get(3, 4));
        assert_eq!(lbl.sample_nearest(5.6, 0.0).unwrap(), 255);
        assert!(lbl.sample_nearest(0.0, f64::NAN).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(ImageBuffer::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn luma_weights() {
        let img = ImageBuffer::from_vec(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let l = img.to_luma().get(0, 0, 0);
        assert!((l - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn downsample_and_resize() {
        let img = ImageBuffer::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f64 / 16.0);
        let d = img.downsample2();
        assert_eq!((d.width(), d.height()), (2, 2));
        assert!((d.get(0, 0, 0) - 2.5 / 16.0).abs() < 1e-15);
        let r = ramp(16, 4).resized(8, 2);
        // Interior of a linear ramp stays linear under pixel-centre resizing.
        assert!((r.get(3, 0, 0) - 6.5 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn quantization_round_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 97) as f64 / 96.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert!(back.same_shape(&img));
            let dev = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev <= 1.0 / 255.0 + 1e-12, "{name}: {dev}");
        }
        let black = ImageBuffer::new(3, 3, 1);
        let p = dir.path().join("black.pgm");
        save_image(&black, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), black);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(3, 3, image::Luma([40000]));
        buf.save(&p).unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("deep.png"));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_image("/nonexistent/where.png").unwrap_err();
        assert!(err.to_string().contains("where.png"));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lbl = LabelMap::from_vec(3, 2, vec![0, 1, 2, 3, 254, 255], 255).unwrap();
        let p = dir.path().join("l.pgm");
        save_labels(&lbl, &p).unwrap();
        assert_eq!(load_labels(&p, 255).unwrap(), lbl);
        let big = LabelMap::from_vec(1, 1, vec![300], 255).unwrap();
        assert!(save_labels(&big, dir.path().join("b.pgm")).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn affine_images_are_reproduced(
                a in -0.05f64..0.05, b in -0.05f64..0.05, c in 0.2f64..0.8,
                x in 0.0f64..9.0, y in 0.0f64..9.0,
            ) {
                let img = ImageBuffer::from_fn(10, 10, 1, |px, py, _| a * px as f64 + b * py as f64 + c);
                let v = img.sample_bilinear(x, y, FillMode::Zero).unwrap()[0];
                prop_assert!((v - (a * x + b * y + c)).abs() < 1e-6);
            }

            #[test]
            fn bilinear_is_convex(
                vals in proptest::array::uniform4(0.0f64..1.0),
                x in 0.0f64..1.0, y in 0.0f64..1.0,
            ) {
                let img = ImageBuffer::from_vec(2, 2, 1, vals.to_vec()).unwrap();
                let v = img.sample_bilinear(x, y, FillMode::Zero).unwrap()[0];
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }

            #[test]
            fn quantization_bound(v in 0.0f64..=1.0) {
                prop_assert!((quantize(v) as f64 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
