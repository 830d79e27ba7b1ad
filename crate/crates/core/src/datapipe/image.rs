//! 8-bit RGB images: PPM codec, square crops and bilinear resizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved `H × W × 3` RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels).expect("non-empty")
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    /// Copy of the `w × h` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::Input(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * w * h);
        for row in y..y + h {
            let start = 3 * (row * self.width + x);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * w]);
        }
        Self::new(w, h, pixels)
    }

    /// Planar `C × H × W` copy of the pixels.
    pub fn to_chw(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

/// Parse a binary PPM file.
pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "missing whitespace after maxval")),
    }
    let need = 3 * width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: need {need} bytes, have {}", raster.len()),
        ));
    }
    RawImage::new(width, height, raster[..need].to_vec())
}

/// Serialize with the canonical header `P6\n{w} {h}\n255\n`.
pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

// ---------------------------------------------------------------------------
// Crops

/// Face bounding box in pixel coordinates of the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

/// Largest centered square. When the trim is odd the extra pixel comes off
/// the right or bottom edge.
pub fn center_crop_square(img: &RawImage) -> RawImage {
    let side = img.width.min(img.height);
    let left = (img.width - side) / 2;
    let top = (img.height - side) / 2;
    img.crop(left, top, side, side).expect("square fits")
}

/// Square of side `max(w, h)` centered on the box, shifted to lie inside the
/// image. Falls back to [`center_crop_square`] when the square cannot fit.
pub fn face_crop_square(img: &RawImage, face: &FaceBox) -> Result<RawImage> {
    let (w, h) = (img.width as i64, img.height as i64);
    let (bw, bh) = (face.w as i64, face.h as i64);
    if bw < 1 || bh < 1 || face.x >= w || face.y >= h || face.x + bw <= 0 || face.y + bh <= 0 {
        return Err(Error::Input(format!(
            "face box {face:?} does not intersect the {w}x{h} image"
        )));
    }
    let side = bw.max(bh);
    if side > w.min(h) {
        return Ok(center_crop_square(img));
    }
    let left = (face.x + (bw - side).div_euclid(2)).clamp(0, w - side);
    let top = (face.y + (bh - side).div_euclid(2)).clamp(0, h - side);
    img.crop(left as usize, top as usize, side as usize, side as usize)
}

// ---------------------------------------------------------------------------
// Resizing

/// Round half up and clamp to the 8-bit range.
#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bilinear resize of a square image to `target × target`, sampling source
/// coordinate `(dst + 0.5) · S / target − 0.5` with edge clamping.
pub fn resize_bilinear(img: &RawImage, target: usize) -> Result<RawImage> {
    if !img.is_square() {
        return Err(Error::BadShape {
            op: "resize_bilinear",
            reason: format!("expected a square image, got {}x{}", img.width, img.height),
        });
    }
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let s = img.width;
    if s == target {
        return Ok(img.clone());
    }
    let ratio = s as f64 / target as f64;
    let taps: Vec<(usize, usize, f64)> = (0..target)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (s - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(s - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect();
    let mut pixels = Vec::with_capacity(3 * target * target);
    for &(y0, y1, fy) in &taps {
        for &(x0, x1, fx) in &taps {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.pixels[3 * (y * s + x) + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                pixels.push(quantize(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    RawImage::new(target, target, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
    }

    #[test]
    fn decode_with_comment() {
        let img = decode_ppm(b"P6 # made by hand\n2 1 255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn decode_rejects_bad_files() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Format { offset: 0, .. })));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn center_crop_cases() {
        let wide = RawImage::from_fn(6, 4, |x, y| [x as u8, y as u8, 0]);
        let sq = center_crop_square(&wide);
        assert_eq!((sq.width(), sq.height()), (4, 4));
        assert_eq!(sq.pixel(0, 0), [1, 0, 0]);
        assert_eq!(sq.pixel(3, 3), [4, 3, 0]);

        let hd = RawImage::filled(1920, 1080, [9, 9, 9]);
        let sq = center_crop_square(&hd);
        assert_eq!((sq.width(), sq.height()), (1080, 1080));

        let already = RawImage::from_fn(5, 5, |x, y| [x as u8, y as u8, 7]);
        assert_eq!(center_crop_square(&already), already);

        // odd trim: extra column comes off the right
        let odd = RawImage::from_fn(5, 2, |x, _| [x as u8, 0, 0]);
        assert_eq!(center_crop_square(&odd).pixel(0, 0), [1, 0, 0]);
    }

    #[test]
    fn face_crop_geometry() {
        let img = RawImage::from_fn(200, 200, |x, y| [x as u8, y as u8, 0]);
        let face = FaceBox { x: 10, y: 20, w: 50, h: 60 };
        let sq = face_crop_square(&img, &face).unwrap();
        assert_eq!((sq.width(), sq.height()), (60, 60));
        assert_eq!(sq.pixel(0, 0), [5, 20, 0]);
        assert_eq!(sq.pixel(59, 59), [64, 79, 0]);
    }

    #[test]
    fn face_crop_centered_box_is_center_crop() {
        let img = RawImage::from_fn(8, 6, |x, y| [x as u8, y as u8, 1]);
        let face = FaceBox { x: 1, y: 0, w: 6, h: 6 };
        assert_eq!(face_crop_square(&img, &face).unwrap(), center_crop_square(&img));
    }

    #[test]
    fn face_crop_near_corner_is_shifted_inside() {
        let img = RawImage::from_fn(100, 80, |x, y| [x as u8, y as u8, 0]);
        let face = FaceBox { x: 90, y: -5, w: 20, h: 30 };
        let sq = face_crop_square(&img, &face).unwrap();
        // side 30; centered left = 90 - 5 = 85 clamps to 70, top = -5 clamps to 0
        assert_eq!(sq.width(), 30);
        assert_eq!(sq.pixel(0, 0), [70, 0, 0]);
        assert_eq!(sq.pixel(29, 29), [99, 29, 0]);
    }

    #[test]
    fn face_crop_errors_and_fallback() {
        let img = RawImage::filled(10, 10, [0, 0, 0]);
        assert!(face_crop_square(&img, &FaceBox { x: 10, y: 0, w: 3, h: 3 }).is_err());
        assert!(face_crop_square(&img, &FaceBox { x: -5, y: 0, w: 5, h: 3 }).is_err());
        let big = face_crop_square(&RawImage::filled(12, 10, [1, 1, 1]), &FaceBox { x: 0, y: 0, w: 11, h: 4 }).unwrap();
        assert_eq!(big.width(), 10);
    }

    #[test]
    fn resize_cases() {
        let img = RawImage::from_fn(224, 224, |x, y| [(x * y) as u8, x as u8, y as u8]);
        assert_eq!(resize_bilinear(&img, 224).unwrap(), img);

        let flat = RawImage::filled(37, 37, [12, 200, 99]);
        assert_eq!(resize_bilinear(&flat, 224).unwrap(), RawImage::filled(224, 224, [12, 200, 99]));

        let checker = RawImage::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { [0; 3] } else { [255; 3] });
        assert_eq!(resize_bilinear(&checker, 1).unwrap().pixel(0, 0), [128, 128, 128]);

        assert!(resize_bilinear(&RawImage::filled(3, 2, [0; 3]), 2).is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let img = RawImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(31).wrapping_add((x * 7 + y * 13) as u64);
                [v as u8, (v >> 8) as u8, (v >> 16) as u8]
            });
            let bytes = encode_ppm(&img);
            let back = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_ppm(&back), bytes);
        }
    }
}
