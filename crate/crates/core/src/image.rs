//! RGB images in `[0, 1]`, PPM codec and bicubic resampling.

use crate::error::{Error, Result};

/// Cubic convolution parameter (Catmull-Rom family).
pub const BICUBIC_A: f64 = -0.5;

/// Height × width × 3, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Bicubic resample of the region `(top, left, h, w)` to `out_h × out_w`,
    /// with pixel-center alignment and edge clamping.
    pub fn resize_region(
        &self,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Data(format!(
                "crop ({top},{left},{h},{w}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let taps = |pos: f64, lo: usize, len: usize| -> [(usize, f64); 4] {
            let base = pos.floor();
            let frac = pos - base;
            let mut out = [(0usize, 0.0f64); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let off = k as f64 - 1.0;
                let idx = (base + off).clamp(0.0, (len - 1) as f64) as usize;
                *slot = (lo + idx, cubic_weight(off - frac, BICUBIC_A));
            }
            out
        };
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for oy in 0..out_h {
            let ty = taps((oy as f64 + 0.5) * sy - 0.5, top, h);
            for ox in 0..out_w {
                let tx = taps((ox as f64 + 0.5) * sx - 0.5, left, w);
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for &(iy, wy) in &ty {
                        for &(ix, wx) in &tx {
                            acc += wy * wx * self.get(iy, ix, c) as f64;
                        }
                    }
                    data.push(acc as f32);
                }
            }
        }
        Image::new(out_h, out_w, data)
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        self.resize_region(0, 0, self.height, self.width, out_h, out_w)
    }

    pub fn clamp_unit(mut self) -> Image {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }
}

/// Keys' cubic convolution kernel.
pub fn cubic_weight(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Decodes a binary (P6) PPM.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("ppm: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Data(format!("ppm: unsupported magic {}", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("ppm: bad {what} `{s}`")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!("ppm: maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("ppm: raster needs {need} bytes")))?;
    let maxval_f = maxval as f32;
    let data = if bpp == 1 {
        raster.iter().map(|&b| b as f32 / maxval_f).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval_f)
            .collect()
    };
    Image::new(height, width, data)
}

/// Encodes as 8-bit P6.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(feature = "png")]
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data("png: only 8-bit images are supported".into()));
    }
    let px = &buf[..info.buffer_size()];
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = match info.color_type {
        png::ColorType::Rgb => px.iter().map(|&b| b as f32 / 255.0).collect(),
        png::ColorType::Rgba => px
            .chunks_exact(4)
            .flat_map(|c| c[..3].iter().map(|&b| b as f32 / 255.0))
            .collect(),
        png::ColorType::Grayscale => px
            .iter()
            .flat_map(|&b| std::iter::repeat(b as f32 / 255.0).take(3))
            .collect(),
        other => {
            return Err(Error::Data(format!(
                "png: unsupported color type {other:?}"
            )))
        }
    };
    Image::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_fixture_decodes_byte_exact() {
        let mut bytes = b"P6\n# fixture\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        let expect: Vec<f32> = [255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(img.data, expect);
        let mut canonical = b"P6\n2 2\n255\n".to_vec();
        canonical.extend_from_slice(&bytes[bytes.len() - 12..]);
        assert_eq!(encode_ppm(&img), canonical);
    }

    #[test]
    fn ppm_round_trip_8bit() {
        let img = Image::new(1, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_rejects_truncation_and_bad_magic() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::new(2, 3, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_ne!(img.flip_horizontal(), img);
    }

    #[test]
    fn bicubic_keeps_constants() {
        let img = Image::filled(5, 7, 0.37);
        let out = img.resize(11, 3).unwrap();
        for v in out.data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for frac in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2)
                .map(|k| cubic_weight(k as f64 - frac, BICUBIC_A))
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0, BICUBIC_A), 1.0);
        assert_eq!(cubic_weight(1.0, BICUBIC_A), 0.0);
        assert_eq!(cubic_weight(2.0, BICUBIC_A), 0.0);
    }
}
