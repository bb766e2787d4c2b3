//! Floating-point RGB images and PNG I/O.

use crate::layout::BoundingBox;

use super::DrawError;

/// Mid-grey; decodes from and encodes to the zero latent.
pub const BLANK_LEVEL: f64 = 127.5;

/// Row-major RGB with channel values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn blank(width: u32, height: u32) -> Self {
        Self::filled(width, height, [BLANK_LEVEL; 3])
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// The part of the image under `bbox`, clipped to the image.
    pub fn crop(&self, bbox: &BoundingBox) -> RgbImage {
        let x0 = bbox.x.min(self.width);
        let y0 = bbox.y.min(self.height);
        let x1 = (bbox.right().min(self.width as u64)) as u32;
        let y1 = (bbox.bottom().min(self.height as u64)) as u32;
        RgbImage::from_fn(x1 - x0, y1 - y0, |x, y| self.pixel(x0 + x, y0 + y))
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: u32, height: u32) -> RgbImage {
        if self.width == 0 || self.height == 0 {
            return RgbImage::blank(width, height);
        }
        RgbImage::from_fn(width, height, |x, y| {
            let sx = ((x as u64 * self.width as u64) / width as u64) as u32;
            let sy = ((y as u64 * self.height as u64) / height as u64) as u32;
            self.pixel(sx, sy)
        })
    }

    /// Copies `src` with its top-left corner at `(x, y)`; parts outside are dropped.
    pub fn paste(&mut self, src: &RgbImage, x: u32, y: u32) {
        for sy in 0..src.height {
            let ty = y as u64 + sy as u64;
            if ty >= self.height as u64 {
                break;
            }
            for sx in 0..src.width {
                let tx = x as u64 + sx as u64;
                if tx >= self.width as u64 {
                    break;
                }
                self.set_pixel(tx as u32, ty as u32, src.pixel(sx, sy));
            }
        }
    }

    /// 8-bit values as written to PNG.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>, DrawError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| DrawError::Image(e.to_string()))?;
            writer.write_image_data(&self.quantized()).map_err(|e| DrawError::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<RgbImage, DrawError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| DrawError::Image(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| DrawError::Image("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| DrawError::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(DrawError::Image(format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
        }
        let data = buf[..info.buffer_size()].iter().map(|&b| b as f64).collect();
        Ok(RgbImage { width: info.width, height: info.height, data })
    }
}

/// Width and height from a PNG header.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), DrawError> {
    let reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(|e| DrawError::Image(e.to_string()))?;
    let info = reader.info();
    Ok((info.width, info.height))
}
