use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::CodecError;
use crate::tensor::Tensor3;
use crate::Scalar;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * 3, "rgb buffer size");
        Self { height, width, data }
    }

    /// Quantizes a 3-channel image in `[0, 1]`.
    pub fn from_unit<S: Scalar>(img: &Tensor3<S>) -> Self {
        assert_eq!(img.channels, 3, "rgb image expected");
        let data = img
            .data
            .iter()
            .map(|&v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(img.height, img.width, data)
    }

    pub fn to_unit<S: Scalar>(&self) -> Tensor3<S> {
        let inv = 1.0 / 255.0;
        Tensor3::from_vec(
            self.height,
            self.width,
            3,
            self.data.iter().map(|&b| S::of(b as f64 * inv)).collect(),
        )
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Image {
        assert!(row + rows <= self.height && col + cols <= self.width, "crop outside image");
        let mut data = Vec::with_capacity(rows * cols * 3);
        for y in row..row + rows {
            let start = (y * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + cols * 3]);
        }
        Image::new(rows, cols, data)
    }

    pub fn sha256(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() + 8);
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&self.data);
        super::sha256_hex(&bytes)
    }
}

pub fn write_image(image: &Image, path: &Path) -> Result<(), CodecError> {
    let file = File::create(path).map_err(|e| CodecError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CodecError::Png(e.to_string()))?;
    writer
        .write_image_data(&image.data)
        .map_err(|e| CodecError::Png(e.to_string()))?;
    writer.finish().map_err(|e| CodecError::Png(e.to_string()))
}

/// Reads an 8-bit RGB PNG. Other bit depths and color types are rejected.
pub fn read_image(path: &Path) -> Result<Image, CodecError> {
    let file = File::open(path).map_err(|e| CodecError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| CodecError::Png(e.to_string()))?;
    let info = reader.info();
    let unsupported = |detail: String| CodecError::UnsupportedImage {
        path: path.display().to_string(),
        detail,
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("{:?}-bit samples, only 8-bit is supported", info.bit_depth)));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(unsupported(format!("color type {:?}, only RGB is supported", info.color_type)));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| CodecError::Png(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks_exact(frame.line_size).take(h) {
        data.extend_from_slice(&row[..w * 3]);
    }
    Ok(Image::new(h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::new(3, 5, (0..45).map(|i| (i * 37 % 256) as u8).collect())
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_image(&sample(), &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), sample());
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0u8; 24]).unwrap();
        w.finish().unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(err.to_string().contains("only 8-bit"), "{err}");
    }

    #[test]
    fn pixel_hash_is_frozen() {
        // sha256 of u32 LE height, u32 LE width, then the pixels.
        let h = sample().sha256();
        assert_eq!(h.len(), 64);
        assert_eq!(h, "116185d50e879fd38edf4cb3115d34bd30693c05211e372f0585545e1e63a539");
        let mut other = sample();
        other.data[0] ^= 1;
        assert_ne!(other.sha256(), h);
    }

    #[test]
    fn quantize_round_trip() {
        let img = sample();
        assert_eq!(Image::from_unit(&img.to_unit::<f64>()), img);
        assert_eq!(Image::from_unit(&img.to_unit::<f32>()), img);
    }

    #[test]
    fn crop_rows() {
        let c = sample().crop(1, 2, 2, 2);
        assert_eq!(c.data[..3], sample().data[(5 + 2) * 3..(5 + 2) * 3 + 3]);
    }
}
