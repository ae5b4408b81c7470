//! RGB rasters and the binary PPM (P6) codec used for dataset images.

use super::DataError;

/// Interleaved 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || channels == 0 || pixels.len() != width * height * channels {
            return Err(DataError::Format(format!(
                "raster {width}x{height}x{channels} does not match {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * self.channels;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `P6` header followed by raw RGB bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "PPM stores RGB only");
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, DataError> {
        let mut cur = PpmCursor { bytes, pos: 0 };
        if cur.token()? != b"P6" {
            return Err(DataError::Format("missing P6 magic".into()));
        }
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if maxval != 255 {
            return Err(DataError::Format(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(DataError::Format("missing raster separator".into())),
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| DataError::Format("image dimensions overflow".into()))?;
        let raster = &bytes[cur.pos..];
        if raster.len() != need {
            return Err(DataError::Format(format!(
                "expected {need} raster bytes, found {}",
                raster.len()
            )));
        }
        Image::new(width, height, 3, raster.to_vec())
    }
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DataError::Format("truncated PPM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, DataError> {
        let tok = self.token()?;
        let text = std::str::from_utf8(tok).map_err(|_| DataError::Format("non-ASCII header".into()))?;
        let value: usize = text
            .parse()
            .map_err(|_| DataError::Format(format!("bad header number {text:?}")))?;
        if value == 0 || value > 1 << 16 {
            return Err(DataError::Format(format!("header value {value} out of range")));
        }
        Ok(value)
    }
}
