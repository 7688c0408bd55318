//! 8-bit grayscale PGM (binary `P5` for writing; `P5` and `P2` for reading).

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Result, SureError};

/// Encodes a `[1, H, W]` image with values in `[0, 1]`.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[1, h, w] = image.shape() else {
        return Err(SureError::invalid(format!(
            "expected a [1, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(SureError::Parse("truncated PGM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| SureError::Parse("non-ASCII PGM header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| SureError::Parse(format!("bad PGM {what}: {t:?}")))
    }
}

/// Decodes to a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut hd = Header { bytes, pos: 0 };
    let magic = hd.token()?.to_owned();
    let (w, h, maxval) = (
        hd.number("width")?,
        hd.number("height")?,
        hd.number("maxval")?,
    );
    if w == 0 || h == 0 {
        return Err(SureError::Parse(format!("empty PGM image {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(SureError::Parse(format!(
            "only 8-bit PGM is supported, maxval {maxval}"
        )));
    }
    let scale = |v: usize| (v as f64 / maxval as f64) as f32;
    let data: Vec<f32> = match magic.as_str() {
        "P5" => {
            let start = hd.pos + 1;
            let raw = bytes
                .get(start..start + w * h)
                .ok_or_else(|| SureError::Parse(format!("PGM pixel data shorter than {w}x{h}")))?;
            raw.iter().map(|&b| scale(b as usize)).collect()
        }
        "P2" => (0..w * h)
            .map(|_| {
                let v = hd.number("pixel")?;
                if v > maxval {
                    return Err(SureError::Parse(format!(
                        "pixel {v} exceeds maxval {maxval}"
                    )));
                }
                Ok(scale(v))
            })
            .collect::<Result<_>>()?,
        other => {
            return Err(SureError::Parse(format!(
                "not a grayscale PGM (magic {other:?})"
            )))
        }
    };
    Tensor::new(vec![1, h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| SureError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        SureError::Parse(m) => SureError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| SureError::io(path, e))
}

/// Pads a `[1, H, W]` image on the right and bottom to `(height, width)` by
/// repeating the last row and column.
pub fn pad_replicate(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[1, h, w] = image.shape() else {
        return Err(SureError::invalid(format!(
            "expected a [1, H, W] image, got {:?}",
            image.shape()
        )));
    };
    if height < h || width < w {
        return Err(SureError::invalid(format!(
            "cannot pad {h}x{w} down to {height}x{width}"
        )));
    }
    let src = image.data();
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| src[y.min(h - 1) * w + x.min(w - 1)]))
        .collect();
    Tensor::new(vec![1, height, width], data)
}
