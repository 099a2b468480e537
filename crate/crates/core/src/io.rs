//! Little-endian binary formats for images and model checkpoints.
//!
//! Image (`FNIM`):
//!
//! ```text
//! "FNIM" | u16 height | u16 width | f64 × height·width (row-major)
//! ```
//!
//! Checkpoint (`FNPM`):
//!
//! ```text
//! "FNPM" | u16 version | u16 kind
//! kind 1 (prompts):  u32 layers | u32 prompt_len | u32 embed_dim | f64 payload
//! kind 2 (backbone): u32 image_size | u32 patch_size | u32 embed_dim
//!                    | u32 layers | u32 prompt_len | u8 activation | f64 payload
//! ```
//!
//! Payload matrices are row-major; a prompt set is stored layer after layer,
//! a backbone as patch embedding, token mixes, channel mixes, then head.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mri::Image;
use crate::promptmodel::{push_row_major, Activation, Backbone, ModelDims, PromptSet};

pub const IMAGE_MAGIC: &[u8; 4] = b"FNIM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNPM";
pub const CHECKPOINT_VERSION: u16 = 1;
const KIND_PROMPTS: u16 = 1;
const KIND_BACKBONE: u16 = 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid(format!(
                "truncated data: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::invalid("size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.f64s(rows * cols)?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(|x| x.to_le_bytes())
        .map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")))
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let h = u16::try_from(img.height()).map_err(|_| Error::invalid("image height exceeds u16"))?;
    let w = u16::try_from(img.width()).map_err(|_| Error::invalid("image width exceeds u16"))?;
    let mut out = Vec::with_capacity(8 + 8 * img.pixels().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    put_f64s(&mut out, img.pixels());
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != IMAGE_MAGIC {
        return Err(Error::invalid("missing FNIM magic"));
    }
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let pixels = r.f64s(h * w)?;
    r.finish()?;
    Image::new(h, w, pixels)
}

/// One CSV line per image row.
pub fn image_to_csv(img: &Image) -> String {
    let mut s = String::new();
    for row in img.pixels().chunks(img.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

fn header(kind: u16) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out
}

fn read_header(r: &mut Reader<'_>, expected: u16) -> Result<()> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::invalid("missing FNPM magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = r.u16()?;
    if kind != expected {
        return Err(Error::invalid(format!(
            "checkpoint kind {kind}, expected {expected}"
        )));
    }
    Ok(())
}

pub fn encode_prompts(prompts: &PromptSet) -> Result<Vec<u8>> {
    let (l, d) = prompts
        .layers
        .first()
        .map(|m| m.shape())
        .ok_or_else(|| Error::invalid("prompt set has no layers"))?;
    if prompts.layers.iter().any(|m| m.shape() != (l, d)) {
        return Err(Error::invalid("prompt layers have differing shapes"));
    }
    let mut out = header(KIND_PROMPTS);
    out.extend_from_slice(&dim_u32(prompts.layers.len())?);
    out.extend_from_slice(&dim_u32(l)?);
    out.extend_from_slice(&dim_u32(d)?);
    put_f64s(&mut out, &prompts.flatten());
    Ok(out)
}

pub fn decode_prompts(bytes: &[u8]) -> Result<PromptSet> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, KIND_PROMPTS)?;
    let (layers, l, d) = (r.u32()?, r.u32()?, r.u32()?);
    let layers = (0..layers)
        .map(|_| r.matrix(l, d))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(PromptSet { layers })
}

pub fn encode_backbone(backbone: &Backbone) -> Result<Vec<u8>> {
    let dims = &backbone.dims;
    let mut out = header(KIND_BACKBONE);
    for v in [
        dims.image_size,
        dims.patch_size,
        dims.embed_dim,
        dims.layers,
        dims.prompt_len,
    ] {
        out.extend_from_slice(&dim_u32(v)?);
    }
    out.push(backbone.activation.code());
    let mut payload = Vec::with_capacity(backbone.scalar_count());
    for m in backbone.parameters() {
        push_row_major(&mut payload, m);
    }
    put_f64s(&mut out, &payload);
    Ok(out)
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, KIND_BACKBONE)?;
    let dims = ModelDims {
        image_size: r.u32()?,
        patch_size: r.u32()?,
        embed_dim: r.u32()?,
        layers: r.u32()?,
        prompt_len: r.u32()?,
    };
    dims.validate()?;
    let activation =
        Activation::from_code(r.u8()?).ok_or_else(|| Error::invalid("unknown activation code"))?;
    let (n, d, l) = (dims.tokens(), dims.embed_dim, dims.prompt_len);
    let patch_embed = r.matrix(dims.patch_pixels(), d)?;
    let token_mix = (0..dims.layers)
        .map(|_| r.matrix(n, l + n))
        .collect::<Result<Vec<_>>>()?;
    let channel_mix = (0..dims.layers)
        .map(|_| r.matrix(d, d))
        .collect::<Result<Vec<_>>>()?;
    let head = r.matrix(n * d, dims.pixels())?;
    r.finish()?;
    Ok(Backbone {
        dims,
        activation,
        patch_embed,
        token_mix,
        channel_mix,
        head,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_bytes(path)?)
}

pub fn write_prompts(path: &Path, prompts: &PromptSet) -> Result<()> {
    write_bytes(path, &encode_prompts(prompts)?)
}

pub fn read_prompts(path: &Path) -> Result<PromptSet> {
    decode_prompts(&read_bytes(path)?)
}

pub fn write_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    write_bytes(path, &encode_backbone(backbone)?)
}

pub fn read_backbone(path: &Path) -> Result<Backbone> {
    decode_backbone(&read_bytes(path)?)
}
