//! PNG read/write for [`Image`]. PNG is the only supported interchange
//! format: lossless, so output hashes stay stable across identical runs.

use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::Image;

/// Decodes an 8-bit PNG (gray, gray+alpha, RGB, RGBA, or paletted) into an
/// [`Image`] with 1 or 3 channels; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Image(format!("cannot open {}: {e}", path.display())))?;
    decode_png(&bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("png decode: {e}")))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let keep = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 3,
        other => {
            return Err(Error::Image(format!(
                "unsupported png color type after normalization: {other:?}"
            )))
        }
    };
    let mut img = Image::zeros(height, width, keep);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * src_channels;
            for c in 0..keep {
                img.set(y, x, c, buf[base + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Encodes an image (1 or 3 channels) as an 8-bit PNG.
pub fn encode_png(image: &Image, writer: impl Write) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => {
            return Err(Error::Image(format!(
                "png encoding supports 1 or 3 channels, got {n}"
            )))
        }
    };
    let mut encoder = png::Encoder::new(writer, image.width as u32, image.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    writer
        .write_image_data(&image.to_u8())
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(())
}

pub fn encode_png_bytes(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_png(image, &mut out)?;
    Ok(out)
}

/// Writes a PNG via a temporary file and an atomic rename, so the
/// destination is never partially written.
pub fn write_png_atomic(image: &Image, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp-{}",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "output".into()),
            std::process::id()
        )),
        None => Path::new(&format!(".{}.tmp-{}", path.display(), std::process::id())).to_path_buf(),
    };
    {
        let file = File::create(&tmp)
            .map_err(|e| Error::Image(format!("cannot create {}: {e}", tmp.display())))?;
        let mut w = BufWriter::new(file);
        encode_png(image, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Image(format!("cannot move output into place: {e}"))
    })?;
    Ok(())
}
