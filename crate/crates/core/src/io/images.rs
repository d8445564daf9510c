use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ImageEncoder, ImageFormat, ImageReader};

use crate::colorspace::ImageRgb;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reads an 8-bit RGB or RGBA PNG, or a binary (P6) PPM with maxval 255.
/// Alpha is dropped and values are scaled by `1/255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageRgb<T>> {
    let path = path.as_ref();
    let fail = |msg: String| Error::format(path, msg);
    let mut magic = [0u8; 2];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| fail(format!("cannot read image: {e}")))?;
    let reader = ImageReader::new(BufReader::new(File::open(path).map_err(|e| fail(e.to_string()))?))
        .with_guessed_format()
        .map_err(|e| fail(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        Some(ImageFormat::Pnm) if &magic == b"P6" => {}
        Some(ImageFormat::Pnm) => return Err(fail("only binary P6 PPM files are supported".into())),
        other => return Err(fail(format!("unsupported image format {other:?}"))),
    }
    let decoded = reader.decode().map_err(|e| fail(e.to_string()))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(fail(format!(
                "unsupported pixel layout {:?}; expected 8-bit RGB or RGBA",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let scale = T::lit(1.0 / 255.0);
    let data = rgb.into_raw().into_iter().map(|b| T::lit(f64::from(b)) * scale).collect();
    ImageRgb::clamped(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

/// Nearest 8-bit level with halves rounded up: `floor(255·v + 0.5)`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    (255.0 * v.to_f64_lossy() + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes PNG or binary PPM, chosen by the `.png` / `.ppm` extension.
pub fn save_image<T: Scalar>(img: &ImageRgb<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.tensor().data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let out = || File::create(path).map(BufWriter::new).map_err(|e| Error::format(path, e.to_string()));
    let result = match ext.as_deref() {
        Some("png") => image::codecs::png::PngEncoder::new(out()?).write_image(&bytes, w, h, ColorType::Rgb8.into()),
        Some("ppm") => PnmEncoder::new(out()?)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&bytes, w, h, ColorType::Rgb8.into()),
        _ => return Err(Error::format(path, "output extension must be .png or .ppm")),
    };
    result.map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a single-channel `[H, W, 1]` map as a grayscale PNG scaled so the
/// largest value is white.
pub fn save_heatmap(map: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = map.hwc()?;
    if c != 1 {
        return Err(Error::dim("heatmap", map.shape(), &[h, w, 1]));
    }
    let peak = map.data().iter().cloned().fold(0.0, f64::max);
    let norm = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v * norm)).collect();
    let file = File::create(path).map_err(|e| Error::format(path, e.to_string()))?;
    image::codecs::png::PngEncoder::new(BufWriter::new(file))
        .write_image(&bytes, w as u32, h as u32, ColorType::L8.into())
        .map_err(|e| Error::format(path, e.to_string()))
}
