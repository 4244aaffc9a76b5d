//! Image and dataset I/O: PNG and binary PGM/PPM decoding, saliency-map
//! encoding and the `RGB/`, `depth/`, `GT/` dataset layout.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One aligned RGB-D sample. All tensors have batch 1 and share `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1 × 3 × H × W` in [0, 1].
    pub rgb: Tensor,
    /// `1 × 1 × H × W` in [0, 1].
    pub depth: Tensor,
    /// `1 × 1 × H × W` in {0, 1}.
    pub gt: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, rgb: Tensor, depth: Tensor, gt: Tensor) -> Result<Self> {
        let (r, d, g) = (rgb.shape(), depth.shape(), gt.shape());
        if r.n != 1 || r.c != 3 || d.n != 1 || d.c != 1 || g.n != 1 || g.c != 1 {
            return Err(Error::shape("sample", format!("unexpected modality shapes {r}, {d}, {g}")));
        }
        if (r.h, r.w) != (d.h, d.w) || (r.h, r.w) != (g.h, g.w) {
            return Err(Error::shape("sample", format!("misaligned modalities {r}, {d}, {g}")));
        }
        Ok(Sample {
            id: id.into(),
            rgb,
            depth,
            gt,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.rgb.shape();
        (s.h, s.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Rgb,
    Gray,
}

impl ImageKind {
    fn channels(self) -> usize {
        match self {
            ImageKind::Rgb => 3,
            ImageKind::Gray => 1,
        }
    }
}

/// Decoded pixels as interleaved samples scaled to [0, 1].
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
}

impl Raster {
    fn into_tensor(self, kind: ImageKind) -> Tensor {
        let (w, h, src_c) = (self.width, self.height, self.channels);
        let px = |y: usize, x: usize, c: usize| self.samples[(y * w + x) * src_c + c];
        let shape = Shape::new(1, kind.channels(), h, w);
        Tensor::from_fn(shape, |_, c, y, x| match (kind, src_c) {
            (ImageKind::Rgb, 1 | 2) => px(y, x, 0),
            (ImageKind::Rgb, _) => px(y, x, c),
            (ImageKind::Gray, 1 | 2) => px(y, x, 0),
            (ImageKind::Gray, _) => 0.299 * px(y, x, 0) + 0.587 * px(y, x, 1) + 0.114 * px(y, x, 2),
        })
    }
}

fn decode_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e.to_string()))?;
    let channels = info.color_type.samples();
    let (width, height) = (info.width as usize, info.height as usize);
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero-sized image"));
    }
    let n = width * height * channels;
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .take(n)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(decode_err(path, format!("unexpected bit depth {other:?} after expansion"))),
    };
    Ok(Raster {
        width,
        height,
        channels,
        samples,
    })
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn pnm_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    let mut pos = 2;
    let mut field = |name: &str| pnm_token(bytes, &mut pos).ok_or_else(|| decode_err(path, format!("bad {name}")));
    let (width, height, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero-sized image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, format!("maxval {maxval} out of range")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "missing whitespace before raster"));
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < n * bps {
        return Err(decode_err(path, format!("raster truncated: {} of {} bytes", raster.len(), n * bps)));
    }
    let m = maxval as f32;
    let samples = if bps == 1 {
        raster[..n].iter().map(|&b| (b as f32 / m).min(1.0)).collect()
    } else {
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / m).min(1.0))
            .collect()
    };
    Ok(Raster {
        width,
        height,
        channels,
        samples,
    })
}

/// Loads a PNG or binary PGM/PPM as a `1 × C × H × W` tensor in [0, 1].
pub fn load_image(path: &Path, kind: ImageKind) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let raster = if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)?
    } else if bytes.len() >= 2 && bytes[0] == b'P' {
        decode_pnm(&bytes, path)?
    } else {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    };
    Ok(raster.into_tensor(kind))
}

/// Loads a mask and binarises it at 0.5.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_image(path, ImageKind::Gray)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes one channel (or three, for RGB) as 8-bit PNG or PGM/PPM,
/// chosen by extension.
pub fn encode_image(t: &Tensor, ext: &str) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::shape("encode_image", format!("expected 1×1×H×W or 1×3×H×W, got {s}")));
    }
    let mut pixels = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                pixels.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    match ext {
        "png" => {
            let mut out = Vec::new();
            let mut enc = png::Encoder::new(&mut out, s.w as u32, s.h as u32);
            enc.set_color(if s.c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::shape("encode_image", e.to_string()))?;
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::shape("encode_image", e.to_string()))?;
            writer.finish().map_err(|e| Error::shape("encode_image", e.to_string()))?;
            Ok(out)
        }
        "pgm" | "ppm" => {
            let magic = if s.c == 1 { "P5" } else { "P6" };
            let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
            out.extend_from_slice(&pixels);
            Ok(out)
        }
        other => Err(Error::UnsupportedFormat(PathBuf::from(format!("*.{other}")))),
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::UnsupportedFormat(path.to_path_buf()))
}

/// Writes an image tensor, format chosen by the path's extension.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_image(t, &extension(path)?)?;
    write_atomic(path, &bytes)
}

/// Saves a single-channel saliency map as 8-bit grayscale, rounding
/// `P · 255` half up.
pub fn save_saliency(p: &Tensor, path: &Path) -> Result<()> {
    if p.shape().c != 1 {
        return Err(Error::shape("save_saliency", format!("expected one channel, got {}", p.shape())));
    }
    save_image(p, path)
}

pub const RGB_DIR: &str = "RGB";
pub const DEPTH_DIR: &str = "depth";
pub const GT_DIR: &str = "GT";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub rgb_dir: String,
    pub depth_dir: String,
    pub gt_dir: String,
    pub split: String,
}

const IMAGE_EXTS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Stems of the supported image files in `dir`, sorted. A missing directory
/// yields an empty set.
pub fn image_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(format!("listing {}", dir.display()), e)),
    };
    for entry in rd {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Sample ids present in all three subdirectories, sorted.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let sets = [RGB_DIR, DEPTH_DIR, GT_DIR].map(|d| image_ids(&root.join(d)));
    let [rgb, depth, gt] = sets;
    let (rgb, depth, gt) = (rgb?, depth?, gt?);
    let ids: Vec<String> = rgb
        .iter()
        .filter(|id| depth.contains(*id) && gt.contains(*id))
        .cloned()
        .collect();
    if ids.is_empty() {
        return Err(Error::Dataset(format!(
            "no complete samples under {} ({RGB_DIR}: {}, {DEPTH_DIR}: {}, {GT_DIR}: {})",
            root.display(),
            rgb.len(),
            depth.len(),
            gt.len()
        )));
    }
    let dropped = rgb.len().max(depth.len()).max(gt.len()) - ids.len();
    if rgb.len() != ids.len() || depth.len() != ids.len() || gt.len() != ids.len() {
        log::warn!(
            "{}: {} ids lack one or more modalities ({RGB_DIR}: {}, {DEPTH_DIR}: {}, {GT_DIR}: {}); using {}",
            root.display(),
            dropped,
            rgb.len(),
            depth.len(),
            gt.len(),
            ids.len()
        );
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        ids,
        rgb_dir: RGB_DIR.into(),
        depth_dir: DEPTH_DIR.into(),
        gt_dir: GT_DIR.into(),
        split: root.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string(),
    })
}

/// First existing `<dir>/<id>.<ext>` over the supported extensions.
pub fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Dataset(format!("no image for `{id}` in {}", dir.display())))
}

impl DatasetManifest {
    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let rgb = load_image(&find_image(&self.root.join(&self.rgb_dir), id)?, ImageKind::Rgb)?;
        let depth = load_image(&find_image(&self.root.join(&self.depth_dir), id)?, ImageKind::Gray)?;
        let gt = load_mask(&find_image(&self.root.join(&self.gt_dir), id)?)?;
        Sample::new(id, rgb, depth, gt)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.ids.iter().map(|id| self.load_sample(id)).collect()
    }
}

/// Writes a sample in the standard layout as PNG files.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    for (dir, t) in [(RGB_DIR, &sample.rgb), (DEPTH_DIR, &sample.depth), (GT_DIR, &sample.gt)] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        save_image(t, &d.join(format!("{}.png", sample.id)))?;
    }
    Ok(())
}
