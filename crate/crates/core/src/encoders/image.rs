//! Image inputs: binary PGM (P5) grayscale files downscaled to 32×32, or
//! precomputed feature vectors keyed by `image_ref`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, scaled to [0, 1].
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// 32×32 grid, values in [0, 1].
    Pixels(Vec<f32>),
    Features(Vec<f32>),
}

impl ImageInput {
    pub fn as_slice(&self) -> &[f32] {
        match self {
            ImageInput::Pixels(p) => p,
            ImageInput::Features(f) => f,
        }
    }

    pub fn into_vec(self) -> Vec<f32> {
        match self {
            ImageInput::Pixels(p) | ImageInput::Features(p) => p,
        }
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn parse_pgm(bytes: &[u8], context: &str) -> Result<GrayImage> {
    let bad = |m: &str| Error::parse(context, m);
    let mut pos = 0;
    if pgm_token(bytes, &mut pos) != Some(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = |name: &str| -> Result<usize> {
        let tok = pgm_token(bytes, &mut pos).ok_or_else(|| bad(&format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("bad {name}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid header values"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated raster"))?;
    let scale = 1.0 / maxval as f32;
    let pixels = if bpp == 1 {
        raster
            .iter()
            .map(|&b| (b as f32 * scale).min(1.0))
            .collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 * scale).min(1.0))
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

/// Area-average resampling to `out_w × out_h`: each output pixel is the
/// coverage-weighted mean of the source pixels under it.
pub fn downscale_area(img: &GrayImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..out_w {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            let mut y = y0.floor() as usize;
            while (y as f64) < y1 && y < img.height {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                let mut x = x0.floor() as usize;
                while (x as f64) < x1 && x < img.width {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += img.pixels[y * img.width + x] as f64 * wx * wy;
                    area += wx * wy;
                    x += 1;
                }
                y += 1;
            }
            out.push(if area > 0.0 { (acc / area) as f32 } else { 0.0 });
        }
    }
    out
}

#[derive(Deserialize)]
struct FeatureRecord {
    image_ref: String,
    vector: Vec<f32>,
}

/// Resolves `image_ref`s to model inputs: feature vectors first, then PGM files under a root.
#[derive(Debug, Clone, Default)]
pub struct ImageSource {
    features: HashMap<String, Vec<f32>>,
    feature_dim: Option<usize>,
    pixel_root: Option<PathBuf>,
}

impl ImageSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_pixel_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.pixel_root = Some(root.into());
        self
    }

    pub fn insert_feature(&mut self, image_ref: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        match self.feature_dim {
            Some(d) if d != vector.len() => {
                return Err(Error::parse(
                    "features",
                    format!("vector length {} differs from {d}", vector.len()),
                ))
            }
            _ => self.feature_dim = Some(vector.len()),
        }
        self.features.insert(image_ref.into(), vector);
        Ok(())
    }

    /// Loads `{image_ref, vector}` JSONL.
    pub fn load_features(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: FeatureRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
            self.insert_feature(rec.image_ref, rec.vector)?;
        }
        Ok(())
    }

    /// Input length the image encoder must accept.
    pub fn input_dim(&self) -> usize {
        self.feature_dim.unwrap_or(IMAGE_SIDE * IMAGE_SIDE)
    }

    pub fn resolve(&self, image_ref: &str) -> Result<ImageInput> {
        if let Some(v) = self.features.get(image_ref) {
            return Ok(ImageInput::Features(v.clone()));
        }
        if let Some(root) = &self.pixel_root {
            // a converted `<stem>.pgm` beside a non-PGM original is preferred
            let path = root.join(image_ref);
            let converted = path.with_extension("pgm");
            let chosen = if converted.is_file() { converted } else { path };
            if chosen.is_file() {
                let img = read_pgm(&chosen)?;
                return Ok(ImageInput::Pixels(downscale_area(
                    &img, IMAGE_SIDE, IMAGE_SIDE,
                )));
            }
        }
        Err(Error::MissingImage(image_ref.to_string()))
    }
}

pub fn features_to_jsonl<'a>(items: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> String {
    let mut out = String::new();
    for (r, v) in items {
        out.push_str(&serde_json::json!({ "image_ref": r, "vector": v }).to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, maxval: usize, data: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n# comment\n{w} {h}\n{maxval}\n").into_bytes();
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn parses_p5() {
        let img = parse_pgm(&pgm(2, 2, 255, &[0, 255, 51, 102]), "t").unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        for (p, w) in img.pixels.iter().zip([0.0, 1.0, 0.2, 0.4]) {
            assert!((p - w).abs() < 1e-6);
        }
        assert!(parse_pgm(b"P2\n1 1\n255\n0", "t").is_err());
        assert!(parse_pgm(&pgm(4, 4, 255, &[0; 3]), "t").is_err());
    }

    #[test]
    fn area_downscale_averages_blocks() {
        // 4×4 → 2×2: each output is the mean of one 2×2 block
        let pixels = vec![
            0.0, 0.2, 1.0, 1.0, //
            0.4, 0.2, 1.0, 1.0, //
            0.0, 0.0, 0.5, 0.5, //
            0.0, 0.0, 0.5, 0.5,
        ];
        let img = GrayImage {
            width: 4,
            height: 4,
            pixels,
        };
        let out = downscale_area(&img, 2, 2);
        let want = [0.2, 1.0, 0.0, 0.5];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-6);
        }
        // non-integer ratio keeps a constant image constant
        let flat = GrayImage {
            width: 7,
            height: 5,
            pixels: vec![0.3; 35],
        };
        assert!(downscale_area(&flat, 3, 2)
            .iter()
            .all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn resolve_prefers_features_and_reports_missing() {
        let mut src = ImageSource::new();
        src.insert_feature("a", vec![1.0, 2.0]).unwrap();
        assert!(src.insert_feature("b", vec![1.0]).is_err());
        assert_eq!(
            src.resolve("a").unwrap(),
            ImageInput::Features(vec![1.0, 2.0])
        );
        assert_eq!(src.input_dim(), 2);
        match src.resolve("nope") {
            Err(Error::MissingImage(r)) => assert_eq!(r, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pixel_path_yields_32x32() {
        let dir = std::env::temp_dir().join(format!("cfd-img-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("x.pgm"), pgm(64, 64, 255, &vec![128; 64 * 64])).unwrap();
        let src = ImageSource::new().with_pixel_root(&dir);
        let ImageInput::Pixels(p) = src.resolve("x.pgm").unwrap() else {
            panic!()
        };
        assert_eq!(p.len(), IMAGE_SIDE * IMAGE_SIDE);
        assert_eq!(src.input_dim(), 1024);
        // a jpg reference falls back to its converted sibling
        fs::create_dir_all(dir.join("case1")).unwrap();
        fs::write(dir.join("case1/source.jpg"), b"\xff\xd8 not pgm").unwrap();
        fs::write(dir.join("case1/source.pgm"), pgm(8, 8, 255, &[9; 64])).unwrap();
        assert!(matches!(
            src.resolve("case1/source.jpg").unwrap(),
            ImageInput::Pixels(_)
        ));
        fs::remove_dir_all(&dir).ok();
    }
}
