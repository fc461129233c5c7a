//! Binary PPM/PGM images and the tab-separated dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Domain, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# id\tdomain\timage\tlabel";

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Header of a binary Netpbm file: returns width, height and payload.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut pos = 0;
    let mut line = 1;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format_at_line(path, 1, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'\n') => {
                    line += 1;
                    pos += 1;
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(Error::format_at_line(path, line, format!("missing {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| Error::format_at_line(path, line, format!("bad {name} {text:?}")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format_at_line(path, line, format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format_at_line(path, line, "zero image dimension"));
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format_at_line(path, line, "expected whitespace after maxval"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != w * h * channels {
        return Err(Error::format_at_line(
            path,
            line,
            format!("payload has {} bytes, expected {} for {w}×{h}", payload.len(), w * h * channels),
        ));
    }
    Ok((w, h, payload))
}

/// Writes a `[3, H, W]` image of 8-bit values as P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("PPM needs a [3, H, W] image, got {s:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let mut px = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            px.push(d[ch * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    write_netpbm(path, "P6", w, h, &px)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_netpbm(path, &bytes, b"P6", 3)?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != w * h {
        return Err(Error::Dimension(format!("{} labels for a {w}×{h} map", labels.len())));
    }
    write_netpbm(path, "P5", w, h, labels)
}

/// Returns width, height and the label bytes.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_netpbm(path, &bytes, b"P5", 1)?;
    Ok((w, h, payload.to_vec()))
}

/// Writes images under `images/`, labels under `labels/`, and the manifest.
pub fn dataset_write(samples: &[Sample], dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in samples {
        if s.id.is_empty() || s.id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::Data(format!("sample id {:?} cannot be stored", s.id)));
        }
        let image = format!("images/{}.ppm", s.id);
        write_ppm(&dir.join(&image), &s.image)?;
        manifest.push_str(&format!("{}\t{}\t{image}", s.id, s.domain));
        if let Some(labels) = &s.labels {
            let label = format!("labels/{}.pgm", s.id);
            write_pgm(&dir.join(&label), s.width(), s.height(), labels)?;
            manifest.push_str(&format!("\t{label}"));
        }
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn dataset_read(dir: &Path) -> Result<Vec<Sample>> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::format_at_line(&path, line, format!("expected 3 or 4 tab-separated fields, got {}", fields.len())));
        }
        let domain: Domain = fields[1].parse().map_err(|e: String| Error::format_at_line(&path, line, e))?;
        let image = read_ppm(&dir.join(fields[2]))?;
        let labels = match fields.get(3) {
            Some(rel) => {
                let (w, h, labels) = read_pgm(&dir.join(rel))?;
                if [h, w] != image.shape()[1..] {
                    return Err(Error::format_at_line(&path, line, format!("label map {w}×{h} does not match image")));
                }
                Some(labels)
            }
            None => None,
        };
        if (domain == Domain::Unlabeled) != labels.is_none() {
            return Err(Error::format_at_line(&path, line, format!("{domain} sample with{} labels", if labels.is_some() { "" } else { "out" })));
        }
        samples.push(Sample { id: fields[0].to_string(), image, labels, domain });
    }
    Ok(samples)
}
