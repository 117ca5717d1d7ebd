//! PNG and manifest serialisation.

use super::{Corpus, DatasetManifest, ImageSample, ManifestEntry, Mask, Provenance, Split};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// 8-bit grayscale PNG; values are rounded to the nearest `k / 255`.
pub fn write_png(path: impl AsRef<Path>, side: usize, pixels: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(path.as_ref(), side, png::BitDepth::Eight, &bytes)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<(usize, Vec<f32>)> {
    let (w, h, depth, raw) = decode(path.as_ref())?;
    if depth != png::BitDepth::Eight || w != h {
        return Err(Error::Format(format!(
            "{}: expected square 8-bit grayscale",
            path.as_ref().display()
        )));
    }
    Ok((w, raw.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// 1-bit grayscale PNG.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let row = mask.side.div_ceil(8);
    let mut packed = vec![0u8; row * mask.side];
    for y in 0..mask.side {
        for x in 0..mask.side {
            if mask.data[y * mask.side + x] != 0 {
                packed[y * row + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode(path.as_ref(), mask.side, png::BitDepth::One, &packed)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let (w, h, depth, raw) = decode(path.as_ref())?;
    if w != h {
        return Err(Error::Format(format!(
            "{}: mask is not square",
            path.as_ref().display()
        )));
    }
    let data = match depth {
        png::BitDepth::One => {
            let row = w.div_ceil(8);
            (0..w * w)
                .map(|i| (raw[(i / w) * row + (i % w) / 8] >> (7 - (i % w) % 8)) & 1)
                .collect()
        }
        png::BitDepth::Eight => raw.iter().map(|&b| (b >= 128) as u8).collect(),
        _ => {
            return Err(Error::Format(format!(
                "{}: unsupported mask depth",
                path.as_ref().display()
            )))
        }
    };
    Ok(Mask::new(w, data))
}

fn encode(path: &Path, side: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), side as u32, side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))
}

fn decode(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(f));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!("{}: not grayscale", path.display())));
    }
    let (w, h, depth) = (info.width as usize, info.height as usize, info.bit_depth);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, depth, buf))
}

const HEADER: [&str; 6] = ["id", "path", "patient_id", "labels", "split", "mask_path"];

pub(crate) fn write_manifest_to(m: &DatasetManifest, w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HEADER)?;
    for e in &m.entries {
        let labels: Vec<&str> = e
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(c, _)| m.class_names[c].as_str())
            .collect();
        let split = m.split_assignment.get(&e.id).map(|s| s.name()).unwrap_or("");
        wr.write_record([
            e.id.as_str(),
            e.path.as_str(),
            e.patient_id.as_str(),
            &labels.join("|"),
            split,
            e.mask_path.as_deref().unwrap_or(""),
        ])?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Writes the manifest CSV. Class names are stored in a `classes.txt` next to it.
pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(m, BufWriter::new(f))?;
    let classes = path.with_file_name("classes.txt");
    std::fs::write(&classes, m.class_names.join("\n") + "\n").map_err(|e| Error::io(&classes, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let classes = path.with_file_name("classes.txt");
    let names = std::fs::read_to_string(&classes).map_err(|e| Error::io(&classes, e))?;
    let class_names: Vec<String> = names.lines().filter(|l| !l.is_empty()).map(String::from).collect();
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let mut m = DatasetManifest {
        class_names,
        ..Default::default()
    };
    for rec in rd.records() {
        let rec = rec?;
        let mut labels = vec![0u8; m.class_names.len()];
        for name in rec[3].split('|').filter(|s| !s.is_empty()) {
            let c = m
                .class_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Format(format!("unknown class `{name}`")))?;
            labels[c] = 1;
        }
        if !rec[4].is_empty() {
            let s = Split::parse(&rec[4]).ok_or_else(|| Error::Format(format!("unknown split `{}`", &rec[4])))?;
            m.split_assignment.insert(rec[0].to_string(), s);
        }
        m.entries.push(ManifestEntry {
            id: rec[0].to_string(),
            path: rec[1].to_string(),
            patient_id: rec[2].to_string(),
            labels,
            mask_path: (!rec[5].is_empty()).then(|| rec[5].to_string()),
        });
    }
    Ok(m)
}

/// Writes `manifest.csv`, `classes.txt`, `images/*.png` and `masks/*.png` under `dir`.
/// Entry paths are taken relative to `dir`.
pub fn save_corpus(c: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let by_id = c.index();
    for e in &c.manifest.entries {
        let s = &c.samples[by_id[&e.id]];
        write_png(dir.join(&e.path), s.side, &s.pixels)?;
        if let (Some(mp), Some(mid)) = (&e.mask_path, &s.mask_id) {
            write_mask_png(dir.join(mp), &c.masks[mid])?;
        }
    }
    write_manifest(&c.manifest, dir.join("manifest.csv"))
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir.join("manifest.csv"))?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut masks = BTreeMap::new();
    for e in &manifest.entries {
        let (side, pixels) = read_png(dir.join(&e.path))?;
        let mask_id = match &e.mask_path {
            Some(mp) => {
                let id = format!("{}_mask", e.id);
                masks.insert(id.clone(), read_mask_png(dir.join(mp))?);
                Some(id)
            }
            None => None,
        };
        samples.push(ImageSample {
            id: e.id.clone(),
            side,
            pixels,
            labels: e.labels.clone(),
            patient_id: e.patient_id.clone(),
            provenance: Provenance::Real,
            base_id: None,
            mask_id,
        });
    }
    Ok(Corpus {
        manifest,
        samples,
        masks,
    })
}
