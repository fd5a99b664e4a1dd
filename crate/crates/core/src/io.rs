//! File formats: PNG/PPM images, stain-matrix CSV, model checkpoints and
//! dataset directories.

use std::fs;
use std::io::{BufReader, Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::{OdConfig, RgbPatch};
use crate::deconv::{MacenkoParams, StainMatrix, StainTarget};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, MethodMode, Model};
use crate::nn::{GroupKind, ModelParams, ParamGroup, Tensor};
use crate::synth::{Dataset, DatasetEntry, Split};
use crate::train::{LabeledPatch, TrainedModel};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

pub fn encode_png(patch: &RgbPatch) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, patch.width() as u32, patch.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&patch.to_u8()).map_err(png_err)?;
    }
    Ok(out)
}

/// Decodes any 8/16-bit PNG to RGB; alpha is dropped, gray is replicated.
pub fn decode_png(bytes: &[u8]) -> Result<RgbPatch> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("png: unexpanded palette".into())),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    RgbPatch::from_u8(w, h, &rgb)
}

pub fn encode_ppm(patch: &RgbPatch) -> Vec<u8> {
    let mut out = format!("P3\n{} {}\n255\n", patch.width(), patch.height());
    for row in patch.to_u8().chunks(patch.width() * 3) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Reads plain (P3) or binary (P6) PPM with maxval up to 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbPatch> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
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
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| bad("empty file"))?;
    let num = |pos: &mut usize| -> Result<usize> {
        token(pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad header"))
    };
    let (w, h, maxval) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only maxval 1..=255 is supported"));
    }
    let n = w * h * 3;
    let raw: Vec<usize> = match magic.as_str() {
        "P3" => (0..n).map(|_| num(&mut pos)).collect::<Result<_>>()?,
        "P6" => {
            let start = pos + 1;
            let data = bytes.get(start..start + n).ok_or_else(|| bad("truncated data"))?;
            data.iter().map(|&b| b as usize).collect()
        }
        _ => return Err(bad("expected P3 or P6")),
    };
    if raw.iter().any(|&v| v > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    let data = raw
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / maxval as f64, c[1] as f64 / maxval as f64, c[2] as f64 / maxval as f64])
        .collect();
    RgbPatch::new(w, h, data)
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Reads a PNG or PPM image, chosen by extension.
pub fn read_image(path: &Path) -> Result<RgbPatch> {
    let bytes = fs::read(path)?;
    if is_ppm(path) {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

/// Writes a PNG, or a plain PPM when the extension is `.ppm`.
pub fn write_image(path: &Path, patch: &RgbPatch) -> Result<()> {
    let bytes = if is_ppm(path) { encode_ppm(patch) } else { encode_png(patch)? };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn stain_csv(m: &StainMatrix) -> String {
    let mut out = String::from("stain,r,g,b\n");
    for (name, row) in ["H", "E"].iter().zip(m.rows()) {
        out.push_str(&format!("{name},{:.9},{:.9},{:.9}\n", row[0], row[1], row[2]));
    }
    out
}

pub fn parse_stain_csv(text: &str) -> Result<StainMatrix> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("stain csv: {e}")))?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("stain csv: expected 3 values in `{line}`")));
        }
        rows.push([vals[0], vals[1], vals[2]]);
    }
    if rows.len() != 2 {
        return Err(Error::Format(format!("stain csv: expected 2 rows, got {}", rows.len())));
    }
    StainMatrix::from_unnormalized([rows[0], rows[1]])
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: GroupKind,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    mode: MethodMode,
    lambda: f64,
    seed: u64,
    norm_target: Option<StainTarget>,
    macenko: MacenkoParams,
    od: OdConfig,
    tensors: Vec<TensorEntry>,
}

/// Magic, little-endian header length, JSON header, then every tensor as
/// little-endian `f64` in header order.
pub fn encode_checkpoint(m: &TrainedModel) -> Result<Vec<u8>> {
    let tensors = m
        .model
        .params
        .iter()
        .map(|(group, name, t)| TensorEntry {
            group,
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        arch: m.model.arch.clone(),
        mode: m.mode,
        lambda: m.lambda,
        seed: m.seed,
        norm_target: m.norm_target,
        macenko: m.macenko,
        od: m.od,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + m.model.params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in m.model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut params = ModelParams::default();
    let mut buf = [0u8; 8];
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.group_mut(e.group).push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let expected = crate::model::build_model(&header.arch, 0)?;
    let same_layout = GroupKind::ALL.iter().all(|&k| {
        let (a, b): (&ParamGroup, &ParamGroup) = (params.group(k), expected.params.group(k));
        a.names == b.names && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.shape() == y.shape())
    });
    if !same_layout {
        return Err(bad("tensors do not match the architecture"));
    }
    Ok(TrainedModel {
        model: Model {
            arch: header.arch,
            params,
        },
        mode: header.mode,
        lambda: header.lambda,
        seed: header.seed,
        norm_target: header.norm_target,
        macenko: header.macenko,
        od: header.od,
    })
}

pub fn save_checkpoint(path: &Path, m: &TrainedModel) -> Result<()> {
    fs::write(path, encode_checkpoint(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(&fs::read(path)?)
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,split,y,center_id,h_r,h_g,h_b,e_r,e_g,e_b";

/// Writes every patch as `center_<id>/class_<k>/patch_<n>.png` plus the
/// manifest.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for e in &dataset.entries {
        let rel = e.relative_path();
        write_image(&dir.join(&rel), &e.patch.patch)?;
        let m = e.patch.m.to_flat();
        let m: Vec<String> = m.iter().map(f64::to_string).collect();
        manifest.push_str(&format!(
            "{rel},{},{},{},{}\n",
            e.split.name(),
            e.patch.y,
            e.patch.center_id,
            m.join(",")
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let file = fs::File::open(dir.join(MANIFEST))?;
    let mut text = String::new();
    BufReader::new(file).read_to_string(&mut text)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format("manifest: unexpected header".into()));
    }
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| Error::Format(format!("manifest line {}: {m}", ln + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("expected 10 fields"));
        }
        let split: Split = f[1].parse()?;
        let y = f[2].parse().map_err(|_| bad("bad class id"))?;
        let center_id = f[3].parse().map_err(|_| bad("bad center id"))?;
        let m: Vec<f64> = f[4..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad stain value"))?;
        let index = f[0]
            .rsplit('_')
            .next()
            .and_then(|s| s.trim_end_matches(".png").parse().ok())
            .unwrap_or(ln);
        entries.push(DatasetEntry {
            patch: LabeledPatch {
                patch: read_image(&dir.join(f[0]))?,
                y,
                m: StainMatrix::from_flat(&m)?,
                center_id,
            },
            split,
            index,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no patches", dir.display())));
    }
    Ok(Dataset { entries })
}
