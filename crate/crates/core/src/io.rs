//! On-disk formats: 8-bit sRGB PNG, PFM, the `DPGS1` checkpoint, scene
//! bundle directories and CSV logs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::WaterProfile;
use crate::diff::{ParamVector, Slot};
use crate::error::{Error, Result};
use crate::field::{ColorField, ScalarField};
use crate::renderer::{Camera, GaussianPrimitive};
use crate::synth::{SceneBundle, SceneSpec};
use crate::train::{Checkpoint, LogRow, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DPGS1";

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Clamps to [0, 1], applies the sRGB transfer curve and writes 8-bit RGB.
pub fn write_png(path: &Path, img: &ColorField) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&v| (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round() as u8).collect();
    let mut w = enc.write_header().map_err(|e| format_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| format_err(path, e))?;
    w.finish().map_err(|e| format_err(path, e))?;
    Ok(())
}

/// Reads an 8-bit PNG as linear RGB in [0, 1]; gray and alpha are expanded
/// or dropped.
pub fn read_png(path: &Path) -> Result<ColorField> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "unexpanded palette image")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let lut: Vec<f64> = (0..256).map(|i| srgb_to_linear(i as f64 / 255.0)).collect();
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            if channels < 3 {
                data.extend([lut[px[0] as usize]; 3]);
            } else {
                data.extend((0..3).map(|c| lut[px[c] as usize]));
            }
        }
    }
    ColorField::new(w, h, data)
}

fn write_pfm_raw(path: &Path, kind: &str, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{kind}\n{width} {height}\n-1.0\n")?;
    // Rows are stored bottom to top.
    for y in (0..height).rev() {
        for v in &data[y * width * channels..(y + 1) * width * channels] {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Single-channel little-endian PFM (`Pf`), stored as 32-bit floats.
pub fn write_pfm(path: &Path, f: &ScalarField) -> Result<()> {
    write_pfm_raw(path, "Pf", f.width, f.height, 1, &f.data)
}

/// Three-channel little-endian PFM (`PF`).
pub fn write_pfm_color(path: &Path, f: &ColorField) -> Result<()> {
    write_pfm_raw(path, "PF", f.width, f.height, 3, &f.data)
}

fn read_pfm_raw(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    let channels = match next_line(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(path, format!("bad magic `{other}`"))),
    };
    let dims = next_line(&mut r)?;
    let mut it = dims.split_whitespace().map(|s| s.parse::<usize>());
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(format_err(path, format!("bad dimensions `{dims}`"))),
    };
    let scale: f64 = next_line(&mut r)?.parse().map_err(|_| format_err(path, "bad scale"))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n = w * h * channels;
    if bytes.len() != 4 * n {
        return Err(format_err(path, format!("expected {} payload bytes, found {}", 4 * n, bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| {
            let a = [b[0], b[1], b[2], b[3]];
            (if little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }) as f64
        })
        .collect();
    let row = w * channels;
    let mut data = Vec::with_capacity(n);
    for y in (0..h).rev() {
        data.extend_from_slice(&vals[y * row..(y + 1) * row]);
    }
    Ok((w, h, channels, data))
}

pub fn read_pfm(path: &Path) -> Result<ScalarField> {
    match read_pfm_raw(path)? {
        (w, h, 1, data) => ScalarField::new(w, h, data),
        _ => Err(format_err(path, "expected a single-channel PFM")),
    }
}

pub fn read_pfm_color(path: &Path) -> Result<ColorField> {
    match read_pfm_raw(path)? {
        (w, h, 3, data) => ColorField::new(w, h, data),
        _ => Err(format_err(path, "expected a three-channel PFM")),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    slots: Vec<Slot>,
    iteration: usize,
    profile: WaterProfile,
    config: TrainConfig,
}

/// `DPGS1`, header length (u32 LE), JSON header, then the f64 LE payload.
pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        slots: ck.params.slots().to_vec(),
        iteration: ck.iteration,
        profile: ck.profile,
        config: ck.config.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + 8 * ck.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in ck.params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DPGS1 checkpoint".into()));
    }
    let len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let body = &bytes[9..];
    if body.len() < len || !(body.len() - len).is_multiple_of(8) {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let data: Vec<f64> = body[len..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let params = ParamVector::from_parts(header.slots, data)?;
    Ok(Checkpoint { params, iteration: header.iteration, profile: header.profile, config: header.config })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?).map_err(|e| format_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| format_err(path, e))
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_json(path, &cameras)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    read_json(path)
}

/// Writes `clean/`, `degraded/` (PNG), `depth/` (PFM), `cameras.json`,
/// `truth.json` and `cloud.json`.
pub fn write_bundle(dir: &Path, b: &SceneBundle) -> Result<()> {
    for sub in ["clean", "degraded", "depth"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for i in 0..b.cameras.len() {
        write_png(&dir.join(format!("clean/{i:04}.png")), &b.clean[i])?;
        write_png(&dir.join(format!("degraded/{i:04}.png")), &b.degraded[i])?;
        write_pfm(&dir.join(format!("depth/{i:04}.pfm")), &b.depth[i])?;
    }
    write_cameras(&dir.join("cameras.json"), &b.cameras)?;
    write_json(&dir.join("truth.json"), &b.spec)?;
    write_json(&dir.join("cloud.json"), &b.cloud)?;
    Ok(())
}

/// Reads a bundle directory. Images come back quantized to 8 bits.
pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let spec: SceneSpec = read_json(&dir.join("truth.json"))?;
    let cloud: Vec<GaussianPrimitive> = read_json(&dir.join("cloud.json"))?;
    let cameras = read_cameras(&dir.join("cameras.json"))?;
    let mut clean = Vec::with_capacity(cameras.len());
    let mut degraded = Vec::with_capacity(cameras.len());
    let mut depth = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        clean.push(read_png(&dir.join(format!("clean/{i:04}.png")))?);
        degraded.push(read_png(&dir.join(format!("degraded/{i:04}.png")))?);
        depth.push(read_pfm(&dir.join(format!("depth/{i:04}.pfm")))?);
    }
    Ok(SceneBundle { spec, cloud, cameras, clean, depth, degraded })
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| format_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}
