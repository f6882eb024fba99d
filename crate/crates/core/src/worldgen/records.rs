//! Dataset files: one record per sample.
//!
//! A record is a JSON manifest (annotations, labels, seed) followed by the
//! sample's frames in the checkpoint tensor-container format. Records are
//! length-prefixed, and the file opens with a small header, so splits can be
//! streamed or memory-mapped later without touching the payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AcreEpisode, AcrePanel, FrameAnn, ObjectMeta, QuestionType, VideoSample};
use crate::checkpoint::{read_container, write_container, CheckpointError};
use crate::codec::Light;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: String,
    kind: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoManifest {
    seed: u64,
    k: usize,
    objects: Vec<ObjectMeta>,
    anns: Vec<FrameAnn>,
    snitch_index: usize,
    snitch_cell: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AcreManifest {
    seed: u64,
    contexts: Vec<AcrePanel>,
    query: AcrePanel,
    blicket_mask: Vec<bool>,
    label: Light,
    question_type: QuestionType,
}

fn write_block<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), CheckpointError> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<u8>, CheckpointError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Stacks per-frame (3, H, W) tensors into one (T, 3, H, W) payload tensor.
fn stack_frames(frames: &[Tensor<f32>]) -> Tensor<f32> {
    let fshape = frames[0].shape().to_vec();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(&fshape);
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(shape, data).expect("stacked frame volume")
}

fn unstack_frames(stacked: &Tensor<f32>) -> Result<Vec<Tensor<f32>>, CheckpointError> {
    let s = stacked.shape();
    if s.len() != 4 {
        return Err(CheckpointError::Format(format!("frames tensor must be 4-D, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let fshape = vec![s[1], s[2], s[3]];
    Ok((0..s[0])
        .map(|t| {
            Tensor::new(fshape.clone(), stacked.data()[t * per..(t + 1) * per].to_vec()).unwrap()
        })
        .collect())
}

pub fn write_video_records(path: &Path, samples: &[VideoSample]) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header =
        FileHeader { version: "1".into(), kind: "video".into(), count: samples.len() };
    write_block(&mut w, &serde_json::to_vec(&header)?)?;
    for s in samples {
        let manifest = VideoManifest {
            seed: s.seed,
            k: s.k,
            objects: s.objects.clone(),
            anns: s.anns.clone(),
            snitch_index: s.snitch_index,
            snitch_cell: s.snitch_cell,
        };
        write_block(&mut w, &serde_json::to_vec(&manifest)?)?;
        let stacked = stack_frames(&s.frames);
        let mut container = Vec::new();
        write_container(&mut container, &[("frames".into(), &stacked)], serde_json::Value::Null)?;
        write_block(&mut w, &container)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_video_records(path: &Path) -> Result<Vec<VideoSample>, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: FileHeader = serde_json::from_slice(&read_block(&mut r)?)?;
    if header.kind != "video" || header.version != "1" {
        return Err(CheckpointError::Format(format!(
            "expected video records v1, got {} v{}",
            header.kind, header.version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let manifest: VideoManifest = serde_json::from_slice(&read_block(&mut r)?)?;
        let container = read_block(&mut r)?;
        let (_, tensors) = read_container(&mut container.as_slice())?;
        let stacked = &tensors
            .iter()
            .find(|(n, _)| n == "frames")
            .ok_or_else(|| CheckpointError::Format("missing frames tensor".into()))?
            .1;
        out.push(VideoSample {
            seed: manifest.seed,
            k: manifest.k,
            objects: manifest.objects,
            frames: unstack_frames(stacked)?,
            anns: manifest.anns,
            snitch_index: manifest.snitch_index,
            snitch_cell: manifest.snitch_cell,
        });
    }
    Ok(out)
}

pub fn write_acre_records(path: &Path, episodes: &[AcreEpisode]) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = FileHeader { version: "1".into(), kind: "acre".into(), count: episodes.len() };
    write_block(&mut w, &serde_json::to_vec(&header)?)?;
    for e in episodes {
        let manifest = AcreManifest {
            seed: e.seed,
            contexts: e.contexts.clone(),
            query: e.query.clone(),
            blicket_mask: e.blicket_mask.clone(),
            label: e.label,
            question_type: e.question_type,
        };
        write_block(&mut w, &serde_json::to_vec(&manifest)?)?;
        let stacked = stack_frames(&e.frames);
        let mut container = Vec::new();
        write_container(&mut container, &[("frames".into(), &stacked)], serde_json::Value::Null)?;
        write_block(&mut w, &container)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_acre_records(path: &Path) -> Result<Vec<AcreEpisode>, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: FileHeader = serde_json::from_slice(&read_block(&mut r)?)?;
    if header.kind != "acre" || header.version != "1" {
        return Err(CheckpointError::Format(format!(
            "expected acre records v1, got {} v{}",
            header.kind, header.version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let manifest: AcreManifest = serde_json::from_slice(&read_block(&mut r)?)?;
        let container = read_block(&mut r)?;
        let (_, tensors) = read_container(&mut container.as_slice())?;
        let stacked = &tensors
            .iter()
            .find(|(n, _)| n == "frames")
            .ok_or_else(|| CheckpointError::Format("missing frames tensor".into()))?
            .1;
        out.push(AcreEpisode {
            seed: manifest.seed,
            contexts: manifest.contexts,
            query: manifest.query,
            blicket_mask: manifest.blicket_mask,
            label: manifest.label,
            question_type: manifest.question_type,
            frames: unstack_frames(stacked)?,
        });
    }
    Ok(out)
}

/// Converts a (3, H, W) float frame to an 8-bit RGB image.
pub fn frame_to_rgb8(frame: &Tensor<f32>) -> image::RgbImage {
    let s = frame.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                (frame.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data()[plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data()[2 * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

/// Dumps frames as PNGs under `dir/sample_{i}/frame_{t}.png` for inspection.
pub fn write_png_dump(dir: &Path, samples: &[(String, &[Tensor<f32>])]) -> Result<(), CheckpointError> {
    for (name, frames) in samples {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        for (t, frame) in frames.iter().enumerate() {
            let img = frame_to_rgb8(frame);
            img.save(sub.join(format!("frame_{t:03}.png")))
                .map_err(|e| CheckpointError::Format(format!("png encode: {e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{gen_acre_episode, gen_cater_episode, AcreConfig, CaterConfig};

    #[test]
    fn video_records_roundtrip_and_are_byte_stable() {
        let cfg = CaterConfig { frames: 8, ..CaterConfig::default() };
        let samples: Vec<_> = (0..3).map(|s| gen_cater_episode(s, &cfg).unwrap()).collect();
        let dir = std::env::temp_dir().join(format!("records-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.records");
        let p2 = dir.join("b.records");
        write_video_records(&p1, &samples).unwrap();
        write_video_records(&p2, &samples).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_video_records(&p1).unwrap();
        assert_eq!(back, samples);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn acre_records_roundtrip() {
        let cfg = AcreConfig::default();
        let eps: Vec<_> = (0..3).map(|s| gen_acre_episode(s, &cfg).unwrap()).collect();
        let dir = std::env::temp_dir().join(format!("acre-records-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.records");
        write_acre_records(&p, &eps).unwrap();
        assert_eq!(read_acre_records(&p).unwrap(), eps);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
