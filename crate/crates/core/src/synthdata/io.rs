//! On-disk layout: `manifest.json`, one `proc{P}_frame{F}.ppm` per frame and
//! one `proc{P}_frame{F}_event{E}.pgm` mask per positive frame.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, DatasetManifest, FrameStore, Mask, Result};
use crate::pnm;
use crate::types::FrameRef;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    let s = dataset.store.frame_size();
    let plane = s * s;
    for p in &dataset.manifest.procedures {
        for f in 0..p.num_frames() {
            let frame = FrameRef::new(p.procedure_id, f as u32);
            let raw = dataset.store.raw(frame);
            let mut rgb = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                rgb.extend([raw[i], raw[plane + i], raw[2 * plane + i]]);
            }
            pnm::write_file(&dir.join(format!("{frame}.ppm")), &pnm::encode_ppm(s, s, &rgb))?;
        }
    }
    for e in &dataset.manifest.events {
        for (f, m) in e.frames().zip(&e.masks) {
            let path = dir.join(format!("{f}_event{}.pgm", e.event_id));
            pnm::write_file(&path, &pnm::encode_pgm(s, s, &m.to_bytes()))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let s = manifest.frame_size;
    let plane = s * s;
    let check = |path: &Path, w: usize, h: usize| {
        if (w, h) != (s, s) {
            Err(DataError::Manifest(format!("{}: expected {s}x{s}, found {w}x{h}", path.display())))
        } else {
            Ok(())
        }
    };
    let mut procedures = Vec::with_capacity(manifest.procedures.len());
    for p in &manifest.procedures {
        let mut data = Vec::with_capacity(p.num_frames() * 3 * plane);
        for f in 0..p.num_frames() {
            let path = dir.join(format!("{}.ppm", FrameRef::new(p.procedure_id, f as u32)));
            let (w, h, rgb) = pnm::read_pnm(&path)?;
            check(&path, w, h)?;
            if rgb.len() != 3 * plane {
                return Err(DataError::Manifest(format!("{}: expected an RGB image", path.display())));
            }
            for c in 0..3 {
                data.extend((0..plane).map(|i| rgb[3 * i + c]));
            }
        }
        procedures.push(data);
    }
    for e in &mut manifest.events {
        let mut masks = Vec::with_capacity(e.frame_indices.len());
        for &f in &e.frame_indices {
            let path = dir.join(format!("{}_event{}.pgm", FrameRef::new(e.procedure_id, f), e.event_id));
            let (w, h, gray) = pnm::read_pnm(&path)?;
            check(&path, w, h)?;
            if gray.len() != plane {
                return Err(DataError::Manifest(format!("{}: expected a graymap", path.display())));
            }
            masks.push(Mask::from_bytes(s, &gray));
        }
        e.masks = masks;
    }
    manifest.validate(true)?;
    Ok(Dataset {
        store: FrameStore::new(s, manifest.channels, procedures),
        manifest,
    })
}
