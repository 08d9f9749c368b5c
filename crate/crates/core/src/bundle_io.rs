//! On-disk scene bundles.
//!
//! ```text
//! scene.json                 metadata, objects, cameras
//! views/v{i}.png             8-bit RGB
//! pointmaps/v{i}.f32         little-endian f32, row-major, xyz interleaved
//! confidence/v{i}.f32        little-endian f32, row-major
//! masks/{object_id}/v{i}.png 8-bit gray, 0 or 255
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, Grid, Mask, PointMap, RgbImage};
use crate::scenegen::{Camera, ObjectSpec, SceneBundle, View};

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    scene_id: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    objects: Vec<ObjectSpec>,
    seed: u64,
    #[serde(default)]
    cameras: Vec<Camera>,
}

fn write(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read(dir: &Path, rel: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(rel)).map_err(|e| Error::Load {
        file: rel.to_string(),
        message: e.to_string(),
    })
}

pub fn f32_to_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("png encode: {e}")))?;
    Ok(out)
}

/// Binary mask as an 8-bit PNG with values 0 / 255.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("png encode: {e}")))?;
    Ok(out)
}

fn decode_png(bytes: &[u8], rel: &str) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Load {
        file: rel.to_string(),
        message: e.to_string(),
    })
}

fn corrupt(rel: &str, message: impl Into<String>) -> Error {
    Error::Load {
        file: rel.to_string(),
        message: message.into(),
    }
}

pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let meta = SceneMeta {
        scene_id: bundle.scene_id.clone(),
        n: bundle.views.len(),
        h: bundle.height(),
        w: bundle.width(),
        objects: bundle.objects.clone(),
        seed: bundle.rng_seed,
        cameras: bundle.views.iter().map(|v| v.camera.clone()).collect(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("scene metadata serializes");
    write(dir, "scene.json", &json)?;
    for (i, v) in bundle.views.iter().enumerate() {
        write(dir, &format!("views/v{i}.png"), &encode_rgb_png(&v.image)?)?;
        write(
            dir,
            &format!("pointmaps/v{i}.f32"),
            &f32_to_le_bytes(v.pointmap.data().iter().flatten().copied()),
        )?;
        write(
            dir,
            &format!("confidence/v{i}.f32"),
            &f32_to_le_bytes(v.confidence.data().iter().copied()),
        )?;
        for (id, m) in &v.masks {
            write(dir, &format!("masks/{id}/v{i}.png"), &encode_mask_png(m)?)?;
        }
    }
    Ok(())
}

pub fn load_pointmap(dir: &Path, rel: &str, h: usize, w: usize) -> Result<PointMap> {
    let vals = f32_from_le_bytes(&read(dir, rel)?).ok_or_else(|| corrupt(rel, "truncated float data"))?;
    if vals.len() != h * w * 3 {
        return Err(corrupt(rel, format!("expected {} floats, found {}", h * w * 3, vals.len())));
    }
    let pts = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Grid::from_vec(h, w, pts)
}

fn load_confidence(dir: &Path, rel: &str, h: usize, w: usize) -> Result<ConfidenceMap> {
    let vals = f32_from_le_bytes(&read(dir, rel)?).ok_or_else(|| corrupt(rel, "truncated float data"))?;
    if vals.len() != h * w {
        return Err(corrupt(rel, format!("expected {} floats, found {}", h * w, vals.len())));
    }
    Grid::from_vec(h, w, vals)
}

pub fn load_rgb_png(dir: &Path, rel: &str, h: usize, w: usize) -> Result<RgbImage> {
    let img = decode_png(&read(dir, rel)?, rel)?.to_rgb8();
    if img.height() as usize != h || img.width() as usize != w {
        return Err(corrupt(rel, format!("image is {}x{}, expected {h}x{w}", img.height(), img.width())));
    }
    Grid::from_vec(h, w, img.pixels().map(|p| p.0).collect())
}

fn load_mask(dir: &Path, rel: &str, h: usize, w: usize) -> Result<Mask> {
    let img = decode_png(&read(dir, rel)?, rel)?.to_luma8();
    if img.height() as usize != h || img.width() as usize != w {
        return Err(corrupt(rel, "mask has the wrong size"));
    }
    Grid::from_vec(h, w, img.pixels().map(|p| (p.0[0] >= 128) as u8).collect())
}

/// Catalog entry read from `scene.json` alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<String>,
}

pub fn read_scene_summary(dir: &Path) -> Result<SceneSummary> {
    let meta: SceneMeta = serde_json::from_slice(&read(dir, "scene.json")?)
        .map_err(|e| corrupt("scene.json", e.to_string()))?;
    Ok(SceneSummary {
        scene_id: meta.scene_id,
        num_views: meta.n,
        height: meta.h,
        width: meta.w,
        objects: meta.objects.into_iter().map(|o| o.object_id).collect(),
    })
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let meta: SceneMeta = serde_json::from_slice(&read(dir, "scene.json")?)
        .map_err(|e| corrupt("scene.json", e.to_string()))?;
    let (h, w) = (meta.h, meta.w);
    if meta.cameras.len() != meta.n {
        return Err(corrupt("scene.json", "camera count does not match N"));
    }
    let mut views = Vec::with_capacity(meta.n);
    for (i, camera) in meta.cameras.iter().enumerate() {
        let image = load_rgb_png(dir, &format!("views/v{i}.png"), h, w)?;
        let pointmap = load_pointmap(dir, &format!("pointmaps/v{i}.f32"), h, w)?;
        let confidence = load_confidence(dir, &format!("confidence/v{i}.f32"), h, w)?;
        let mut masks = BTreeMap::new();
        for o in &meta.objects {
            let rel = format!("masks/{}/v{i}.png", o.object_id);
            masks.insert(o.object_id.clone(), load_mask(dir, &rel, h, w)?);
        }
        views.push(View {
            image,
            pointmap,
            confidence,
            masks,
            camera: camera.clone(),
        });
    }
    let bundle = SceneBundle {
        scene_id: meta.scene_id,
        views,
        objects: meta.objects,
        rng_seed: meta.seed,
    };
    bundle.validate()?;
    Ok(bundle)
}
