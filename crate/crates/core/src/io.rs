//! On-disk cohort layout.
//!
//! ```text
//! cohort/manifest.json
//! cohort/<study_id>/study.json
//! cohort/<study_id>/<view>/pre.png      8-bit RGB
//! cohort/<study_id>/<view>/post.png     8-bit RGB (optional)
//! cohort/<study_id>/<view>/scar.png     8-bit gray (optional)
//! cohort/<study_id>/<view>/params.f32   little-endian f32, channel-major [4, H, W]
//! cohort/<study_id>/<view>/params.json  shape, channel order, physical ranges
//! ```

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage as PngRgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::study::{
    ParamChannel, ParamMaps, ParamRanges, PostTarget, RgbImage, ScarMask, Study, ViewId,
    ViewSample, NUM_PARAM_CHANNELS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value onto the 8-bit grid used by the PNG files, so that
/// in-memory data and its on-disk form are identical.
pub fn quantize_u8(v: f32) -> f32 {
    to_u8(v) as f32 / 255.0
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w) = (img.height(), img.width());
    let buf = PngRgb::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_u8(img.0[[0, y, x]]),
            to_u8(img.0[[1, y, x]]),
            to_u8(img.0[[2, y, x]]),
        ])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(RgbImage(data))
}

pub fn encode_gray_png(mask: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(mask[[y as usize, x as usize]])])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<Array2<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    }))
}

pub fn f32_to_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(SofaError::InvalidValue(format!(
            "f32 buffer length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Sidecar describing a raw `params.f32` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsHeader {
    pub shape: [usize; 3],
    pub channels: Vec<ParamChannel>,
    pub dtype: String,
    pub ranges: ParamRanges,
}

impl ParamsHeader {
    pub fn for_maps(p: &ParamMaps) -> Self {
        Self {
            shape: [NUM_PARAM_CHANNELS, p.height(), p.width()],
            channels: ParamChannel::ALL.to_vec(),
            dtype: "f32le".into(),
            ranges: p.ranges,
        }
    }
}

pub fn params_from_parts(header: &ParamsHeader, bytes: &[u8]) -> Result<ParamMaps> {
    if header.channels != ParamChannel::ALL || header.dtype != "f32le" {
        return Err(SofaError::InvalidValue(
            "params must be f32le in channel order duration, force, temperature, power".into(),
        ));
    }
    let values = f32_from_le_bytes(bytes)?;
    let channels =
        Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
            .map_err(|e| SofaError::Shape(e.to_string()))?;
    ParamMaps::new(channels, header.ranges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    id: String,
    label: Option<u8>,
    meta: BTreeMap<String, serde_json::Value>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SofaError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

/// Writes `study` into `dir` (the study directory itself).
pub fn write_study(dir: &Path, study: &Study) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(
        &dir.join("study.json"),
        &StudyFile {
            id: study.id.clone(),
            label: study.label,
            meta: study.meta.clone(),
        },
    )?;
    let mut samples: Vec<&ViewSample> = study.samples.iter().collect();
    samples.sort_by_key(|s| s.view);
    for s in samples {
        let vdir = dir.join(s.view.as_str());
        std::fs::create_dir_all(&vdir)?;
        std::fs::write(vdir.join("pre.png"), encode_rgb_png(&s.pre)?)?;
        std::fs::write(
            vdir.join("params.f32"),
            f32_to_le_bytes(s.params.channels.iter().copied()),
        )?;
        write_json(
            &vdir.join("params.json"),
            &ParamsHeader::for_maps(&s.params),
        )?;
        if let Some(t) = &s.target {
            std::fs::write(vdir.join("post.png"), encode_rgb_png(&t.post)?)?;
            std::fs::write(vdir.join("scar.png"), encode_gray_png(&t.scar.0)?)?;
        }
    }
    Ok(())
}

pub fn read_study(dir: &Path) -> Result<Study> {
    let file: StudyFile = read_json(&dir.join("study.json"))?;
    let mut samples = Vec::new();
    for view in ViewId::ALL {
        let vdir = dir.join(view.as_str());
        if !vdir.is_dir() {
            continue;
        }
        let pre = decode_rgb_png(&std::fs::read(vdir.join("pre.png"))?)?;
        let header: ParamsHeader = read_json(&vdir.join("params.json"))?;
        let params = params_from_parts(&header, &std::fs::read(vdir.join("params.f32"))?)?;
        let post_path = vdir.join("post.png");
        let scar_path = vdir.join("scar.png");
        let target = match (post_path.exists(), scar_path.exists()) {
            (true, true) => Some(PostTarget {
                post: decode_rgb_png(&std::fs::read(&post_path)?)?,
                scar: ScarMask(decode_gray_png(&std::fs::read(&scar_path)?)?),
            }),
            (false, false) => None,
            _ => {
                return Err(SofaError::Format {
                    path: vdir.display().to_string(),
                    reason: "post.png and scar.png must be present together".into(),
                })
            }
        };
        samples.push(ViewSample {
            view,
            pre,
            params,
            target,
        });
    }
    Ok(Study {
        id: file.id,
        samples,
        label: file.label,
        meta: file.meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub resolution: usize,
    pub studies: Vec<String>,
    pub config: serde_json::Value,
}

impl CohortManifest {
    pub fn write(&self, cohort_dir: &Path) -> Result<()> {
        write_json(&cohort_dir.join(MANIFEST_FILE), self)
    }

    pub fn read(cohort_dir: &Path) -> Result<Self> {
        read_json(&cohort_dir.join(MANIFEST_FILE))
    }
}

/// Study ids in a cohort directory, from the manifest when present and from a
/// directory scan otherwise. Sorted.
pub fn list_study_ids(cohort_dir: &Path) -> Result<Vec<String>> {
    let mut ids = if cohort_dir.join(MANIFEST_FILE).exists() {
        CohortManifest::read(cohort_dir)?.studies
    } else {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(cohort_dir)? {
            let path = entry?.path();
            if path.join("study.json").exists() {
                if let Some(name) = path.file_name() {
                    ids.push(name.to_string_lossy().into_owned());
                }
            }
        }
        ids
    };
    ids.sort();
    Ok(ids)
}

pub fn study_dir(cohort_dir: &Path, id: &str) -> PathBuf {
    cohort_dir.join(id)
}

pub fn read_cohort(cohort_dir: &Path) -> Result<Vec<Study>> {
    list_study_ids(cohort_dir)?
        .iter()
        .map(|id| read_study(&study_dir(cohort_dir, id)))
        .collect()
}
