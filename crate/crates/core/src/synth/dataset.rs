//! On-disk datasets: `images/{id}.pgm`, `annotations.jsonl`, `config.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scene, SceneAnnotation, SceneConfig};
use crate::error::{Error, Result};
use crate::raster::decode_pgm;

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Option<DatasetManifest>,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::from_annotations(self.scenes.iter().map(|s| &s.annotation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub instances: usize,
    pub mean_instances: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub mean_text_len: f64,
    pub min_glyph_height_px: f64,
    pub max_glyph_height_px: f64,
    /// Share of scenes whose largest/smallest glyph height ratio is at least 3.
    pub multi_scale_fraction: f64,
}

impl DatasetStats {
    pub fn from_annotations<'a>(
        annotations: impl IntoIterator<Item = &'a SceneAnnotation>,
    ) -> Self {
        let mut s = DatasetStats {
            scenes: 0,
            instances: 0,
            mean_instances: 0.0,
            min_instances: usize::MAX,
            max_instances: 0,
            mean_text_len: 0.0,
            min_glyph_height_px: f64::INFINITY,
            max_glyph_height_px: 0.0,
            multi_scale_fraction: 0.0,
        };
        let mut chars = 0usize;
        let mut multi = 0usize;
        for a in annotations {
            s.scenes += 1;
            let n = a.instances.len();
            s.instances += n;
            s.min_instances = s.min_instances.min(n);
            s.max_instances = s.max_instances.max(n);
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for inst in &a.instances {
                chars += inst.text.chars().count();
                lo = lo.min(inst.glyph_height_px);
                hi = hi.max(inst.glyph_height_px);
            }
            s.min_glyph_height_px = s.min_glyph_height_px.min(lo);
            s.max_glyph_height_px = s.max_glyph_height_px.max(hi);
            if n > 0 && hi / lo >= 3.0 {
                multi += 1;
            }
        }
        if s.scenes == 0 {
            s.min_instances = 0;
            s.min_glyph_height_px = 0.0;
            return s;
        }
        s.mean_instances = s.instances as f64 / s.scenes as f64;
        s.mean_text_len = if s.instances > 0 {
            chars as f64 / s.instances as f64
        } else {
            0.0
        };
        s.multi_scale_fraction = multi as f64 / s.scenes as f64;
        s
    }
}

pub fn write_dataset(
    dir: &Path,
    scenes: &[Scene],
    manifest: Option<&DatasetManifest>,
) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = dir.join("annotations.jsonl");
    let mut out = Vec::new();
    for scene in scenes {
        let img_path = images.join(format!("{}.pgm", scene.annotation.image_id));
        fs::write(&img_path, scene.image.to_pgm()).map_err(|e| Error::io(&img_path, e))?;
        serde_json::to_writer(&mut out, &scene.annotation)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&ann_path, e))?;
    if let Some(m) = manifest {
        let cfg_path = dir.join("config.json");
        let text = serde_json::to_string_pretty(m)?;
        fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let annotation: SceneAnnotation =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: ann_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        let img_path = dir
            .join("images")
            .join(format!("{}.pgm", annotation.image_id));
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = decode_pgm(&bytes, &img_path)?;
        if (image.width, image.height) != (annotation.width, annotation.height) {
            return Err(Error::Parse {
                path: ann_path.clone(),
                line: i + 1,
                message: format!(
                    "image {} is {}x{} but the annotation says {}x{}",
                    annotation.image_id,
                    image.width,
                    image.height,
                    annotation.width,
                    annotation.height
                ),
            });
        }
        scenes.push(Scene { image, annotation });
    }
    let cfg_path = dir.join("config.json");
    let manifest = if cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: cfg_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scenes;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::dense();
        let scenes = generate_scenes(&cfg, 11, 10).unwrap();
        let manifest = DatasetManifest {
            base_seed: 11,
            count: 10,
            scene: cfg,
        };
        write_dataset(dir.path(), &scenes, Some(&manifest)).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.scenes, scenes);
        assert_eq!(ds.manifest, Some(manifest));
    }

    #[test]
    fn truncated_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_scenes(&SceneConfig::overfit(), 1, 3).unwrap();
        write_dataset(dir.path(), &scenes, None).unwrap();
        let path = dir.path().join("annotations.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[1].len() / 2;
        lines[1].truncate(cut);
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, path: p, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(p, path);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_count_instances() {
        let scenes = generate_scenes(&SceneConfig::overfit(), 2, 5).unwrap();
        let st = DatasetStats::from_annotations(scenes.iter().map(|s| &s.annotation));
        let total: usize = scenes.iter().map(|s| s.annotation.instances.len()).sum();
        assert_eq!(st.instances, total);
        assert!((st.mean_instances - total as f64 / 5.0).abs() < 1e-12);
    }
}
