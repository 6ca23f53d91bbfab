//! Dataset ingestion for the two supported directory layouts.
//!
//! MVTec-style:
//! ```text
//! root/train/good/*.png
//! root/test/<type>/*.png          # <type> == good -> inlier
//! root/ground_truth/<type>/<stem>_mask.png   # optional
//! ```
//!
//! Semantic: `root/<class>/*.png` with one class designated normal; its
//! files split 80/20 (lexicographic order) into train inliers and test
//! inliers, all other classes become test anomalies.
//!
//! Files are visited in lexicographic order and images resized to the
//! configured square resolution, so two ingests of the same tree are
//! byte-identical.

use std::path::{Path, PathBuf};

use anyhow::Result;
use firm_core::batch::LabeledSample;
use firm_core::image::{resize_bilinear, Image, Mask};
use firm_core::INLIER_LABEL;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::io::{load_mask_png, load_png};
use crate::DataError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    MvTec,
    Semantic { normal_class: String },
}

/// A test image with its binary label and optional ground-truth mask.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub image: Image<f32>,
    pub is_anomaly: bool,
    pub id: String,
    pub gt_mask: Option<Mask>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledSample<f32>>,
    pub test: Vec<TestSample>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError(format!("missing directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError(format!("missing directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_resized(path: &Path, resolution: usize, channels: usize) -> Result<Image<f32>> {
    let img = load_png(path, channels)?;
    Ok(resize_bilinear(&img, resolution, resolution))
}

fn resize_mask(mask: &Mask, resolution: usize) -> Mask {
    if mask.dim() == (resolution, resolution) {
        return mask.clone();
    }
    let as_img = ndarray::Array3::from_shape_fn((mask.dim().0, mask.dim().1, 1), |(y, x, _)| {
        if mask[[y, x]] {
            1.0f32
        } else {
            0.0
        }
    });
    let resized = resize_bilinear(&as_img, resolution, resolution);
    Array2::from_shape_fn((resolution, resolution), |(y, x)| resized[[y, x, 0]] > 0.5)
}

/// Read the tree at `root` into train inliers and labeled test samples.
pub fn ingest_dataset(
    root: &Path,
    layout: &Layout,
    resolution: usize,
    channels: usize,
) -> Result<Dataset> {
    if resolution == 0 {
        anyhow::bail!(crate::ConfigError("resolution must be positive".into()));
    }
    match layout {
        Layout::MvTec => ingest_mvtec(root, resolution, channels),
        Layout::Semantic { normal_class } => {
            ingest_semantic(root, normal_class, resolution, channels)
        }
    }
}

fn ingest_mvtec(root: &Path, resolution: usize, channels: usize) -> Result<Dataset> {
    let train_dir = root.join("train").join("good");
    let mut train = Vec::new();
    for path in png_files(&train_dir)? {
        let image = load_resized(&path, resolution, channels)?;
        let id = format!("train/good/{}", file_name(&path));
        train.push(
            LabeledSample::new(image, INLIER_LABEL, id)
                .map_err(|e| DataError(e.to_string()))?,
        );
    }
    if train.is_empty() {
        anyhow::bail!(DataError(format!(
            "no training images under {}",
            train_dir.display()
        )));
    }

    let test_dir = root.join("test");
    let gt_root = root.join("ground_truth");
    let mut test = Vec::new();
    for type_dir in subdirs(&test_dir)? {
        let defect_type = file_name(&type_dir);
        let is_anomaly = defect_type != "good";
        for path in png_files(&type_dir)? {
            let image = load_resized(&path, resolution, channels)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let gt_path = gt_root
                .join(&defect_type)
                .join(format!("{stem}_mask.png"));
            let gt_mask = if is_anomaly && gt_path.is_file() {
                Some(resize_mask(&load_mask_png(&gt_path)?, resolution))
            } else {
                None
            };
            test.push(TestSample {
                image,
                is_anomaly,
                id: format!("test/{defect_type}/{}", file_name(&path)),
                gt_mask,
            });
        }
    }
    if test.is_empty() {
        anyhow::bail!(DataError(format!(
            "no test images under {}",
            test_dir.display()
        )));
    }
    Ok(Dataset { train, test })
}

fn ingest_semantic(
    root: &Path,
    normal_class: &str,
    resolution: usize,
    channels: usize,
) -> Result<Dataset> {
    let classes = subdirs(root)?;
    if !classes.iter().any(|c| file_name(c) == normal_class) {
        anyhow::bail!(DataError(format!(
            "normal class {normal_class} not found under {}",
            root.display()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_dir in classes {
        let class = file_name(&class_dir);
        let files = png_files(&class_dir)?;
        if class == normal_class {
            // deterministic 80/20 split in lexicographic order
            let cut = (files.len() * 4) / 5;
            if cut == 0 || cut == files.len() {
                anyhow::bail!(DataError(format!(
                    "normal class {normal_class} has too few images ({}) to split",
                    files.len()
                )));
            }
            for path in &files[..cut] {
                let image = load_resized(path, resolution, channels)?;
                let id = format!("{class}/{}", file_name(path));
                train.push(
                    LabeledSample::new(image, INLIER_LABEL, id)
                        .map_err(|e| DataError(e.to_string()))?,
                );
            }
            for path in &files[cut..] {
                test.push(TestSample {
                    image: load_resized(path, resolution, channels)?,
                    is_anomaly: false,
                    id: format!("{class}/{}", file_name(path)),
                    gt_mask: None,
                });
            }
        } else {
            for path in &files {
                test.push(TestSample {
                    image: load_resized(path, resolution, channels)?,
                    is_anomaly: true,
                    id: format!("{class}/{}", file_name(path)),
                    gt_mask: None,
                });
            }
        }
    }
    if test.iter().all(|t| t.is_anomaly) || test.iter().all(|t| !t.is_anomaly) {
        anyhow::bail!(DataError(
            "semantic layout needs both test inliers and anomalies".into()
        ));
    }
    Ok(Dataset { train, test })
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Sorted PNG paths of an external-pool directory.
pub fn pool_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        anyhow::bail!(DataError(format!(
            "external pool {} holds no PNG images",
            dir.display()
        )));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_png;
    use ndarray::Array3;

    fn write_tree(root: &Path) {
        for sub in [
            "train/good",
            "test/good",
            "test/crack",
            "ground_truth/crack",
        ] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        let img = |v: f32| -> Image<f32> { Array3::from_elem((8, 8, 1), v) };
        for i in 0..3 {
            save_png(
                &root.join(format!("train/good/{i:03}.png")),
                &img(0.2 + i as f32 * 0.1),
            )
            .unwrap();
        }
        save_png(&root.join("test/good/000.png"), &img(0.25)).unwrap();
        save_png(&root.join("test/crack/000.png"), &img(0.9)).unwrap();
        crate::io::save_mask_png(
            &root.join("ground_truth/crack/000_mask.png"),
            &Array2::from_shape_fn((8, 8), |(y, _)| y < 4),
        )
        .unwrap();
    }

    #[test]
    fn mvtec_layout_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let ds = ingest_dataset(dir.path(), &Layout::MvTec, 8, 1).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert!(ds.train.iter().all(|s| s.label == INLIER_LABEL));
        assert_eq!(ds.test.len(), 2);
        let crack = ds.test.iter().find(|t| t.id.contains("crack")).unwrap();
        assert!(crack.is_anomaly);
        assert!(crack.gt_mask.is_some());
        let good = ds.test.iter().find(|t| t.id.contains("good")).unwrap();
        assert!(!good.is_anomaly);
        assert!(good.gt_mask.is_none());
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let a = ingest_dataset(dir.path(), &Layout::MvTec, 8, 1).unwrap();
        let b = ingest_dataset(dir.path(), &Layout::MvTec, 8, 1).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.source_id, y.source_id);
            assert_eq!(x.image, y.image);
        }
        for (x, y) in a.test.iter().zip(b.test.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn missing_directory_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_dataset(dir.path(), &Layout::MvTec, 8, 1).unwrap_err();
        assert!(err.downcast_ref::<DataError>().is_some());
    }

    #[test]
    fn semantic_layout_splits_normal_class() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["cat", "dog"] {
            std::fs::create_dir_all(dir.path().join(class)).unwrap();
        }
        let img = |v: f32| -> Image<f32> { Array3::from_elem((8, 8, 1), v) };
        for i in 0..10 {
            save_png(
                &dir.path().join(format!("cat/{i:02}.png")),
                &img(i as f32 / 10.0),
            )
            .unwrap();
        }
        for i in 0..4 {
            save_png(
                &dir.path().join(format!("dog/{i:02}.png")),
                &img(0.5),
            )
            .unwrap();
        }
        let ds = ingest_dataset(
            dir.path(),
            &Layout::Semantic {
                normal_class: "cat".into(),
            },
            8,
            1,
        )
        .unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.test.iter().filter(|t| !t.is_anomaly).count(), 2);
        assert_eq!(ds.test.iter().filter(|t| t.is_anomaly).count(), 4);
    }
}
