//! Dataset ingestion over the on-disk layout
//! `root/{train,dev,test}/{live,spoof/<attack_type>}/<image files>`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Image;
use crate::scoring::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

pub const KNOWN_ATTACK_TYPES: [&str; 3] = ["print", "replay", "mask_3d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub rel_path: String,
    pub label: Label,
    /// `None` for live samples; attack directory names outside the known set
    /// are recorded as "other".
    pub attack_type: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    /// Unreadable files, with the reason they were skipped.
    pub skipped: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn abs_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.rel_path)
    }
}

/// Decodes an image file as 8-bit RGB scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let data = decoded.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn normalize_attack(dir_name: &str) -> String {
    if KNOWN_ATTACK_TYPES.contains(&dir_name) {
        dir_name.to_string()
    } else {
        "other".to_string()
    }
}

fn collect_images(
    root: &Path,
    dir: &Path,
    split: Split,
    label: Label,
    attack_type: Option<&str>,
    records: &mut Vec<SampleRecord>,
    skipped: &mut Vec<(String, String)>,
) -> Result<()> {
    for path in sorted_entries(dir)? {
        if path.is_dir() {
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .map_err(|_| Error::Argument(format!("{} escapes the dataset root", path.display())))?
            .to_string_lossy()
            .replace('\\', "/");
        match load_image(&path) {
            Ok(_) => records.push(SampleRecord {
                sample_id: rel.clone(),
                rel_path: rel,
                label,
                attack_type: attack_type.map(normalize_attack),
                split,
            }),
            Err(e) => {
                log::warn!("skipping {rel}: {e}");
                skipped.push((rel, e.to_string()));
            }
        }
    }
    Ok(())
}

/// Walks the layout and validates every image decodes. Unreadable files are
/// skipped with a warning; a one-class run with spoof data under train/ (or
/// no live train data at all) is a hard error.
pub fn ingest_dataset(root: &Path, one_class: bool) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        let live_dir = split_dir.join("live");
        if live_dir.is_dir() {
            collect_images(root, &live_dir, split, Label::Live, None, &mut records, &mut skipped)?;
        }
        let spoof_dir = split_dir.join("spoof");
        if spoof_dir.is_dir() {
            for attack_dir in sorted_entries(&spoof_dir)? {
                if !attack_dir.is_dir() {
                    continue;
                }
                let attack = attack_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default();
                collect_images(
                    root,
                    &attack_dir,
                    split,
                    Label::Spoof,
                    Some(&attack),
                    &mut records,
                    &mut skipped,
                )?;
            }
        }
    }
    if one_class {
        if let Some(r) = records.iter().find(|r| r.split == Split::Train && r.label == Label::Spoof)
        {
            return Err(Error::Protocol(format!(
                "one-class training forbids spoof data under train/, found {}",
                r.sample_id
            )));
        }
        if !records.iter().any(|r| r.split == Split::Train && r.label == Label::Live) {
            return Err(Error::Protocol(format!(
                "{}: train split has no live images",
                root.display()
            )));
        }
    }
    Ok(DatasetManifest { root: root.to_path_buf(), records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_png(path: &Path, size: u32, value: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = RgbImage::from_pixel(size, size, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    #[test]
    fn two_live_train_images_make_two_live_records() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/live/a.png"), 8, 100);
        write_png(&dir.path().join("train/live/b.png"), 8, 150);
        let manifest = ingest_dataset(dir.path(), true).unwrap();
        assert_eq!(manifest.records.len(), 2);
        assert!(manifest.records.iter().all(|r| r.label == Label::Live));
        assert!(manifest.records.iter().all(|r| r.split == Split::Train));
    }

    #[test]
    fn spoof_under_train_is_hard_error_for_one_class() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/live/a.png"), 8, 100);
        write_png(&dir.path().join("train/spoof/print/x.png"), 8, 200);
        assert!(matches!(ingest_dataset(dir.path(), true), Err(Error::Protocol(_))));
        // The same tree is fine when the one-class contract is off.
        assert_eq!(ingest_dataset(dir.path(), false).unwrap().records.len(), 2);
    }

    #[test]
    fn empty_live_train_split_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("test/live/a.png"), 8, 100);
        assert!(matches!(ingest_dataset(dir.path(), true), Err(Error::Protocol(_))));
    }

    #[test]
    fn manifest_count_matches_directory_walk() {
        let dir = tempfile::tempdir().unwrap();
        let mut n_written = 0;
        for split in ["train", "dev", "test"] {
            for i in 0..3 {
                write_png(&dir.path().join(format!("{split}/live/l{i}.png")), 8, 90);
                n_written += 1;
            }
        }
        for (split, attack) in [("dev", "print"), ("test", "replay"), ("test", "screen")] {
            for i in 0..2 {
                write_png(&dir.path().join(format!("{split}/spoof/{attack}/s{i}.png")), 8, 200);
                n_written += 1;
            }
        }
        let manifest = ingest_dataset(dir.path(), true).unwrap();
        assert_eq!(manifest.records.len(), n_written);
        // Unknown attack directory names normalize to "other".
        assert!(manifest
            .records
            .iter()
            .filter(|r| r.sample_id.contains("screen"))
            .all(|r| r.attack_type.as_deref() == Some("other")));
    }

    #[test]
    fn unreadable_image_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/live/a.png"), 8, 100);
        let junk = dir.path().join("train/live/junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        let manifest = ingest_dataset(dir.path(), true).unwrap();
        assert_eq!(manifest.records.len(), 1);
        assert_eq!(manifest.skipped.len(), 1);
        assert_eq!(manifest.skipped[0].0, "train/live/junk.png");
    }

    #[test]
    fn ordering_is_deterministic_by_path() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.png", "a.png", "b.png"] {
            write_png(&dir.path().join("train/live").join(name), 8, 100);
        }
        let manifest = ingest_dataset(dir.path(), true).unwrap();
        let ids: Vec<&str> = manifest.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["train/live/a.png", "train/live/b.png", "train/live/c.png"]);
    }

    #[test]
    fn load_image_scales_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, 4, 255);
        let img = load_image(&path).unwrap();
        assert_eq!((img.height, img.width), (4, 4));
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_root_is_io_error() {
        assert!(matches!(
            ingest_dataset(Path::new("/nonexistent/dataset"), true),
            Err(Error::Io { .. })
        ));
    }
}
