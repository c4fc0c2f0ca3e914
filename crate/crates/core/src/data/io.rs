use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::Deserialize;

use super::{DataItem, Dataset, Image, LabelMap};
use crate::error::{Error, Result};
use crate::teacher::IGNORE_INDEX;

/// Raw label id → contiguous class index. Unmapped ids become [`IGNORE_INDEX`].
///
/// Text form:
///
/// ```text
/// num_classes = 3
/// [map]
/// 7 = 0
/// 26 = 1
/// 24 = 2
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    pub num_classes: usize,
    table: [u8; 256],
}

#[derive(Deserialize)]
struct MappingDoc {
    num_classes: usize,
    #[serde(default)]
    map: BTreeMap<String, u8>,
}

impl ClassMapping {
    /// Ids `0..num_classes` map to themselves.
    pub fn identity(num_classes: usize) -> Self {
        let mut table = [IGNORE_INDEX; 256];
        for (i, t) in table.iter_mut().enumerate().take(num_classes.min(255)) {
            *t = i as u8;
        }
        Self { num_classes, table }
    }

    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (u8, u8)>) -> Result<Self> {
        let mut table = [IGNORE_INDEX; 256];
        for (raw, class) in pairs {
            if class as usize >= num_classes {
                return Err(Error::Config(format!("mapping target {class} >= num_classes {num_classes}")));
            }
            table[raw as usize] = class;
        }
        Ok(Self { num_classes, table })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: MappingDoc = toml::from_str(text).map_err(|e| Error::Config(format!("class mapping: {e}")))?;
        let pairs = doc
            .map
            .iter()
            .map(|(k, &v)| {
                k.trim()
                    .parse::<u8>()
                    .map(|raw| (raw, v))
                    .map_err(|_| Error::Config(format!("class mapping key `{k}` is not a label id")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(doc.num_classes, pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply(&self, raw: u8) -> u8 {
        self.table[raw as usize]
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn read_label(path: &Path, mapping: &ClassMapping) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        mapping.apply(img.get_pixel(x as u32, y as u32)[0])
    }))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let (h, w) = label.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([label[[y as usize, x as usize]]]));
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads `root/images/*.png` and, where present, `root/labels/<stem>.png`, ordered by stem.
pub fn load_dataset(root: &Path, mapping: &ClassMapping) -> Result<Dataset> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::io(
            &images_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing images directory"),
        ));
    }
    let labels_dir = root.join("labels");
    let mut items = Vec::new();
    for (stem, path) in png_stems(&images_dir)? {
        let image = read_image(&path)?;
        let label_path = labels_dir.join(format!("{stem}.png"));
        let label = if label_path.is_file() {
            let label = read_label(&label_path, mapping)?;
            if label.dim() != (image.dim().0, image.dim().1) {
                return Err(Error::Data(format!(
                    "label {} is {:?} but image is {:?}",
                    label_path.display(),
                    label.dim(),
                    (image.dim().0, image.dim().1)
                )));
            }
            Some(label)
        } else {
            None
        };
        items.push(DataItem { image, label });
    }
    Ok(Dataset {
        items,
        num_classes: mapping.num_classes,
        split: root.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string(),
    })
}

/// Writes the `root/{images,labels}` layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if dataset.items.iter().any(|i| i.label.is_some()) {
        fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    for (i, item) in dataset.items.iter().enumerate() {
        let stem = format!("{i:05}");
        write_image(&images.join(format!("{stem}.png")), &item.image)?;
        if let Some(label) = &item.label {
            write_label(&labels.join(format!("{stem}.png")), label)?;
        }
    }
    Ok(())
}
