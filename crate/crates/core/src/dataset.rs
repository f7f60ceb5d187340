//! Annotated images plus the JSON annotation and detection file formats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: Image,
    pub objects: Vec<Rect>,
    pub missing: Vec<Rect>,
}

impl AnnotatedImage {
    pub fn new(
        id: impl Into<String>,
        pixels: Image,
        objects: Vec<Rect>,
        missing: Vec<Rect>,
    ) -> Result<Self> {
        let id = id.into();
        let (w, h) = (pixels.width() as f64, pixels.height() as f64);
        for b in objects.iter().chain(&missing) {
            if !b.is_well_formed() || !b.within(w, h) {
                return Err(Error::InvalidArgument(format!(
                    "{id}: box {b:?} outside {w}×{h} image"
                )));
            }
        }
        Ok(Self {
            id,
            pixels,
            objects,
            missing,
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// `[x, y, w, h]` with integer pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
}

impl BoxRecord {
    pub fn from_rect(r: &Rect) -> Self {
        Self {
            bbox: [r.x, r.y, r.w, r.h].map(|v| v.round() as i64),
        }
    }

    pub fn rect(&self) -> Rect {
        let [x, y, w, h] = self.bbox.map(|v| v as f64);
        Rect::new(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub file: String,
    pub objects: Vec<BoxRecord>,
    #[serde(default)]
    pub missing: Vec<BoxRecord>,
}

impl AnnotationRecord {
    pub fn of(file: impl Into<String>, img: &AnnotatedImage) -> Self {
        Self {
            file: file.into(),
            objects: img.objects.iter().map(BoxRecord::from_rect).collect(),
            missing: img.missing.iter().map(BoxRecord::from_rect).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "rect_array")]
    pub bbox: Rect,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub file: String,
    pub detections: Vec<Detection>,
}

/// Detections for a whole dataset, one record per image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    #[serde(default)]
    pub detector: String,
    pub records: Vec<DetectionRecord>,
}

impl DetectionSet {
    pub fn for_file(&self, file: &str) -> Option<&[Detection]> {
        self.records
            .iter()
            .find(|r| r.file == file)
            .map(|r| r.detections.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            for d in &r.detections {
                if !d.score.is_finite() || !d.bbox.is_well_formed() {
                    return Err(Error::format(
                        "detection file",
                        format!("{}: bad detection {d:?}", r.file),
                    ));
                }
            }
        }
        Ok(())
    }
}

mod rect_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::Rect;

    pub fn serialize<S: Serializer>(r: &Rect, s: S) -> Result<S::Ok, S::Error> {
        [r.x, r.y, r.w, r.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rect, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(Rect::new(x, y, w, h))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(what, format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_json(path, "annotation file")
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let set: DetectionSet = read_json(path, "detection file")?;
    set.validate()?;
    Ok(set)
}

/// A loaded annotation file; image paths resolve against the file's directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn load(annotation_path: &Path) -> Result<Dataset> {
        let root = annotation_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let mut images = Vec::new();
        for rec in read_annotations(annotation_path)? {
            let pixels = Image::load(&root.join(&rec.file))?;
            images.push(AnnotatedImage::new(
                rec.file.clone(),
                pixels,
                rec.objects.iter().map(BoxRecord::rect).collect(),
                rec.missing.iter().map(BoxRecord::rect).collect(),
            )?);
        }
        Ok(Dataset { root, images })
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_json_shape() {
        let text = r#"[{"file":"a.png","objects":[{"box":[1,2,3,4]}],"missing":[]}]"#;
        let recs: Vec<AnnotationRecord> = serde_json::from_str(text).unwrap();
        assert_eq!(recs[0].objects[0].rect(), Rect::new(1.0, 2.0, 3.0, 4.0));
        let back = serde_json::to_string(&recs).unwrap();
        assert_eq!(back, text);
    }

    #[test]
    fn detection_json_round_trip() {
        let set = DetectionSet {
            detector: "oracle".into(),
            records: vec![DetectionRecord {
                file: "a.png".into(),
                detections: vec![Detection {
                    bbox: Rect::new(1.5, 2.0, 3.0, 4.0),
                    score: 0.75,
                }],
            }],
        };
        let text = serde_json::to_string(&set).unwrap();
        assert!(text.contains(r#""box":[1.5,2.0,3.0,4.0]"#));
        assert_eq!(serde_json::from_str::<DetectionSet>(&text).unwrap(), set);
    }

    #[test]
    fn rejects_out_of_bounds_boxes() {
        let img = Image::filled(10, 10, 1, 0.0);
        assert!(AnnotatedImage::new(
            "x",
            img.clone(),
            vec![Rect::new(5.0, 5.0, 6.0, 2.0)],
            vec![]
        )
        .is_err());
        assert!(AnnotatedImage::new("x", img, vec![Rect::new(5.0, 5.0, 5.0, 5.0)], vec![]).is_ok());
    }
}
