//! Annotated scenes and proposed detections, plus their JSON forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{min_area_rbox, pixel_corners, rasterize, PixelSet, Polygon};
use crate::maps::write_atomic;
use crate::rbox::RBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: u32,
    pub polygon: Polygon,
    pub mask: PixelSet,
    pub rbox: RBox,
}

impl Instance {
    /// Rasterizes the polygon and fits the minimum-area box around the mask's pixel corners.
    pub fn from_polygon(class_id: u32, polygon: Polygon, height: usize, width: usize) -> Result<Self> {
        let mask = rasterize(&polygon, height, width);
        Self::from_mask(class_id, polygon, mask)
    }

    pub fn from_mask(class_id: u32, polygon: Polygon, mask: PixelSet) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::InvalidPolygon("polygon covers no pixel centers".into()));
        }
        let rbox = min_area_rbox(&pixel_corners(&mask))?;
        Ok(Self {
            class_id,
            polygon,
            mask,
            rbox,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInstance {
    pub class_id: u32,
    pub polygon: Vec<[f64; 2]>,
}

/// `{"height", "width", "instances": [{"class_id", "polygon": [[x, y], ...]}]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<AnnotatedInstance>,
}

impl Scene {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            instances: Vec::new(),
        }
    }

    pub fn from_annotation(ann: &Annotation) -> Result<Self> {
        if ann.height == 0 || ann.width == 0 {
            return Err(Error::Shape("annotation image dimensions must be positive".into()));
        }
        let instances = ann
            .instances
            .iter()
            .map(|a| {
                let polygon = Polygon::new(a.polygon.clone())?;
                Instance::from_polygon(a.class_id, polygon, ann.height, ann.width)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: ann.height,
            width: ann.width,
            instances,
        })
    }

    pub fn to_annotation(&self) -> Annotation {
        Annotation {
            height: self.height,
            width: self.width,
            instances: self
                .instances
                .iter()
                .map(|i| AnnotatedInstance {
                    class_id: i.class_id,
                    polygon: i.polygon.vertices().to_vec(),
                })
                .collect(),
        }
    }

    pub fn max_class(&self) -> u32 {
        self.instances.iter().map(|i| i.class_id).max().unwrap_or(0)
    }
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<Annotation> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_annotation(ann: &Annotation, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), serde_json::to_string_pretty(ann)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rbox: RBox,
    pub class_id: u32,
    pub score: f64,
    pub mask: PixelSet,
}

/// Run-length encoding over row-major linear indices: `[start, len, start, len, ...]`.
pub fn mask_to_rle(mask: &PixelSet, width: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let mut run: Option<(u64, u64)> = None;
    for &(i, j) in mask {
        let k = (i * width + j) as u64;
        run = match run {
            Some((s, l)) if s + l == k => Some((s, l + 1)),
            Some((s, l)) => {
                out.extend([s, l]);
                Some((k, 1))
            }
            None => Some((k, 1)),
        };
    }
    if let Some((s, l)) = run {
        out.extend([s, l]);
    }
    out
}

pub fn rle_to_mask(rle: &[u64], height: usize, width: usize) -> Result<PixelSet> {
    if rle.len() % 2 != 0 {
        return Err(Error::Shape("mask_rle must hold start/length pairs".into()));
    }
    let total = (height * width) as u64;
    let mut mask = PixelSet::new();
    for pair in rle.chunks_exact(2) {
        let (start, len) = (pair[0], pair[1]);
        if start.checked_add(len).is_none_or(|end| end > total) {
            return Err(Error::Shape(format!(
                "run [{start}, {len}] exceeds a {height}x{width} image"
            )));
        }
        for k in start..start + len {
            let k = k as usize;
            mask.insert((k / width, k % width));
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub class_id: u32,
    pub score: f64,
    pub rbox: [f64; 5],
    pub mask_rle: Vec<u64>,
}

impl Detection {
    pub fn to_record(&self, width: usize) -> DetectionRecord {
        DetectionRecord {
            class_id: self.class_id,
            score: self.score,
            rbox: self.rbox.as_array(),
            mask_rle: mask_to_rle(&self.mask, width),
        }
    }

    pub fn from_record(r: &DetectionRecord, height: usize, width: usize) -> Result<Self> {
        let rbox = RBox::from_array(r.rbox);
        rbox.validate()?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Shape(format!("score {} outside [0, 1]", r.score)));
        }
        Ok(Self {
            rbox,
            class_id: r.class_id,
            score: r.score,
            mask: rle_to_mask(&r.mask_rle, height, width)?,
        })
    }
}

pub fn detections_to_json(dets: &[Detection], width: usize) -> Result<String> {
    let recs: Vec<DetectionRecord> = dets.iter().map(|d| d.to_record(width)).collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn detections_from_json(text: &str, height: usize, width: usize) -> Result<Vec<Detection>> {
    let recs: Vec<DetectionRecord> = serde_json::from_str(text)?;
    recs.iter().map(|r| Detection::from_record(r, height, width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn annotation_rejects_unknown_keys() {
        let bad = r#"{"height": 4, "width": 4, "instances": [], "extra": 1}"#;
        assert!(serde_json::from_str::<Annotation>(bad).is_err());
    }

    #[test]
    fn scene_from_annotation_derives_masks_and_boxes() {
        let ann = Annotation {
            height: 10,
            width: 12,
            instances: vec![AnnotatedInstance {
                class_id: 1,
                polygon: vec![[2.0, 3.0], [8.0, 3.0], [8.0, 6.0], [2.0, 6.0]],
            }],
        };
        let scene = Scene::from_annotation(&ann).unwrap();
        let inst = &scene.instances[0];
        assert_eq!(inst.mask.len(), 18);
        let b = inst.rbox;
        assert!((b.x - 5.0).abs() < 1e-12 && (b.y - 4.5).abs() < 1e-12);
        assert!((b.w - 6.0).abs() < 1e-12 && (b.h - 3.0).abs() < 1e-12 && b.theta.abs() < 1e-12);
        for &(i, j) in &inst.mask {
            assert!(b.contains(j as f64 + 0.5, i as f64 + 0.5, 0.5));
        }
        assert_eq!(scene.to_annotation(), ann);
    }

    #[test]
    fn off_image_polygon_is_an_error() {
        let ann = Annotation {
            height: 4,
            width: 4,
            instances: vec![AnnotatedInstance {
                class_id: 1,
                polygon: vec![[10.0, 10.0], [12.0, 10.0], [12.0, 12.0]],
            }],
        };
        assert!(Scene::from_annotation(&ann).is_err());
    }

    #[test]
    fn rle_examples() {
        let m: PixelSet = [(0, 1), (0, 2), (0, 3), (1, 0), (2, 3)].into_iter().collect();
        let rle = mask_to_rle(&m, 4);
        assert_eq!(rle, vec![1, 4, 11, 1]);
        assert_eq!(rle_to_mask(&rle, 3, 4).unwrap(), m);
        assert!(rle_to_mask(&[10, 5], 3, 4).is_err());
        assert!(rle_to_mask(&[1], 3, 4).is_err());
    }

    proptest! {
        #[test]
        fn detections_json_round_trip(
            pix in proptest::collection::btree_set((0usize..9, 0usize..11), 0..40),
            score in 0.0f64..=1.0,
            class_id in 1u32..5,
            x in -5.0f64..20.0, w in 0.1f64..9.0, h in 0.1f64..9.0, t in -1.5f64..1.5,
        ) {
            let d = Detection { rbox: RBox::new(x, 3.0, w, h, t), class_id, score, mask: pix };
            let text = detections_to_json(std::slice::from_ref(&d), 11).unwrap();
            let back = detections_from_json(&text, 9, 11).unwrap();
            prop_assert_eq!(&back, &vec![d]);
            let again = detections_to_json(&back, 11).unwrap();
            prop_assert_eq!(again, text);
        }

        #[test]
        fn annotation_json_round_trip(
            polys in proptest::collection::vec(
                (1u32..4, proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0), 3..8)), 0..4)
        ) {
            let ann = Annotation {
                height: 30,
                width: 30,
                instances: polys
                    .into_iter()
                    .map(|(c, v)| AnnotatedInstance { class_id: c, polygon: v.into_iter().map(|(x, y)| [x, y]).collect() })
                    .collect(),
            };
            let text = serde_json::to_string(&ann).unwrap();
            let back: Annotation = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &ann);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
        }
    }
}
