//! Sample schema, IoU labeling, class balancing and the context-halving
//! transform.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Prng;

pub use io::{read_jsonl, read_samples, write_jsonl, write_samples};
pub use synth::{
    generate_synthetic_dataset, preprocess_scenes, Scene, SceneInstruction, SceneObject,
    SyntheticSpec, COLORS, PLACES, SHAPES,
};

/// Axis-aligned box in pixels, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f32; 4]) -> Self {
        BBox { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox((*self).into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1) as f64
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1) as f64
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn inside(&self, image: ImageSize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= image.width() && self.y2 <= image.height()
    }
}

/// Image dimensions `[W, H]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct ImageSize {
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 2]> for ImageSize {
    fn from([w, h]: [u32; 2]) -> Self {
        ImageSize { w, h }
    }
}

impl From<ImageSize> for [u32; 2] {
    fn from(s: ImageSize) -> Self {
        [s.w, s.h]
    }
}

impl ImageSize {
    pub fn width(&self) -> f32 {
        self.w as f32
    }
    pub fn height(&self) -> f32 {
        self.h as f32
    }
}

/// A detected object region: precomputed feature vector, box, and detector
/// confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub feat: Vec<f32>,
    pub bbox: BBox,
    pub score: f32,
}

/// One candidate judgement: is `target` the object `instruction` refers to?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub instruction: String,
    pub image_size: ImageSize,
    pub target: Region,
    pub contexts: Vec<Region>,
    pub label: u8,
}

impl Sample {
    /// Index of the first context equal to the target.
    pub fn target_index(&self) -> Option<usize> {
        self.contexts.iter().position(|c| c == &self.target)
    }

    pub fn validate(&self, max_contexts: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidSample {
            id: self.id.clone(),
            reason,
        };
        if self.label > 1 {
            return Err(bad(format!("label {} is not 0 or 1", self.label)));
        }
        if self.contexts.is_empty() || self.contexts.len() > max_contexts {
            return Err(bad(format!(
                "{} context regions, expected 1..={max_contexts}",
                self.contexts.len()
            )));
        }
        if self.image_size.w == 0 || self.image_size.h == 0 {
            return Err(bad("image size must be positive".into()));
        }
        let dim = self.target.feat.len();
        for r in std::iter::once(&self.target).chain(&self.contexts) {
            r.bbox.validate().map_err(|e| bad(e.to_string()))?;
            if !r.bbox.inside(self.image_size) {
                return Err(bad(format!("box {:?} lies outside the image", r.bbox)));
            }
            if r.feat.len() != dim || r.feat.iter().any(|v| !v.is_finite()) {
                return Err(bad("region features must be finite and equally sized".into()));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(bad(format!("detector score {} outside [0, 1]", r.score)));
            }
        }
        if self.target_index().is_none() {
            return Err(bad("target region is not among the context regions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn disjoint_ids(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|s| seen.insert(s.id.as_str()))
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(if union <= 0.0 { 0.0 } else { inter / union })
}

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Label for a detection overlapping the ground truth by `beta`; `None`
/// when `beta` falls in the ambiguous band `[0.3, 0.7]`.
pub fn label_for_iou(beta: f64) -> Option<u8> {
    if beta > POSITIVE_IOU {
        Some(1)
    } else if beta < NEGATIVE_IOU {
        Some(0)
    } else {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labeling {
    /// `(detection index, label)` for every kept candidate.
    pub labeled: Vec<(usize, u8)>,
    pub discarded: Vec<usize>,
}

pub fn label_candidates(detections: &[Region], gt: &BBox) -> Result<Labeling> {
    let mut out = Labeling::default();
    for (i, d) in detections.iter().enumerate() {
        match label_for_iou(iou(&d.bbox, gt)?) {
            Some(l) => out.labeled.push((i, l)),
            None => out.discarded.push(i),
        }
    }
    Ok(out)
}

/// Uniformly subsamples the majority class down to the minority count and
/// shuffles the result.
pub fn balance(samples: Vec<Sample>, rng: &mut Prng) -> Result<Vec<Sample>> {
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "cannot balance {} positives against {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let k = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > k {
            rng.shuffle(class);
            class.truncate(k);
        }
    }
    let mut out = pos;
    out.append(&mut neg);
    rng.shuffle(&mut out);
    Ok(out)
}

/// Keeps the `ceil(N/2)` highest-scoring contexts (ties by index), always
/// retaining the target. Kept regions stay in their original order.
pub fn halve_contexts(sample: &Sample) -> Sample {
    let n = sample.contexts.len();
    let keep = n.div_ceil(2);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (sample.contexts[a].score, sample.contexts[b].score);
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    if let Some(t) = sample.target_index() {
        if !kept.contains(&t) {
            kept.pop();
            kept.push(t);
        }
    }
    kept.sort_unstable();
    Sample {
        contexts: kept.iter().map(|&i| sample.contexts[i].clone()).collect(),
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts unit pixel cells covered by integer boxes.
    fn pixel_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let (lo_x, lo_y) = (a[0].min(b[0]), a[1].min(b[1]));
        let (hi_x, hi_y) = (a[2].max(b[2]), a[3].max(b[3]));
        let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0u64, 0u64);
        for x in lo_x..hi_x {
            for y in lo_y..hi_y {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    }

    fn region(score: f32, tag: f32) -> Region {
        Region { feat: vec![tag], bbox: bx(0.0, 0.0, 1.0, 1.0), score }
    }

    fn sample_with(contexts: Vec<Region>, target: usize) -> Sample {
        Sample {
            id: "s".into(),
            instruction: "x".into(),
            image_size: ImageSize { w: 10, h: 10 },
            target: contexts[target].clone(),
            contexts,
            label: 1,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let v = iou(&a, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v - pixel_iou([0, 0, 2, 2], [1, 1, 3, 3])).abs() < 1e-12);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        let empty = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn inverted_box_is_rejected() {
        let bad = BBox { x1: 3.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        assert!(matches!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)), Err(Error::InvalidBox(_))));
    }

    #[test]
    fn labeling_thresholds_are_strict() {
        assert_eq!(label_for_iou(1.0), Some(1));
        assert_eq!(label_for_iou(0.0), Some(0));
        assert_eq!(label_for_iou(0.5), None);
        assert_eq!(label_for_iou(0.7), None);
        assert_eq!(label_for_iou(0.3), None);
        assert_eq!(label_for_iou(0.7 + 1e-12), Some(1));
        assert_eq!(label_for_iou(0.3 - 1e-12), Some(0));
    }

    #[test]
    fn label_candidates_discards_the_ambiguous_band() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let det = |b: BBox| Region { feat: vec![0.0], bbox: b, score: 0.9 };
        let dets = vec![
            det(gt),
            det(bx(0.0, 0.0, 5.0, 10.0)),
            det(bx(20.0, 20.0, 30.0, 30.0)),
        ];
        let l = label_candidates(&dets, &gt).unwrap();
        assert_eq!(l.labeled, vec![(0, 1), (2, 0)]);
        assert_eq!(l.discarded, vec![1]);
    }

    fn labeled(pos: usize, neg: usize) -> Vec<Sample> {
        (0..pos + neg)
            .map(|i| Sample {
                id: format!("{i}"),
                label: (i < pos) as u8,
                ..sample_with(vec![region(0.5, i as f32)], 0)
            })
            .collect()
    }

    #[test]
    fn balance_downsamples_the_majority() {
        for (p, n, k) in [(10, 25, 10), (7, 7, 7), (5, 3, 3)] {
            let input = labeled(p, n);
            let out = balance(input.clone(), &mut Prng::new(1)).unwrap();
            let pos = out.iter().filter(|s| s.label == 1).count();
            assert_eq!((pos, out.len() - pos), (k, k));
            assert!(out.iter().all(|s| input.contains(s)));
        }
        assert!(balance(labeled(3, 0), &mut Prng::new(1)).is_err());
    }

    #[test]
    fn halving_examples() {
        let one = sample_with(vec![region(0.9, 0.0)], 0);
        assert_eq!(halve_contexts(&one), one);

        let four = sample_with((0..4).map(|i| region(0.5, i as f32)).collect(), 0);
        let h = halve_contexts(&four);
        assert_eq!(h.contexts, four.contexts[..2].to_vec());

        let scores = [0.9, 0.8, 0.7, 0.6, 0.1];
        let five = sample_with(scores.iter().enumerate().map(|(i, &s)| region(s, i as f32)).collect(), 4);
        let h = halve_contexts(&five);
        assert_eq!(h.contexts.len(), 3);
        assert_eq!(h.contexts, vec![five.contexts[0].clone(), five.contexts[1].clone(), five.contexts[4].clone()]);
        assert!(h.target_index().is_some());
    }

    #[test]
    fn validation_catches_broken_samples() {
        let good = sample_with(vec![region(0.5, 0.0), region(0.4, 1.0)], 1);
        assert!(good.validate(8).is_ok());
        assert!(good.validate(1).is_err());
        let mut missing = good.clone();
        missing.target.feat = vec![9.0];
        assert!(missing.validate(8).is_err());
        let mut outside = good.clone();
        outside.contexts[0].bbox = bx(0.0, 0.0, 11.0, 1.0);
        assert!(outside.validate(8).is_err());
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_counting(a in prop::array::uniform4(0i32..12), b in prop::array::uniform4(0i32..12)) {
            let norm = |r: [i32; 4]| [r[0].min(r[2]), r[1].min(r[3]), r[0].max(r[2]), r[1].max(r[3])];
            let (a, b) = (norm(a), norm(b));
            let f = |r: [i32; 4]| bx(r[0] as f32, r[1] as f32, r[2] as f32, r[3] as f32);
            let analytic = iou(&f(a), &f(b)).unwrap();
            prop_assert!((analytic - pixel_iou(a, b)).abs() < 1e-9);
            prop_assert_eq!(analytic, iou(&f(b), &f(a)).unwrap());
            prop_assert!((0.0..=1.0).contains(&analytic));
        }

        #[test]
        fn balance_is_a_balanced_subset(p in 1usize..30, n in 1usize..30, seed in any::<u64>()) {
            let input = labeled(p, n);
            let out = balance(input.clone(), &mut Prng::new(seed)).unwrap();
            let pos = out.iter().filter(|s| s.label == 1).count();
            prop_assert_eq!(pos * 2, out.len());
            prop_assert!(out.iter().all(|s| input.contains(s)));
        }
    }
}
