//! Synthetic tabletop scenes with uniquely describable targets.
//!
//! Each object has a colour, a shape and a place; the place is the image
//! quadrant the object sits in. Region features are the concatenated
//! attribute one-hots plus Gaussian noise, so every instruction is solvable
//! from features and locations alone.

use serde::{Deserialize, Serialize};

use super::{balance, iou, label_candidates, BBox, DatasetSplit, ImageSize, Region, Sample};
use crate::error::{Error, Result};
use crate::numerics::Prng;

pub const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black"];
pub const SHAPES: &[&str] = &["cup", "bottle", "box", "ball", "doll", "can"];
/// Indexed by quadrant: top-left, top-right, bottom-left, bottom-right.
pub const PLACES: &[&str] = &["shelf", "table", "floor", "sofa"];

const TEMPLATES: &[&str] = &[
    "pick up the {color} {shape} on the {place}",
    "grab the {color} {shape} on the {place}",
    "bring me the {color} {shape} from the {place}",
    "take the {color} {shape} on the {place} and put it in the basket",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Mean object count; each scene draws uniformly from `n-1..=n+1`.
    pub objects_per_scene: usize,
    pub instructions_per_scene: usize,
    pub image_size: ImageSize,
    pub feature_noise: f64,
    /// Chance per scene of a near-duplicate detection with ambiguous overlap.
    pub distractor_prob: f64,
    /// Chance that a new object copies an earlier one with one attribute changed.
    #[serde(default)]
    pub variation_prob: f64,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub places: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SyntheticSpec {
            train_scenes: 500,
            val_scenes: 50,
            test_scenes: 50,
            objects_per_scene: 5,
            instructions_per_scene: 2,
            image_size: ImageSize { w: 640, h: 480 },
            feature_noise: 0.1,
            distractor_prob: 0.3,
            variation_prob: 0.0,
            colors: own(COLORS),
            shapes: own(SHAPES),
            places: own(PLACES),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn feature_dim(&self) -> usize {
        self.colors.len() + self.shapes.len() + self.places.len()
    }

    fn max_objects(&self) -> usize {
        self.objects_per_scene + 1
    }

    fn validate(&self) -> Result<()> {
        if self.places.len() != 4 {
            return Err(Error::invalid("exactly four places (one per image quadrant) are required"));
        }
        let distinct = self.colors.len() * self.shapes.len() * self.places.len();
        if self.colors.is_empty() || self.shapes.is_empty() || distinct < self.max_objects() {
            return Err(Error::invalid(format!(
                "attribute inventory admits {distinct} distinct objects, need {}",
                self.max_objects()
            )));
        }
        if self.objects_per_scene < 2 {
            return Err(Error::invalid("scenes need at least two objects"));
        }
        if self.instructions_per_scene == 0 || self.instructions_per_scene > self.objects_per_scene - 1 {
            return Err(Error::invalid("instructions per scene must be in 1..objects_per_scene"));
        }
        if self.image_size.w < 64 || self.image_size.h < 64 {
            return Err(Error::invalid("image must be at least 64x64"));
        }
        if !(0.0..=1.0).contains(&self.variation_prob) {
            return Err(Error::invalid("variation_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub place: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstruction {
    pub text: String,
    /// Index into `Scene::objects`.
    pub target: usize,
    pub gt_box: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub split: String,
    pub image_size: ImageSize,
    pub objects: Vec<SceneObject>,
    /// Detector output: one jittered box per object plus optional distractors.
    pub regions: Vec<Region>,
    pub instructions: Vec<SceneInstruction>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generates scenes for all splits, then labels and balances them into samples.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Vec<Scene>, DatasetSplit)> {
    spec.validate()?;
    let root = Prng::new(spec.seed);
    let counts = [spec.train_scenes, spec.val_scenes, spec.test_scenes];
    let mut scenes = Vec::with_capacity(counts.iter().sum());
    let mut index = 0u64;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        for _ in 0..count {
            let mut rng = root.split(index);
            scenes.push(generate_scene(spec, &format!("s{index:05}"), split, &mut rng)?);
            index += 1;
        }
    }
    let splits = preprocess_scenes(&scenes, spec.seed)?;
    Ok((scenes, splits))
}

/// Turns scenes into IoU-labelled candidate samples and balances each split.
pub fn preprocess_scenes(scenes: &[Scene], seed: u64) -> Result<DatasetSplit> {
    let mut raw: [Vec<Sample>; 3] = Default::default();
    for scene in scenes {
        let slot = SPLITS
            .iter()
            .position(|s| *s == scene.split)
            .ok_or_else(|| Error::Data(format!("scene {} has unknown split {:?}", scene.id, scene.split)))?;
        for (k, inst) in scene.instructions.iter().enumerate() {
            let labeling = label_candidates(&scene.regions, &inst.gt_box)?;
            for (d, label) in labeling.labeled {
                raw[slot].push(Sample {
                    id: format!("{}-i{k}-d{d}", scene.id),
                    instruction: inst.text.clone(),
                    image_size: scene.image_size,
                    target: scene.regions[d].clone(),
                    contexts: scene.regions.clone(),
                    label,
                });
            }
        }
    }
    let balancer = Prng::new(seed ^ 0xBA1A_4CE0);
    let [train, validation, test] = raw;
    let run = |samples: Vec<Sample>, stream: u64| -> Result<Vec<Sample>> {
        if samples.is_empty() {
            return Ok(samples);
        }
        balance(samples, &mut balancer.split(stream))
    };
    Ok(DatasetSplit {
        train: run(train, 0)?,
        validation: run(validation, 1)?,
        test: run(test, 2)?,
    })
}

fn quadrant(image: ImageSize, place: usize) -> (f32, f32, f32, f32) {
    let (hw, hh) = (image.width() / 2.0, image.height() / 2.0);
    let x0 = if place.is_multiple_of(2) { 0.0 } else { hw };
    let y0 = if place < 2 { 0.0 } else { hh };
    (x0, y0, x0 + hw, y0 + hh)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Random non-overlapping box inside the quadrant of `place`.
fn place_box(image: ImageSize, place: usize, taken: &[BBox], rng: &mut Prng) -> Option<BBox> {
    let (qx0, qy0, qx1, qy1) = quadrant(image, place);
    let (qw, qh) = (qx1 - qx0, qy1 - qy0);
    for _ in 0..64 {
        let w = qw * (0.15 + 0.2 * rng.next_f64() as f32);
        let h = qh * (0.15 + 0.2 * rng.next_f64() as f32);
        let x1 = qx0 + (qw - w) * rng.next_f64() as f32;
        let y1 = qy0 + (qh - h) * rng.next_f64() as f32;
        let b = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
        if !taken.iter().any(|t| overlaps(t, &b)) {
            return Some(b);
        }
    }
    None
}

fn features(spec: &SyntheticSpec, obj: &SceneObject, rng: &mut Prng) -> Vec<f32> {
    let mut f = vec![0.0f64; spec.feature_dim()];
    f[obj.color] = 1.0;
    f[spec.colors.len() + obj.shape] = 1.0;
    f[spec.colors.len() + spec.shapes.len() + obj.place] = 1.0;
    f.iter().map(|&v| (v + spec.feature_noise * rng.normal()) as f32).collect()
}

fn jitter(b: &BBox, image: ImageSize, frac: f64, rng: &mut Prng) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |scale: f64| (scale * frac * (2.0 * rng.next_f64() - 1.0)) as f32;
    let x1 = (b.x1 + d(w)).max(0.0);
    let y1 = (b.y1 + d(h)).max(0.0);
    let x2 = (b.x2 + d(w)).min(image.width()).max(x1);
    let y2 = (b.y2 + d(h)).min(image.height()).max(y1);
    BBox { x1, y1, x2, y2 }
}

fn describe(spec: &SyntheticSpec, obj: &SceneObject, rng: &mut Prng) -> String {
    TEMPLATES[rng.below(TEMPLATES.len())]
        .replace("{color}", &spec.colors[obj.color])
        .replace("{shape}", &spec.shapes[obj.shape])
        .replace("{place}", &spec.places[obj.place])
}

fn generate_scene(spec: &SyntheticSpec, id: &str, split: &str, rng: &mut Prng) -> Result<Scene> {
    let image = spec.image_size;
    let n = spec.objects_per_scene - 1 + rng.below(3);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Data(format!("could not lay out scene {id}")));
        }
        // Variations make negatives that share most of the target's description.
        let (mut color, mut shape, mut place) = (
            rng.below(spec.colors.len()),
            rng.below(spec.shapes.len()),
            rng.below(spec.places.len()),
        );
        if !objects.is_empty() && rng.bernoulli(spec.variation_prob) {
            let base = &objects[rng.below(objects.len())];
            (color, shape, place) = (base.color, base.shape, base.place);
            match rng.below(3) {
                0 => color = rng.below(spec.colors.len()),
                1 => shape = rng.below(spec.shapes.len()),
                _ => place = rng.below(spec.places.len()),
            }
        }
        if objects.iter().any(|o| (o.color, o.shape, o.place) == (color, shape, place)) {
            continue;
        }
        let taken: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
        if let Some(bbox) = place_box(image, place, &taken, rng) {
            objects.push(SceneObject { color, shape, place, bbox });
        }
    }

    let mut regions: Vec<Region> = objects
        .iter()
        .map(|o| Region {
            feat: features(spec, o, rng),
            bbox: jitter(&o.bbox, image, 0.03, rng),
            score: (0.5 + 0.5 * rng.next_f64()) as f32,
        })
        .collect();

    if rng.bernoulli(spec.distractor_prob) {
        let parent = rng.below(objects.len());
        let o = &objects[parent];
        let shift = (0.35 * o.bbox.width()) as f32;
        let dx = if o.bbox.x2 + shift <= image.width() { shift } else { -shift };
        let b = BBox { x1: o.bbox.x1 + dx, x2: o.bbox.x2 + dx, ..o.bbox };
        let beta = iou(&b, &o.bbox)?;
        if b.inside(image) && beta > 0.35 && beta < 0.65 {
            regions.push(Region {
                feat: features(spec, o, rng),
                bbox: b,
                score: (0.3 + 0.3 * rng.next_f64()) as f32,
            });
        }
    }

    let mut targets: Vec<usize> = (0..objects.len()).collect();
    rng.shuffle(&mut targets);
    let instructions = targets[..spec.instructions_per_scene]
        .iter()
        .map(|&t| SceneInstruction {
            text: describe(spec, &objects[t], rng),
            target: t,
            gt_box: objects[t].bbox,
        })
        .collect();

    Ok(Scene {
        id: id.to_owned(),
        split: split.to_owned(),
        image_size: image,
        objects,
        regions,
        instructions,
    })
}
