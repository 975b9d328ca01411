//! Synthetic class-incremental episode streams.
//!
//! Every class is drawn as a chain of parts taken from a shared part
//! vocabulary followed by a class-specific tip marker, and every part pixel
//! carries a class tint. Classes that share part ids therefore share local
//! appearance, which is what gives the shared prompt partitions something to
//! learn and new classes something to inherit.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};
use crate::prompt_tree::ClassId;
use crate::seeding::{self, tags};

pub const IMAGE_MAGIC: [u8; 4] = *b"HIMG";
pub const LABEL_MAGIC: [u8; 4] = *b"HLBL";
/// dtype code stored in label grids: unsigned 16-bit labels.
pub const LABEL_DTYPE_U16: u32 = 16;

/// `C × H × W` image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&IMAGE_MAGIC)?;
        for dim in [self.channels, self.height, self.width] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != IMAGE_MAGIC {
            return Err(HpptError::Format("bad image magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let mut img = Image::zeros(dims[0], dims[1], dims[2]);
        let mut buf = [0u8; 4];
        for v in img.data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        Ok(img)
    }
}

/// Row-major `H × W` grid of class labels; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn background(height: usize, width: usize) -> Self {
        LabelGrid {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn mask(&self, class: ClassId) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class.0).collect()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.labels.iter().filter(|&&l| l != 0).map(|&l| ClassId(l)).collect()
    }

    /// Header `{magic "HLBL", H: u32, W: u32, dtype: u32 = 16}` then row-major
    /// little-endian `u16` labels.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&LABEL_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&LABEL_DTYPE_U16.to_le_bytes())?;
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != LABEL_MAGIC {
            return Err(HpptError::Format("bad label grid magic".into()));
        }
        let mut header = [0u32; 3];
        for h in header.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *h = u32::from_le_bytes(buf);
        }
        if header[2] != LABEL_DTYPE_U16 {
            return Err(HpptError::Format(format!("unsupported label dtype {}", header[2])));
        }
        let (height, width) = (header[0] as usize, header[1] as usize);
        let mut labels = vec![0u16; height * width];
        let mut buf = [0u8; 2];
        for l in labels.iter_mut() {
            r.read_exact(&mut buf)?;
            *l = u16::from_le_bytes(buf);
        }
        Ok(LabelGrid { height, width, labels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelGrid,
}

impl Sample {
    pub fn masks(&self) -> BTreeMap<ClassId, Vec<bool>> {
        self.labels.classes().into_iter().map(|c| (c, self.labels.mask(c))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartShape {
    Rect,
    Ellipse,
    Capsule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub id: usize,
    pub shape: PartShape,
    pub length: f64,
    pub width: f64,
    pub color: [f64; 3],
    pub stripe_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub tint: [f64; 3],
    pub tip_color: [f64; 3],
    pub tip_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: ClassId,
    pub name: String,
    pub part_count: usize,
    pub part_ids: Vec<usize>,
    pub signature: Signature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// 1-based.
    pub index: usize,
    pub label_space: BTreeSet<ClassId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub new: BTreeSet<ClassId>,
    pub regular: BTreeSet<ClassId>,
    pub old: BTreeSet<ClassId>,
}

/// New / regular / old classes of episode `t` (1-based). `old` is taken
/// relative to every class seen so far.
pub fn taxonomy(label_spaces: &[BTreeSet<ClassId>], t: usize) -> Result<Taxonomy> {
    if t < 1 || t > label_spaces.len() {
        return Err(HpptError::Range(format!(
            "episode {t} outside [1, {}]",
            label_spaces.len()
        )));
    }
    let current = &label_spaces[t - 1];
    let seen_before: BTreeSet<ClassId> = label_spaces[..t - 1].iter().flatten().copied().collect();
    let new: BTreeSet<ClassId> = current.difference(&seen_before).copied().collect();
    let regular = label_spaces[..t]
        .iter()
        .skip(1)
        .fold(label_spaces[0].clone(), |acc, s| acc.intersection(s).copied().collect());
    let seen: BTreeSet<ClassId> = label_spaces[..t].iter().flatten().copied().collect();
    let old = seen
        .iter()
        .filter(|c| !regular.contains(c) && !new.contains(c))
        .copied()
        .collect();
    Ok(Taxonomy { new, regular, old })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Two episodes, seven old+regular classes then five regular + two new.
    Porcine,
    /// `classes_per_episode` classes per episode, the last `carry` of which are
    /// carried into the next episode.
    Rolling,
    /// `label_spaces` given verbatim.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub layout: Layout,
    pub episodes: usize,
    pub classes_per_episode: usize,
    pub carry: usize,
    pub label_spaces: Vec<Vec<String>>,
    /// Optional part counts by class name; unspecified classes get a seeded count.
    pub part_counts: BTreeMap<String, usize>,
    pub max_parts: usize,
    pub part_vocab: usize,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub max_instruments: usize,
    pub noise: f64,
    /// Reject layouts in which some episode t ≥ 2 has no regular class.
    pub require_regular: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            layout: Layout::Porcine,
            episodes: 2,
            classes_per_episode: 7,
            carry: 5,
            label_spaces: Vec::new(),
            part_counts: BTreeMap::new(),
            max_parts: 3,
            part_vocab: 6,
            height: 32,
            width: 32,
            train_samples: 64,
            test_samples: 32,
            max_instruments: 3,
            noise: 0.05,
            require_regular: false,
            seed: 0,
        }
    }
}

/// Class names and part counts of the porcine nephrectomy layout.
pub const PORCINE_CLASSES: [(&str, usize); 9] = [
    ("VS", 3),
    ("GR", 3),
    ("PF", 3),
    ("BF", 3),
    ("UP", 1),
    ("LND", 3),
    ("MCS", 2),
    ("SI", 1),
    ("CA", 2),
];

impl StreamConfig {
    /// Per-episode class name lists implied by the layout.
    pub fn resolve_label_spaces(&self) -> Result<Vec<Vec<String>>> {
        let spaces = match self.layout {
            Layout::Porcine => {
                let names: Vec<String> = PORCINE_CLASSES.iter().map(|(n, _)| n.to_string()).collect();
                vec![names[..7].to_vec(), names[2..].to_vec()]
            }
            Layout::Rolling => {
                if self.episodes < 1 || self.classes_per_episode < 1 {
                    return Err(HpptError::Config(
                        "rolling layout needs at least one episode and one class per episode".into(),
                    ));
                }
                if self.carry >= self.classes_per_episode && self.episodes > 1 {
                    return Err(HpptError::Config(format!(
                        "carry {} must be smaller than classes_per_episode {}",
                        self.carry, self.classes_per_episode
                    )));
                }
                let mut next = 1;
                let mut spaces: Vec<Vec<String>> = Vec::new();
                for t in 0..self.episodes {
                    let mut space: Vec<String> = if t == 0 {
                        Vec::new()
                    } else {
                        let prev = &spaces[t - 1];
                        prev[prev.len() - self.carry..].to_vec()
                    };
                    while space.len() < self.classes_per_episode {
                        space.push(format!("K{next}"));
                        next += 1;
                    }
                    spaces.push(space);
                }
                spaces
            }
            Layout::Explicit => {
                if self.label_spaces.is_empty() || self.label_spaces.iter().any(|s| s.is_empty()) {
                    return Err(HpptError::Config("explicit layout needs non-empty label_spaces".into()));
                }
                self.label_spaces.clone()
            }
        };
        Ok(spaces)
    }

    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(HpptError::Config("images must be at least 4x4".into()));
        }
        if self.max_parts < 1 || self.part_vocab < self.max_parts {
            return Err(HpptError::Config(format!(
                "part_vocab ({}) must be >= max_parts ({}) >= 1",
                self.part_vocab, self.max_parts
            )));
        }
        if self.train_samples < 1 || self.max_instruments < 1 {
            return Err(HpptError::Config("need at least one sample and one instrument per sample".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(HpptError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub index: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: Vec<ClassSpec>,
    pub parts: Vec<PartSpec>,
    pub episodes: Vec<EpisodeManifest>,
}

impl StreamManifest {
    /// Everything except seeds, for checking that two runs used the same stream layout.
    pub fn layout_signature(&self) -> serde_json::Value {
        serde_json::json!({
            "height": self.height,
            "width": self.width,
            "classes": self.classes.iter().map(|c| &c.name).collect::<Vec<_>>(),
            "episodes": self.episodes.iter().map(|e| (&e.classes, e.train_samples, e.test_samples)).collect::<Vec<_>>(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub classes: Vec<ClassSpec>,
    pub parts: Vec<PartSpec>,
    pub episodes: Vec<Episode>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

pub const CHANNELS: usize = 3;

impl Stream {
    pub fn class(&self, id: ClassId) -> Result<&ClassSpec> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| HpptError::NotFound(format!("class {id}")))
    }

    pub fn class_by_name(&self, name: &str) -> Result<&ClassSpec> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| HpptError::NotFound(format!("class {name:?}")))
    }

    pub fn name(&self, id: ClassId) -> String {
        self.class(id).map(|c| c.name.clone()).unwrap_or_else(|_| id.to_string())
    }

    pub fn label_spaces(&self) -> Vec<BTreeSet<ClassId>> {
        self.episodes.iter().map(|e| e.label_space.clone()).collect()
    }

    pub fn taxonomy(&self, t: usize) -> Result<Taxonomy> {
        taxonomy(&self.label_spaces(), t)
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            version: 1,
            seed: self.seed,
            height: self.height,
            width: self.width,
            channels: CHANNELS,
            classes: self.classes.clone(),
            parts: self.parts.clone(),
            episodes: self
                .episodes
                .iter()
                .map(|e| EpisodeManifest {
                    index: e.index,
                    seed: e.seed,
                    classes: e.label_space.iter().map(|&c| self.name(c)).collect(),
                    train_samples: e.train.len(),
                    test_samples: e.test.len(),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` plus `episode_<t>/<split>_<j>.img|.lbl` files.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        for ep in &self.episodes {
            let ep_dir = dir.join(format!("episode_{}", ep.index));
            std::fs::create_dir_all(&ep_dir)?;
            for (split, samples) in [("train", &ep.train), ("test", &ep.test)] {
                for (j, s) in samples.iter().enumerate() {
                    let stem = format!("{split}_{j:04}");
                    let img = std::fs::File::create(ep_dir.join(format!("{stem}.img")))?;
                    s.image.write_blob(std::io::BufWriter::new(img))?;
                    let lbl = std::fs::File::create(ep_dir.join(format!("{stem}.lbl")))?;
                    s.labels.write(std::io::BufWriter::new(lbl))?;
                }
            }
        }
        Ok(())
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn build_parts(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<PartSpec> {
    let shapes = [PartShape::Rect, PartShape::Ellipse, PartShape::Capsule];
    (0..vocab)
        .map(|id| PartSpec {
            id,
            shape: shapes[id % shapes.len()],
            length: rng.random_range(7.0..10.0),
            width: rng.random_range(5.0..7.0),
            color: random_color(rng, 0.15, 0.85),
            stripe_freq: rng.random_range(0.6..1.6),
        })
        .collect()
}

/// Golden-spiral points on a sphere around mid-grey, randomly rotated; every
/// tint is an extreme point of the set and so linearly separable from the rest.
fn class_tints(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let (yaw, pitch): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..PI));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            let (x, y) = (r * phi.cos(), r * phi.sin());
            // rotate about z, then about x
            let (x, y) = (x * yaw.cos() - y * yaw.sin(), x * yaw.sin() + y * yaw.cos());
            let (y, z) = (y * pitch.cos() - z * pitch.sin(), y * pitch.sin() + z * pitch.cos());
            [0.5 + TINT_RADIUS * x, 0.5 + TINT_RADIUS * y, 0.5 + TINT_RADIUS * z]
        })
        .collect()
}

/// Radius of the tint sphere in RGB.
const TINT_RADIUS: f64 = 0.48;

fn build_catalog(config: &StreamConfig, names: &[String], parts: &[PartSpec]) -> Result<Vec<ClassSpec>> {
    let mut rng = seeding::rng(config.seed, tags::CATALOG + 1);
    let tints = class_tints(&mut rng, names.len());
    let porcine: BTreeMap<&str, usize> = PORCINE_CLASSES.iter().copied().collect();
    let vocab: Vec<usize> = (0..parts.len()).collect();
    let mut classes = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let part_count = match config.part_counts.get(name) {
            Some(&n) => n,
            None if config.layout == Layout::Porcine => porcine.get(name.as_str()).copied().unwrap_or(1),
            None => rng.random_range(1..=config.max_parts),
        };
        if part_count < 1 || part_count > config.max_parts {
            return Err(HpptError::Config(format!(
                "class {name} has {part_count} parts, allowed range is [1, {}]",
                config.max_parts
            )));
        }
        let part_ids: Vec<usize> = vocab.choose_multiple(&mut rng, part_count).copied().collect();
        let signature = Signature {
            tint: tints[k],
            tip_color: random_color(&mut rng, 0.0, 1.0),
            tip_radius: rng.random_range(2.2..3.0),
        };
        let id = u16::try_from(k + 1)
            .map_err(|_| HpptError::Config("too many classes for u16 labels".into()))?;
        classes.push(ClassSpec {
            id: ClassId(id),
            name: name.clone(),
            part_count,
            part_ids,
            signature,
        });
    }
    Ok(classes)
}

/// Mixing weight of the class tint in every part pixel.
const TINT_WEIGHT: f64 = 0.7;

struct Placement<'a> {
    class: &'a ClassSpec,
    origin: (f64, f64),
    dir: (f64, f64),
}

impl Placement<'_> {
    /// Returns the colour of the instrument at pixel centre `(y, x)` or `None`
    /// when the pixel is outside it.
    fn shade(&self, y: f64, x: f64, parts: &[PartSpec]) -> Option<[f64; 3]> {
        let (dy, dx) = (y - self.origin.0, x - self.origin.1);
        let along = dy * self.dir.0 + dx * self.dir.1;
        let across = (-dy * self.dir.1 + dx * self.dir.0).abs();
        let mut start = 0.0;
        for &pid in &self.class.part_ids {
            let part = &parts[pid];
            let end = start + part.length;
            let half_w = part.width / 2.0;
            let inside = match part.shape {
                PartShape::Rect => along >= start && along <= end && across <= half_w,
                PartShape::Ellipse => {
                    let mid = (start + end) / 2.0;
                    let s = (along - mid) / (part.length / 2.0);
                    s.abs() <= 1.0 && across <= half_w * (1.0 - s * s).sqrt().max(0.35)
                }
                PartShape::Capsule => {
                    let clamped = along.clamp(start + half_w, (end - half_w).max(start + half_w));
                    let d = ((along - clamped).powi(2) + across * across).sqrt();
                    d <= half_w && along >= start - 0.5 && along <= end + 0.5
                }
            };
            if inside {
                let stripe = 0.8 + 0.2 * (part.stripe_freq * (along - start) * PI).sin();
                let tint = self.class.signature.tint;
                let mut c = [0.0; 3];
                for ch in 0..3 {
                    c[ch] = (1.0 - TINT_WEIGHT) * part.color[ch] * stripe + TINT_WEIGHT * tint[ch];
                }
                return Some(c);
            }
            start = end;
        }
        let r = self.class.signature.tip_radius;
        let tip = start + r;
        let d = ((along - tip).powi(2) + across * across).sqrt();
        let sig = &self.class.signature;
        (d <= r).then(|| std::array::from_fn(|ch| (1.0 - TINT_WEIGHT) * sig.tip_color[ch] + TINT_WEIGHT * sig.tint[ch]))
    }

    fn length(&self, parts: &[PartSpec]) -> f64 {
        self.class.part_ids.iter().map(|&p| parts[p].length).sum::<f64>() + 2.0 * self.class.signature.tip_radius
    }
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    config: &StreamConfig,
    classes: &[&ClassSpec],
    parts: &[PartSpec],
) -> Sample {
    let (h, w) = (config.height, config.width);
    let mut image = Image::zeros(CHANNELS, h, w);
    let mut labels = LabelGrid::background(h, w);
    // tissue-like background with a slow seeded undulation
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let base = [0.56, 0.44, 0.44];
    for row in 0..h {
        for col in 0..w {
            let wave = 0.08 * ((row as f64 * 0.21 + col as f64 * 0.13) + phase).sin();
            for (ch, b) in base.iter().enumerate() {
                image.set(ch, row, col, (b + wave) as f32);
            }
        }
    }
    let count = rng.random_range(1..=config.max_instruments.min(classes.len()));
    let chosen: Vec<&ClassSpec> = classes.choose_multiple(rng, count).copied().collect();
    for class in chosen {
        let angle: f64 = rng.random_range(0.0..2.0 * PI);
        let dir = (angle.sin(), angle.cos());
        let mut placement = Placement {
            class,
            origin: (0.0, 0.0),
            dir,
        };
        let len = placement.length(parts);
        let centre = (
            rng.random_range(0.25 * h as f64..0.75 * h as f64),
            rng.random_range(0.25 * w as f64..0.75 * w as f64),
        );
        placement.origin = (centre.0 - dir.0 * len / 2.0, centre.1 - dir.1 * len / 2.0);
        for row in 0..h {
            for col in 0..w {
                if let Some(c) = placement.shade(row as f64 + 0.5, col as f64 + 0.5, parts) {
                    for (ch, v) in c.iter().enumerate() {
                        image.set(ch, row, col, *v as f32);
                    }
                    labels.labels[row * w + col] = class.id.0;
                }
            }
        }
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("noise is finite and non-negative");
        for v in image.data.iter_mut() {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Sample { image, labels }
}

/// Deterministic stream for `config`; identical configs give bit-identical streams.
pub fn generate_stream(config: &StreamConfig) -> Result<Stream> {
    config.validate()?;
    let spaces = config.resolve_label_spaces()?;
    let mut names: Vec<String> = Vec::new();
    for space in &spaces {
        for n in space {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let mut part_rng = seeding::rng(config.seed, tags::CATALOG);
    let parts = build_parts(&mut part_rng, config.part_vocab);
    let classes = build_catalog(config, &names, &parts)?;
    let id_of: BTreeMap<&str, ClassId> = classes.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let label_spaces: Vec<BTreeSet<ClassId>> = spaces
        .iter()
        .map(|s| s.iter().map(|n| id_of[n.as_str()]).collect())
        .collect();
    if config.require_regular {
        for t in 2..=label_spaces.len() {
            if taxonomy(&label_spaces, t)?.regular.is_empty() {
                return Err(HpptError::Config(format!("episode {t} has no regular class")));
            }
        }
    }
    let mut episodes = Vec::with_capacity(spaces.len());
    for (i, space) in label_spaces.iter().enumerate() {
        let index = i + 1;
        let seed = seeding::derive_seed(config.seed, tags::EPISODE + index as u64);
        let mut rng = seeding::rng(seed, 0);
        let members: Vec<&ClassSpec> = classes.iter().filter(|c| space.contains(&c.id)).collect();
        let train = (0..config.train_samples)
            .map(|_| render_sample(&mut rng, config, &members, &parts))
            .collect();
        let test = (0..config.test_samples)
            .map(|_| render_sample(&mut rng, config, &members, &parts))
            .collect();
        episodes.push(Episode {
            index,
            label_space: space.clone(),
            train,
            test,
            seed,
        });
    }
    Ok(Stream {
        classes,
        parts,
        episodes,
        seed: config.seed,
        height: config.height,
        width: config.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u16]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId(i)).collect()
    }

    fn small(layout: Layout) -> StreamConfig {
        StreamConfig {
            layout,
            train_samples: 6,
            test_samples: 2,
            height: 16,
            width: 16,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn single_episode_taxonomy() {
        let tax = taxonomy(&[set(&[1, 2])], 1).unwrap();
        assert_eq!(tax.new, set(&[1, 2]));
        assert_eq!(tax.regular, set(&[1, 2]));
        assert!(tax.old.is_empty());
    }

    #[test]
    fn porcine_taxonomy() {
        let stream = generate_stream(&small(Layout::Porcine)).unwrap();
        let tax = stream.taxonomy(2).unwrap();
        let names = |s: &BTreeSet<ClassId>| s.iter().map(|&c| stream.name(c)).collect::<BTreeSet<_>>();
        let expect = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(names(&tax.old), expect(&["VS", "GR"]));
        assert_eq!(names(&tax.regular), expect(&["PF", "BF", "UP", "LND", "MCS"]));
        assert_eq!(names(&tax.new), expect(&["SI", "CA"]));
        assert!(matches!(stream.taxonomy(3), Err(HpptError::Range(_))));
        assert!(matches!(stream.taxonomy(0), Err(HpptError::Range(_))));
    }

    #[test]
    fn two_class_single_episode_stream() {
        let cfg = StreamConfig {
            layout: Layout::Explicit,
            label_spaces: vec![vec!["a".into(), "b".into()]],
            ..small(Layout::Explicit)
        };
        let stream = generate_stream(&cfg).unwrap();
        let tax = stream.taxonomy(1).unwrap();
        assert_eq!(tax.new.len(), 2);
        assert!(tax.old.is_empty());
    }

    #[test]
    fn brute_force_taxonomy_on_rotating_classes() {
        let spaces = vec![set(&[1, 2, 3]), set(&[2, 3, 4]), set(&[3, 4, 5])];
        for t in 1..=3 {
            let tax = taxonomy(&spaces, t).unwrap();
            let universe: BTreeSet<u16> = (1..=5).collect();
            for c in universe {
                let cid = ClassId(c);
                let in_now = spaces[t - 1].contains(&cid);
                let seen_before = spaces[..t - 1].iter().any(|s| s.contains(&cid));
                let in_all = spaces[..t].iter().all(|s| s.contains(&cid));
                let seen = spaces[..t].iter().any(|s| s.contains(&cid));
                assert_eq!(tax.new.contains(&cid), in_now && !seen_before);
                assert_eq!(tax.regular.contains(&cid), in_all);
                assert_eq!(tax.old.contains(&cid), seen && !in_all && !(in_now && !seen_before));
            }
        }
    }

    #[test]
    fn rolling_layout_and_regular_requirement() {
        let cfg = StreamConfig {
            episodes: 3,
            classes_per_episode: 3,
            carry: 1,
            ..small(Layout::Rolling)
        };
        let spaces = cfg.resolve_label_spaces().unwrap();
        assert_eq!(spaces[1][0], spaces[0][2]);
        let strict = StreamConfig { require_regular: true, ..cfg.clone() };
        assert!(matches!(generate_stream(&strict), Err(HpptError::Config(_))));
        let bad = StreamConfig { carry: 3, ..cfg };
        assert!(matches!(generate_stream(&bad), Err(HpptError::Config(_))));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = generate_stream(&small(Layout::Porcine)).unwrap();
        let b = generate_stream(&small(Layout::Porcine)).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(&StreamConfig { seed: 1, ..small(Layout::Porcine) }).unwrap();
        assert_ne!(a.episodes[0].train[0], c.episodes[0].train[0]);
    }

    #[test]
    fn masks_are_disjoint_and_in_label_space() {
        let stream = generate_stream(&small(Layout::Porcine)).unwrap();
        for ep in &stream.episodes {
            for s in ep.train.iter().chain(&ep.test) {
                let masks = s.masks();
                for c in masks.keys() {
                    assert!(ep.label_space.contains(c));
                }
                for p in 0..s.labels.labels.len() {
                    let owners = masks.values().filter(|m| m[p]).count();
                    assert!(owners <= 1);
                    assert_eq!(owners == 1, s.labels.labels[p] != 0);
                }
                assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn class_specs_are_consistent() {
        let stream = generate_stream(&small(Layout::Porcine)).unwrap();
        for c in &stream.classes {
            assert_eq!(c.part_ids.len(), c.part_count);
            assert!(c.part_ids.iter().all(|&p| p < stream.parts.len()));
        }
        assert_eq!(stream.class_by_name("CA").unwrap().part_count, 2);
        assert_eq!(stream.class_by_name("UP").unwrap().part_count, 1);
    }

    #[test]
    fn binary_formats_round_trip() {
        let stream = generate_stream(&small(Layout::Porcine)).unwrap();
        let s = &stream.episodes[0].train[0];
        let mut buf = Vec::new();
        s.labels.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HLBL");
        assert_eq!(buf.len(), 16 + 2 * 16 * 16);
        assert_eq!(LabelGrid::read(buf.as_slice()).unwrap(), s.labels);
        let mut buf = Vec::new();
        s.image.write_blob(&mut buf).unwrap();
        assert_eq!(Image::read_blob(buf.as_slice()).unwrap(), s.image);
        assert!(LabelGrid::read(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn stream_writes_manifest_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        let stream = generate_stream(&small(Layout::Porcine)).unwrap();
        stream.write_to_dir(dir.path()).unwrap();
        let manifest: StreamManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest, stream.manifest());
        assert!(dir.path().join("episode_2/test_0001.lbl").exists());
    }
}
