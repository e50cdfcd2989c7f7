//! Procedural edit-sequence dataset: attribute-driven shoe renderer, template
//! captioner, coarse-to-fine sequence sampler, augmentation, and the on-disk
//! manifest format (which also carries externally supplied data).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

/// Side of the rendered canvas; training crops take `CROP` out of it.
pub const CANVAS: usize = 72;
pub const CROP: usize = 64;
pub const T_MIN: usize = 3;
pub const T_MAX: usize = 5;

pub type Attributes = BTreeMap<String, String>;

macro_rules! attr_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($text => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

attr_enum!(Color {
    Red => "red",
    Orange => "orange",
    Yellow => "yellow",
    Green => "green",
    Blue => "blue",
    Purple => "purple",
    Brown => "brown",
    Black => "black",
});

attr_enum!(Heel { Flat => "flat", Mid => "mid", High => "high" });
attr_enum!(Toe { Open => "open", Closed => "closed" });
attr_enum!(Pattern { Solid => "solid", Striped => "striped", Dotted => "dotted" });

impl Color {
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [200, 30, 30],
            Color::Orange => [240, 140, 20],
            Color::Yellow => [235, 210, 40],
            Color::Green => [40, 150, 60],
            Color::Blue => [40, 70, 200],
            Color::Purple => [130, 50, 160],
            Color::Brown => [120, 75, 35],
            Color::Black => [25, 25, 25],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Color,
    Heel,
    Toe,
    Pattern,
    Strap,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Color,
        Field::Heel,
        Field::Toe,
        Field::Pattern,
        Field::Strap,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Field::Color => "color",
            Field::Heel => "heel",
            Field::Toe => "toe",
            Field::Pattern => "pattern",
            Field::Strap => "strap",
        }
    }

    pub fn is_coarse(self) -> bool {
        matches!(self, Field::Color | Field::Heel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeVector {
    pub color: Color,
    pub heel: Heel,
    pub toe: Toe,
    pub pattern: Pattern,
    pub strap: bool,
}

pub const NUM_ATTRIBUTE_VECTORS: usize = 8 * 3 * 2 * 3 * 2;

impl AttributeVector {
    /// Mixed-radix index in `0..288`.
    pub fn index(&self) -> usize {
        let mut i = self.color.index();
        i = i * 3 + self.heel.index();
        i = i * 2 + self.toe.index();
        i = i * 3 + self.pattern.index();
        i * 2 + self.strap as usize
    }

    pub fn from_index(mut i: usize) -> Self {
        assert!(i < NUM_ATTRIBUTE_VECTORS);
        let strap = i % 2 == 1;
        i /= 2;
        let pattern = Pattern::ALL[i % 3];
        i /= 3;
        let toe = Toe::ALL[i % 2];
        i /= 2;
        let heel = Heel::ALL[i % 3];
        i /= 3;
        Self {
            color: Color::ALL[i],
            heel,
            toe,
            pattern,
            strap,
        }
    }

    pub fn all() -> impl Iterator<Item = AttributeVector> {
        (0..NUM_ATTRIBUTE_VECTORS).map(Self::from_index)
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self::from_index(rng.random_range(0..NUM_ATTRIBUTE_VECTORS))
    }

    pub fn value(&self, field: Field) -> &'static str {
        match field {
            Field::Color => self.color.as_str(),
            Field::Heel => self.heel.as_str(),
            Field::Toe => self.toe.as_str(),
            Field::Pattern => self.pattern.as_str(),
            Field::Strap => strap_str(self.strap),
        }
    }

    pub fn diff(&self, other: &Self) -> Vec<Field> {
        Field::ALL
            .into_iter()
            .filter(|&f| self.value(f) != other.value(f))
            .collect()
    }

    pub fn to_map(&self) -> Attributes {
        Field::ALL
            .iter()
            .map(|&f| (f.key().to_string(), self.value(f).to_string()))
            .collect()
    }

    pub fn from_map(map: &Attributes) -> Option<Self> {
        let get = |f: Field| map.get(f.key()).map(String::as_str);
        Some(Self {
            color: Color::parse(get(Field::Color)?)?,
            heel: Heel::parse(get(Field::Heel)?)?,
            toe: Toe::parse(get(Field::Toe)?)?,
            pattern: Pattern::parse(get(Field::Pattern)?)?,
            strap: parse_strap(get(Field::Strap)?)?,
        })
    }

    /// A copy with `field` moved to a different, uniformly chosen value.
    fn mutate(&self, field: Field, rng: &mut impl Rng) -> Self {
        let mut out = *self;
        match field {
            Field::Color => out.color = pick_other(Color::ALL, self.color, rng),
            Field::Heel => out.heel = pick_other(Heel::ALL, self.heel, rng),
            Field::Toe => out.toe = pick_other(Toe::ALL, self.toe, rng),
            Field::Pattern => out.pattern = pick_other(Pattern::ALL, self.pattern, rng),
            Field::Strap => out.strap = !self.strap,
        }
        out
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.color,
            self.heel,
            self.toe,
            self.pattern,
            strap_str(self.strap)
        )
    }
}

fn strap_str(s: bool) -> &'static str {
    if s {
        "strap"
    } else {
        "strapless"
    }
}

fn parse_strap(s: &str) -> Option<bool> {
    match s {
        "strap" => Some(true),
        "strapless" => Some(false),
        _ => None,
    }
}

fn pick_other<T: Copy + PartialEq>(all: &[T], current: T, rng: &mut impl Rng) -> T {
    let others: Vec<T> = all.iter().copied().filter(|&v| v != current).collect();
    *others.choose(rng).unwrap()
}

/// Attribute values as text tokens, in key order.
pub fn attribute_tokens(attrs: &Attributes) -> Vec<String> {
    attrs.values().cloned().collect()
}

// ---------------------------------------------------------------------------
// Rendering

const BACKGROUND: [u8; 3] = [230, 230, 230];
const SOLE: [u8; 3] = [80, 80, 80];
const STRAP: [u8; 3] = [50, 50, 50];

type Pt = (f32, f32);

fn inside(poly: &[Pt], x: f32, y: f32) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

struct Geometry {
    body: Vec<Pt>,
    sole: Vec<Pt>,
    heel: (f32, f32, f32, f32),
    notch: Vec<Pt>,
    strap_center: Pt,
}

fn geometry(heel: Heel) -> Geometry {
    let lift = match heel {
        Heel::Flat => 2.0,
        Heel::Mid => 8.0,
        Heel::High => 16.0,
    };
    Geometry {
        body: vec![
            (12.0, 52.0 - lift),
            (13.0, 30.0 - lift * 0.6),
            (22.0, 31.0 - lift * 0.5),
            (30.0, 36.0 - lift * 0.3),
            (44.0, 41.0),
            (56.0, 45.0),
            (61.0, 48.0),
            (62.0, 52.0),
            (40.0, 53.0),
            (24.0, 52.0 - lift * 0.8),
        ],
        sole: vec![
            (12.0, 52.0 - lift),
            (24.0, 52.0 - lift * 0.8),
            (40.0, 53.0),
            (62.0, 52.0),
            (62.0, 56.0),
            (40.0, 56.0),
            (24.0, 55.0 - lift * 0.8),
            (12.0, 55.0 - lift),
        ],
        heel: (12.0, 19.0, 55.0 - lift, 56.0),
        notch: vec![(46.0, 40.0), (58.0, 44.5), (58.0, 50.0), (49.0, 49.0)],
        strap_center: (26.0, 31.0 - lift * 0.5),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Background,
    Sole,
    Body,
    Strap,
}

fn classify(g: &Geometry, a: &AttributeVector, x: f32, y: f32) -> Part {
    if a.strap {
        let (cx, cy) = g.strap_center;
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        if y < cy && (25.0..=49.0).contains(&r2) {
            return Part::Strap;
        }
    }
    if inside(&g.body, x, y) && !(a.toe == Toe::Open && inside(&g.notch, x, y)) {
        return Part::Body;
    }
    let (x0, x1, y0, y1) = g.heel;
    if inside(&g.sole, x, y) || (x >= x0 && x < x1 && y >= y0 && y < y1) {
        return Part::Sole;
    }
    Part::Background
}

fn pattern_hit(p: Pattern, x: usize, y: usize) -> bool {
    match p {
        Pattern::Solid => false,
        Pattern::Striped => (x as i64 - y as i64).rem_euclid(6) < 2,
        Pattern::Dotted => {
            let dx = (x % 6) as f32 - 2.5;
            let dy = (y % 6) as f32 - 2.5;
            dx * dx + dy * dy <= 2.0
        }
    }
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| v as f32 / 127.5 - 1.0)
}

/// Renders the full `CANVAS x CANVAS` image; training crops come from here.
pub fn render_canvas(a: &AttributeVector) -> Image {
    let g = geometry(a.heel);
    let base = a.color.rgb8();
    let light = base.map(|v| (v as f32 * 0.45 + 255.0 * 0.55).round() as u8);
    let mut img = Image::filled(CANVAS, CANVAS, to_unit(BACKGROUND));
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let rgb = match classify(&g, a, x as f32 + 0.5, y as f32 + 0.5) {
                Part::Background => continue,
                Part::Sole => SOLE,
                Part::Strap => STRAP,
                Part::Body if pattern_hit(a.pattern, x, y) => light,
                Part::Body => base,
            };
            img.set_pixel(y, x, to_unit(rgb));
        }
    }
    img
}

/// The centred `CROP x CROP` render, i.e. the oracle target image.
pub fn render(a: &AttributeVector) -> Image {
    render_canvas(a).center_crop(CROP).unwrap()
}

/// Pixels of the centred crop that show the body colour (or its pattern).
pub fn body_mask(a: &AttributeVector) -> Vec<bool> {
    let g = geometry(a.heel);
    let off = (CANVAS - CROP) / 2;
    let mut mask = Vec::with_capacity(CROP * CROP);
    for y in 0..CROP {
        for x in 0..CROP {
            let (cx, cy) = ((x + off) as f32 + 0.5, (y + off) as f32 + 0.5);
            mask.push(classify(&g, a, cx, cy) == Part::Body);
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Captioning

fn color_phrase(from: Color, to: Color, rng: &mut impl Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("is {to}"),
        1 => format!("make it {to}"),
        2 => format!("is {to} instead of {from}"),
        _ => format!("change the color to {to}"),
    }
}

fn heel_phrase(from: Heel, to: Heel, rng: &mut impl Rng) -> String {
    // comparatives only when they pin down a single target value
    let comparative = match (from, to) {
        (Heel::Mid, Heel::High) => Some("has a higher heel"),
        (Heel::Mid, Heel::Flat) => Some("has a lower heel"),
        _ => None,
    };
    let n = if comparative.is_some() { 4 } else { 3 };
    match rng.random_range(0..n) {
        0 => format!("has a {to} heel"),
        1 => format!("with a {to} heel"),
        2 => format!("make the heel {to}"),
        _ => comparative.unwrap().to_string(),
    }
}

fn toe_phrase(to: Toe, rng: &mut impl Rng) -> String {
    let opts: &[&str] = match to {
        Toe::Open => &["has an open toe", "with an open toe", "make it open toed"],
        Toe::Closed => &[
            "has a closed toe",
            "with a closed toe",
            "make it closed toed",
        ],
    };
    opts.choose(rng).unwrap().to_string()
}

fn pattern_phrase(to: Pattern, rng: &mut impl Rng) -> String {
    let opts: &[&str] = match to {
        Pattern::Striped => &["is striped", "has stripes", "with stripes"],
        Pattern::Dotted => &["is dotted", "has dots", "with polka dots"],
        Pattern::Solid => &["is solid", "has no pattern", "make it plain"],
    };
    opts.choose(rng).unwrap().to_string()
}

fn strap_phrase(to: bool, rng: &mut impl Rng) -> String {
    let opts: &[&str] = if to {
        &["has a strap", "add a strap", "with an ankle strap"]
    } else {
        &["has no strap", "remove the strap", "is strapless"]
    };
    opts.choose(rng).unwrap().to_string()
}

/// Template caption naming every changed field (joined with "and").
pub fn describe_diff(
    a: &AttributeVector,
    b: &AttributeVector,
    rng: &mut impl Rng,
) -> Result<String> {
    let fields = a.diff(b);
    if fields.is_empty() {
        return Err(Error::NoDifference);
    }
    let phrases: Vec<String> = fields
        .iter()
        .map(|f| match f {
            Field::Color => color_phrase(a.color, b.color, rng),
            Field::Heel => heel_phrase(a.heel, b.heel, rng),
            Field::Toe => toe_phrase(b.toe, rng),
            Field::Pattern => pattern_phrase(b.pattern, rng),
            Field::Strap => strap_phrase(b.strap, rng),
        })
        .collect();
    Ok(phrases.join(" and "))
}

/// Rule-based reader of the caption grammar: applies the described edits to
/// `prev`, returning the edited fields and the resulting attributes.
pub fn parse_description(
    text: &str,
    prev: &AttributeVector,
) -> Option<(Vec<Field>, AttributeVector)> {
    let mut out = *prev;
    let mut fields = Vec::new();
    for phrase in text.split(" and ") {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        let has = |w: &str| words.contains(&w);
        let field = if let Some(c) = words.iter().find_map(|w| Color::parse(w)) {
            out.color = c;
            Field::Color
        } else if has("heel") {
            out.heel = if has("higher") {
                Heel::High
            } else if has("lower") {
                Heel::Flat
            } else {
                words.iter().find_map(|w| Heel::parse(w))?
            };
            Field::Heel
        } else if has("toe") || has("toed") {
            out.toe = words.iter().find_map(|w| Toe::parse(w))?;
            Field::Toe
        } else if has("strap") || has("strapless") {
            out.strap = !(has("no") || has("remove") || has("strapless"));
            Field::Strap
        } else if ["striped", "stripes"].iter().any(|w| has(w)) {
            out.pattern = Pattern::Striped;
            Field::Pattern
        } else if ["dotted", "dots"].iter().any(|w| has(w)) {
            out.pattern = Pattern::Dotted;
            Field::Pattern
        } else if ["solid", "plain", "pattern"].iter().any(|w| has(w)) {
            out.pattern = Pattern::Solid;
            Field::Pattern
        } else {
            return None;
        };
        fields.push(field);
    }
    fields.sort();
    Some((fields, out))
}

// ---------------------------------------------------------------------------
// Sequences

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub description: String,
    pub image: Arc<Image>,
    pub attrs: Attributes,
}

/// One editing session: the initial image and `T` (description, target) turns.
/// Images are held at canvas resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSequence {
    pub id: String,
    pub initial: Arc<Image>,
    pub initial_attrs: Attributes,
    pub turns: Vec<Turn>,
}

impl EditSequence {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Attributes shown before turn `t` (1-based), i.e. those of `x_{t-1}`.
    pub fn attrs_before(&self, t: usize) -> &Attributes {
        if t <= 1 {
            &self.initial_attrs
        } else {
            &self.turns[t - 2].attrs
        }
    }

    pub fn target_vector(&self, t: usize) -> Option<AttributeVector> {
        AttributeVector::from_map(&self.turns[t - 1].attrs)
    }

    pub fn changed_fields(&self, t: usize) -> Vec<String> {
        changed_keys(self.attrs_before(t), &self.turns[t - 1].attrs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSequence {
            id: self.id.clone(),
            reason,
        };
        if !(T_MIN..=T_MAX).contains(&self.turns.len()) {
            return Err(bad(format!(
                "turn count out of range: {}",
                self.turns.len()
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.description.trim().is_empty() {
                return Err(bad(format!("turn {} has an empty description", i + 1)));
            }
            let prev = self.attrs_before(i + 1);
            if !prev.is_empty() || !turn.attrs.is_empty() {
                let n = changed_keys(prev, &turn.attrs).len();
                if !(1..=2).contains(&n) {
                    return Err(bad(format!("turn {} changes {n} attributes", i + 1)));
                }
            }
        }
        Ok(())
    }
}

fn changed_keys(a: &Attributes, b: &Attributes) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub t_min: usize,
    pub t_max: usize,
    /// Probability that a turn after the first may also touch coarse fields.
    pub late_coarse_prob: f64,
    pub two_field_prob: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            t_min: T_MIN,
            t_max: T_MAX,
            late_coarse_prob: 0.25,
            two_field_prob: 0.3,
        }
    }
}

/// Memoizes canvas renders, so a whole dataset shares at most 288 images.
#[derive(Default)]
pub struct RenderCache {
    images: HashMap<AttributeVector, Arc<Image>>,
}

impl RenderCache {
    pub fn get(&mut self, a: &AttributeVector) -> Arc<Image> {
        self.images
            .entry(*a)
            .or_insert_with(|| Arc::new(render_canvas(a)))
            .clone()
    }
}

pub fn sample_sequence(
    rng: &mut impl Rng,
    cfg: &SequenceConfig,
    id: String,
    cache: &mut RenderCache,
) -> EditSequence {
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let x0 = AttributeVector::random(rng);
    let mut prev = x0;
    let mut turns = Vec::with_capacity(t);
    for step in 1..=t {
        let pool: Vec<Field> = if step == 1 {
            vec![Field::Color, Field::Heel]
        } else if rng.random_bool(cfg.late_coarse_prob) {
            Field::ALL.to_vec()
        } else {
            vec![Field::Toe, Field::Pattern, Field::Strap]
        };
        let n = if rng.random_bool(cfg.two_field_prob) {
            2
        } else {
            1
        };
        let fields: Vec<Field> = pool.choose_multiple(rng, n).copied().collect();
        let mut next = prev;
        for f in fields {
            next = next.mutate(f, rng);
        }
        let description =
            describe_diff(&prev, &next, rng).expect("mutation always changes a field");
        turns.push(Turn {
            description,
            image: cache.get(&next),
            attrs: next.to_map(),
        });
        prev = next;
    }
    EditSequence {
        id,
        initial: cache.get(&x0),
        initial_attrs: x0.to_map(),
        turns,
    }
}

/// SplitMix64 step; derives independent per-item seeds from a master seed.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// `count` sequences, each sampled from its own stream of `master_seed`.
pub fn generate_dataset(count: usize, master_seed: u64, cfg: &SequenceConfig) -> Vec<EditSequence> {
    let mut cache = RenderCache::default();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(master_seed, i as u64));
            sample_sequence(&mut rng, cfg, format!("seq{i:06}"), &mut cache)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
    pub size: usize,
}

impl Augment {
    pub fn sample(rng: &mut impl Rng, canvas: usize, size: usize) -> Self {
        let slack = canvas - size;
        Self {
            top: rng.random_range(0..=slack),
            left: rng.random_range(0..=slack),
            flip: rng.random_bool(0.5),
            size,
        }
    }

    /// Centre crop, no flip.
    pub fn center(canvas: usize, size: usize) -> Self {
        let off = (canvas - size) / 2;
        Self {
            top: off,
            left: off,
            flip: false,
            size,
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let c = img
            .crop(self.top, self.left, self.size, self.size)
            .expect("augment crop inside canvas");
        if self.flip {
            c.flip_horizontal()
        } else {
            c
        }
    }
}

/// Random crop plus horizontal flip of a single canvas image.
pub fn augment(img: &Image, rng: &mut impl Rng, size: usize) -> Image {
    Augment::sample(rng, img.height.min(img.width), size).apply(img)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    image: String,
    description: String,
    attributes: Attributes,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `manifest.jsonl` and `images/*.png` under `dir`. Renders shared by
/// several turns are written once.
pub fn write_manifest(sequences: &[EditSequence], dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut written: HashMap<*const Image, String> = HashMap::new();
    let mut save = |img: &Arc<Image>, name: String| -> Result<String> {
        if let Some(rel) = written.get(&Arc::as_ptr(img)) {
            return Ok(rel.clone());
        }
        let rel = format!("images/{name}.png");
        img.save_png(&dir.join(&rel))?;
        written.insert(Arc::as_ptr(img), rel.clone());
        Ok(rel)
    };
    for seq in sequences {
        let mut turns = vec![TurnRecord {
            image: save(&seq.initial, format!("{}_0", seq.id))?,
            description: String::new(),
            attributes: seq.initial_attrs.clone(),
        }];
        for (t, turn) in seq.turns.iter().enumerate() {
            turns.push(TurnRecord {
                image: save(&turn.image, format!("{}_{}", seq.id, t + 1))?,
                description: turn.description.clone(),
                attributes: turn.attrs.clone(),
            });
        }
        let rec = SequenceRecord {
            id: seq.id.clone(),
            turns,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

/// Loads and validates a manifest. Images of any size are centre-cropped to a
/// square and resampled to the canvas size.
pub fn read_manifest(dir: &Path) -> Result<Vec<EditSequence>> {
    let manifest_path = dir.join(MANIFEST);
    let file = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut by_path: HashMap<PathBuf, Arc<Image>> = HashMap::new();
    let mut by_hash: HashMap<[u8; 32], Arc<Image>> = HashMap::new();
    let mut load = |rel: &str| -> Result<Arc<Image>> {
        let path = dir.join(rel);
        if let Some(img) = by_path.get(&path) {
            return Ok(img.clone());
        }
        if !path.is_file() {
            return Err(Error::MissingImage(path));
        }
        let mut img = Image::load_png(&path)?;
        if img.height != CANVAS || img.width != CANVAS {
            img = img.fit_square(CANVAS);
        }
        let digest: [u8; 32] = Sha256::digest(img.to_rgb8()).into();
        let shared = by_hash
            .entry(digest)
            .or_insert_with(|| Arc::new(img))
            .clone();
        by_path.insert(path, shared.clone());
        Ok(shared)
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let Some((first, rest)) = rec.turns.split_first() else {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "no turns".into(),
            });
        };
        if !first.description.is_empty() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "turn 0 must have an empty description".into(),
            });
        }
        let seq = EditSequence {
            id: rec.id.clone(),
            initial: load(&first.image)?,
            initial_attrs: first.attributes.clone(),
            turns: rest
                .iter()
                .map(|t| {
                    Ok(Turn {
                        description: t.description.clone(),
                        image: load(&t.image)?,
                        attrs: t.attributes.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        seq.validate()?;
        out.push(seq);
    }
    Ok(out)
}

/// Stable digest over a manifest file's bytes.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Every description in a dataset plus its attribute tokens, for vocabulary building.
pub fn corpus(sequences: &[EditSequence]) -> Vec<String> {
    let mut lines = Vec::new();
    for s in sequences {
        lines.push(attribute_tokens(&s.initial_attrs).join(" "));
        for t in &s.turns {
            lines.push(t.description.clone());
            lines.push(attribute_tokens(&t.attrs).join(" "));
        }
    }
    lines
}

/// Captions for every ordered attribute pair differing in one or two fields,
/// plus all attribute tokens; covers the full caption vocabulary.
pub fn full_caption_corpus() -> Vec<String> {
    let mut lines: Vec<String> = Vec::new();
    for a in AttributeVector::all() {
        lines.push(attribute_tokens(&a.to_map()).join(" "));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for a in AttributeVector::all().step_by(7) {
        for b in AttributeVector::all() {
            let n = a.diff(&b).len();
            if (1..=2).contains(&n) {
                for _ in 0..4 {
                    lines.push(describe_diff(&a, &b, &mut rng).unwrap());
                }
            }
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn index_bijection() {
        let all: Vec<_> = AttributeVector::all().collect();
        assert_eq!(all.len(), 288);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(AttributeVector::from_map(&a.to_map()), Some(*a));
        }
    }

    #[test]
    fn render_is_deterministic_and_sized() {
        let a = AttributeVector::from_index(77);
        assert_eq!(render(&a), render(&a));
        let img = render(&a);
        assert_eq!((img.height, img.width), (64, 64));
        assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn color_change_only_touches_body_mask() {
        for a in AttributeVector::all().step_by(5) {
            let mut b = a;
            b.color = pick_other(
                Color::ALL,
                a.color,
                &mut ChaCha8Rng::seed_from_u64(a.index() as u64),
            );
            let (ia, ib) = (render(&a), render(&b));
            let mask = body_mask(&a);
            assert_eq!(mask, body_mask(&b));
            let mut changed_inside = 0;
            for (p, &m) in mask.iter().enumerate() {
                let (y, x) = (p / CROP, p % CROP);
                let differs = ia.pixel(y, x) != ib.pixel(y, x);
                assert!(m || !differs, "pixel outside body mask changed");
                changed_inside += differs as usize;
            }
            assert!(changed_inside > 0);
        }
    }

    #[test]
    fn all_renders_are_distinct() {
        let hashes: HashSet<String> = AttributeVector::all()
            .map(|a| hex_digest(&render(&a).to_rgb8()))
            .collect();
        assert_eq!(hashes.len(), 288);
    }

    #[test]
    fn describe_single_color_change() {
        let a = AttributeVector::from_index(0);
        let mut b = a;
        b.color = Color::Blue;
        let allowed = [
            "is blue",
            "make it blue",
            "is blue instead of red",
            "change the color to blue",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let d = describe_diff(&a, &b, &mut rng).unwrap();
            assert!(allowed.contains(&d.as_str()), "{d}");
        }
        assert!(matches!(
            describe_diff(&a, &a, &mut rng),
            Err(Error::NoDifference)
        ));
    }

    #[test]
    fn describe_composition() {
        let a = AttributeVector::from_index(0);
        let mut b = a;
        b.color = Color::Green;
        b.strap = !a.strap;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = describe_diff(&a, &b, &mut rng).unwrap();
        assert!(d.contains(" and "));
        assert!(d.contains("green") && d.contains("strap"));
        let again = describe_diff(&a, &b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn caption_grammar_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for a in AttributeVector::all().step_by(3) {
            for b in AttributeVector::all() {
                let diff = a.diff(&b);
                if !(1..=2).contains(&diff.len()) {
                    continue;
                }
                let d = describe_diff(&a, &b, &mut rng).unwrap();
                let (fields, parsed) = parse_description(&d, &a).unwrap_or_else(|| panic!("{d}"));
                assert_eq!(fields, diff, "{d}");
                assert_eq!(parsed, b, "{d}");
            }
        }
    }

    #[test]
    fn sequence_invariants_sweep() {
        let cfg = SequenceConfig::default();
        let mut cache = RenderCache::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..10_000 {
            let s = sample_sequence(&mut rng, &cfg, format!("s{i}"), &mut cache);
            assert!((3..=5).contains(&s.len()));
            s.validate().unwrap();
            let first = s.changed_fields(1);
            assert!(
                first.iter().all(|k| k == "color" || k == "heel"),
                "{first:?}"
            );
        }
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let cfg = SequenceConfig::default();
        let a = generate_dataset(20, 7, &cfg);
        let b = generate_dataset(20, 7, &cfg);
        assert_eq!(a, b);
        let c = generate_dataset(20, 8, &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn augment_contract() {
        let img = render_canvas(&AttributeVector::from_index(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &mut rng, 64);
        assert_eq!((out.height, out.width), (64, 64));
        let flip = Augment {
            top: 2,
            left: 5,
            flip: true,
            size: 64,
        };
        assert_eq!(
            flip.apply(&img).flip_horizontal(),
            Augment {
                flip: false,
                ..flip
            }
            .apply(&img)
        );
        let flips = (0..10_000)
            .filter(|_| Augment::sample(&mut rng, 72, 64).flip)
            .count() as f64
            / 10_000.0;
        assert!((0.48..=0.52).contains(&flips), "{flips}");
    }

    #[test]
    fn validate_rejects_short_sequence() {
        let mut s = generate_dataset(1, 3, &SequenceConfig::default()).remove(0);
        s.turns.truncate(2);
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("turn count out of range"), "{err}");
    }
}
