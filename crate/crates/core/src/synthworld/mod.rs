//! A small deterministic multimodal world: 32 attribute-tuple images, a
//! frozen toy encoder, caption and text-instruction datasets, prompt
//! templates, and the evaluations built on them.

mod data;
mod eval;
mod prompt;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use data::{
    caption_train_examples, gen_caption_dataset, gen_corpus, gen_instruction_dataset, gen_instruction_eval_set,
    instruction_train_examples, read_jsonl, write_jsonl, CaptionExample, InstructionExample, TaskFamily, COLOR_FACTS,
    WORDS,
};
pub use eval::{
    eval_captions, eval_instructions, eval_vqa, eval_zero_shot_vqa, exact_match, vqa_eval_images, Answerer,
    caption_names_color_and_shape, CaptionScore, InstructionScore, ModelAnswerer, OracleAnswerer, Query, VqaResult,
};
pub use prompt::{format_prompt, Formatted, Template, CAPTION_LEAD, CONTEXT_PREFIX};

use crate::error::{Error, Result};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Length of the concatenated one-hot attribute code.
pub const ONE_HOT_DIM: usize = SHAPES.len() + COLORS.len() + SIZES.len();

/// An "image": one shape, one color, one size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "ImageRecord", into = "ImageRecord")]
pub struct SynthImage {
    shape: usize,
    color: usize,
    size: usize,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    shape: String,
    color: String,
    size: String,
}

impl TryFrom<ImageRecord> for SynthImage {
    type Error = Error;
    fn try_from(r: ImageRecord) -> Result<Self> {
        SynthImage::from_names(&r.shape, &r.color, &r.size)
    }
}

impl From<SynthImage> for ImageRecord {
    fn from(i: SynthImage) -> Self {
        ImageRecord {
            shape: i.shape_name().into(),
            color: i.color_name().into(),
            size: i.size_name().into(),
        }
    }
}

fn lookup(table: &[&str], what: &str, name: &str) -> Result<usize> {
    table
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| Error::Dataset(format!("unknown {what} {name:?} (expected one of {table:?})")))
}

impl SynthImage {
    pub fn new(shape: usize, color: usize, size: usize) -> Result<Self> {
        if shape >= SHAPES.len() || color >= COLORS.len() || size >= SIZES.len() {
            return Err(Error::Dataset(format!("image ids out of range: ({shape}, {color}, {size})")));
        }
        Ok(Self { shape, color, size })
    }

    pub fn from_names(shape: &str, color: &str, size: &str) -> Result<Self> {
        Ok(Self {
            shape: lookup(&SHAPES, "shape", shape)?,
            color: lookup(&COLORS, "color", color)?,
            size: lookup(&SIZES, "size", size)?,
        })
    }

    /// All 32 images in a fixed order.
    pub fn universe() -> Vec<SynthImage> {
        let mut out = Vec::with_capacity(32);
        for shape in 0..SHAPES.len() {
            for color in 0..COLORS.len() {
                for size in 0..SIZES.len() {
                    out.push(SynthImage { shape, color, size });
                }
            }
        }
        out
    }

    pub fn shape_id(&self) -> usize {
        self.shape
    }

    pub fn color_id(&self) -> usize {
        self.color
    }

    pub fn size_id(&self) -> usize {
        self.size
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn size_name(&self) -> &'static str {
        SIZES[self.size]
    }

    pub fn attribute(&self, a: Attribute) -> &'static str {
        match a {
            Attribute::Color => self.color_name(),
            Attribute::Shape => self.shape_name(),
            Attribute::Size => self.size_name(),
        }
    }

    /// "a {size} {color} {shape}".
    pub fn caption(&self) -> String {
        format!("a {} {} {}", self.size_name(), self.color_name(), self.shape_name())
    }

    pub fn one_hot(&self) -> [f32; ONE_HOT_DIM] {
        let mut v = [0.0; ONE_HOT_DIM];
        v[self.shape] = 1.0;
        v[SHAPES.len() + self.color] = 1.0;
        v[SHAPES.len() + COLORS.len() + self.size] = 1.0;
        v
    }
}

impl fmt::Display for SynthImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.shape_name(), self.color_name(), self.size_name())
    }
}

/// Parses `"shape,color,size"`.
impl FromStr for SynthImage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [shape, color, size] => SynthImage::from_names(shape, color, size),
            _ => Err(Error::Dataset(format!("expected \"shape,color,size\", got {s:?}"))),
        }
    }
}

/// An attribute the evaluation can ask about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    Shape,
    Size,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Shape, Attribute::Size];

    /// The held-out question. None of these strings occur in training data.
    pub fn question(self) -> &'static str {
        match self {
            Attribute::Color => "What color is the object in the image?",
            Attribute::Shape => "What shape is the object in the image?",
            Attribute::Size => "What size is the object in the image?",
        }
    }

    pub fn from_question(q: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.question() == q)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Size => "size",
        }
    }
}

/// The frozen toy visual encoder: a fixed seeded linear map from the
/// one-hot attribute code to `feat_dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    feat_dim: usize,
    seed: u64,
    /// `[ONE_HOT_DIM × feat_dim]`, row-major.
    matrix: Vec<f32>,
}

impl VisualEncoder {
    pub fn new(feat_dim: usize, seed: u64) -> Result<Self> {
        if feat_dim == 0 {
            return Err(Error::InvalidConfig("feat_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Three active one-hot entries, so each feature has unit variance.
        let normal = Normal::new(0.0f32, 1.0 / 3f32.sqrt()).expect("valid std");
        let matrix = (0..ONE_HOT_DIM * feat_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { feat_dim, seed, matrix })
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, image: &SynthImage) -> Vec<f32> {
        let code = image.one_hot();
        let mut out = vec![0.0f32; self.feat_dim];
        for (i, &c) in code.iter().enumerate() {
            if c != 0.0 {
                let row = &self.matrix[i * self.feat_dim..(i + 1) * self.feat_dim];
                for (o, &m) in out.iter_mut().zip(row) {
                    *o += c * m;
                }
            }
        }
        out
    }
}

/// Features of `image` under the encoder drawn from `seed`.
pub fn encode_image(image: &SynthImage, feat_dim: usize, seed: u64) -> Result<Vec<f32>> {
    Ok(VisualEncoder::new(feat_dim, seed)?.encode(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_has_32_distinct_images() {
        let u = SynthImage::universe();
        assert_eq!(u.len(), 32);
        let set: std::collections::BTreeSet<_> = u.iter().collect();
        assert_eq!(set.len(), 32);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for img in SynthImage::universe() {
            assert_eq!(img.to_string().parse::<SynthImage>().unwrap(), img);
        }
        assert!("circle,red".parse::<SynthImage>().is_err());
        assert!("hexagon,red,small".parse::<SynthImage>().is_err());
        assert!(SynthImage::new(4, 0, 0).is_err());
    }

    #[test]
    fn serde_uses_attribute_names() {
        let img = SynthImage::from_names("star", "blue", "large").unwrap();
        let json = serde_json::to_string(&img).unwrap();
        assert_eq!(json, r#"{"shape":"star","color":"blue","size":"large"}"#);
        assert_eq!(serde_json::from_str::<SynthImage>(&json).unwrap(), img);
        assert!(serde_json::from_str::<SynthImage>(r#"{"shape":"star","color":"pink","size":"large"}"#).is_err());
    }

    #[test]
    fn encoder_depends_on_seed() {
        let img = SynthImage::universe()[5];
        let a = encode_image(&img, 16, 1).unwrap();
        assert_eq!(a, encode_image(&img, 16, 1).unwrap());
        assert_ne!(a, encode_image(&img, 16, 2).unwrap());
    }
}
