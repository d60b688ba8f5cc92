use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{InstructionExample, TaskFamily};
use super::prompt::{format_prompt, Template};
use super::{Attribute, SynthImage, VisualEncoder};
use crate::adapter::AdaptedModel;
use crate::backbone::tokenizer;
use crate::error::{Error, Result};

/// One question put to an [`Answerer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query<'q> {
    pub instruction: &'q str,
    pub input: Option<&'q str>,
    pub image: Option<SynthImage>,
    /// Expert context placed on its own line before the instruction.
    pub context: Option<&'q str>,
}

impl<'q> Query<'q> {
    pub fn text(instruction: &'q str, input: Option<&'q str>) -> Self {
        Self {
            instruction,
            input,
            image: None,
            context: None,
        }
    }

    pub fn visual(instruction: &'q str, image: SynthImage) -> Self {
        Self {
            instruction,
            input: None,
            image: Some(image),
            context: None,
        }
    }
}

pub trait Answerer {
    fn answer(&self, query: &Query<'_>) -> Result<String>;
}

/// Answers by greedy decoding from an adapted model; images are passed
/// through the frozen toy encoder.
#[derive(Clone, Copy, Debug)]
pub struct ModelAnswerer<'a> {
    pub model: AdaptedModel<'a>,
    pub encoder: &'a VisualEncoder,
    pub max_new: usize,
}

impl<'a> ModelAnswerer<'a> {
    pub fn new(model: AdaptedModel<'a>, encoder: &'a VisualEncoder) -> Self {
        Self {
            model,
            encoder,
            max_new: 24,
        }
    }

    /// Decode a response to `template` (which must leave its response open).
    pub fn respond(&self, template: &Template<'_>, context: Option<&str>, image: Option<&SynthImage>) -> Result<String> {
        let max_len = self.model.backbone.config.max_seq_len;
        let prompt = format_prompt(template, context, max_len)?;
        let features = image.map(|i| self.encoder.encode(i));
        let out = self.model.complete(prompt.prompt_tokens(), features.as_deref(), self.max_new)?;
        Ok(tokenizer::decode(&out))
    }

    /// Greedy caption under the caption template.
    pub fn caption(&self, image: &SynthImage) -> Result<String> {
        self.respond(&Template::Caption { response: None }, None, Some(image))
    }
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, q: &Query<'_>) -> Result<String> {
        let template = Template::Instruction {
            instruction: q.instruction,
            input: q.input,
            response: None,
        };
        self.respond(&template, q.context, q.image.as_ref())
    }
}

/// Answers the image questions from ground truth; a self-test for the
/// evaluation harness.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn answer(&self, q: &Query<'_>) -> Result<String> {
        match (q.image, Attribute::from_question(q.instruction)) {
            (Some(img), Some(a)) => Ok(img.attribute(a).to_string()),
            _ => Err(Error::Dataset(format!(
                "the oracle only answers image questions, got {:?}",
                q.instruction
            ))),
        }
    }
}

/// Exact match after trimming whitespace and a trailing period, ignoring case.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    let norm = |s: &str| s.trim().trim_end_matches('.').trim().to_lowercase();
    norm(prediction) == norm(gold)
}

/// `n` evaluation images drawn uniformly from the universe.
pub fn vqa_eval_images(n: usize, seed: u64) -> Vec<SynthImage> {
    let universe = SynthImage::universe();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| *universe.choose(&mut rng).expect("universe")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaResult {
    pub attribute: Attribute,
    pub accuracy: f64,
    pub images: Vec<SynthImage>,
    pub predictions: Vec<String>,
}

impl VqaResult {
    /// Fraction of paired predictions that differ.
    pub fn disagreement(&self, other: &VqaResult) -> f64 {
        let n = self.predictions.len().min(other.predictions.len());
        if n == 0 {
            return 0.0;
        }
        let differ = self
            .predictions
            .iter()
            .zip(&other.predictions)
            .filter(|(a, b)| !exact_match(a, b))
            .count();
        differ as f64 / n as f64
    }
}

/// Ask `attribute`'s held-out question about each image, with the image's
/// features, and score exact matches.
pub fn eval_vqa(answerer: &dyn Answerer, attribute: Attribute, images: &[SynthImage]) -> Result<VqaResult> {
    let mut predictions = Vec::with_capacity(images.len());
    let mut correct = 0usize;
    for img in images {
        let p = answerer.answer(&Query::visual(attribute.question(), *img))?;
        correct += exact_match(&p, img.attribute(attribute)) as usize;
        predictions.push(p);
    }
    Ok(VqaResult {
        attribute,
        accuracy: if images.is_empty() { 0.0 } else { correct as f64 / images.len() as f64 },
        images: images.to_vec(),
        predictions,
    })
}

/// Color-question accuracy over `n_eval` images sampled with `seed`.
pub fn eval_zero_shot_vqa(answerer: &dyn Answerer, n_eval: usize, seed: u64) -> Result<f64> {
    Ok(eval_vqa(answerer, Attribute::Color, &vqa_eval_images(n_eval, seed))?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionScore {
    pub accuracy: f64,
    pub n: usize,
    pub per_family: BTreeMap<TaskFamily, f64>,
}

/// Exact-match accuracy on text-only instructions, overall and per family.
pub fn eval_instructions(answerer: &dyn Answerer, examples: &[InstructionExample]) -> Result<InstructionScore> {
    let mut tally: BTreeMap<TaskFamily, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for ex in examples {
        let p = answerer.answer(&Query::text(&ex.instruction, ex.input.as_deref()))?;
        let ok = exact_match(&p, &ex.output);
        correct += ok as usize;
        if let Some(f) = ex.family() {
            let e = tally.entry(f).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    Ok(InstructionScore {
        accuracy: if examples.is_empty() { 0.0 } else { correct as f64 / examples.len() as f64 },
        n: examples.len(),
        per_family: tally.into_iter().map(|(f, (c, n))| (f, c as f64 / n as f64)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    /// Captions naming both the right color and the right shape.
    pub color_shape_accuracy: f64,
    /// Captions identical to the reference.
    pub exact_accuracy: f64,
    pub captions: Vec<(SynthImage, String)>,
}

/// Whether `caption` names the image's color and shape as whole words.
pub fn caption_names_color_and_shape(caption: &str, image: &SynthImage) -> bool {
    let words: Vec<&str> = caption
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    words.contains(&image.color_name()) && words.contains(&image.shape_name())
}

/// Caption all 32 images.
pub fn eval_captions(model: &ModelAnswerer<'_>) -> Result<CaptionScore> {
    let universe = SynthImage::universe();
    let mut captions = Vec::with_capacity(universe.len());
    let (mut cs, mut exact) = (0usize, 0usize);
    for img in universe {
        let c = model.caption(&img)?;
        cs += caption_names_color_and_shape(&c, &img) as usize;
        exact += (c.trim() == img.caption()) as usize;
        captions.push((img, c));
    }
    let n = captions.len() as f64;
    Ok(CaptionScore {
        color_shape_accuracy: cs as f64 / n,
        exact_accuracy: exact as f64 / n,
        captions,
    })
}
