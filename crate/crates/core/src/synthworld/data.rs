use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::prompt::{format_prompt, Template};
use super::{SynthImage, VisualEncoder, COLORS};
use crate::error::{Error, Result};
use crate::trainer::TrainExample;

/// Words used by the echo, reversal and counting tasks. Every fourth word is
/// held out of instruction training and reserved for evaluation.
pub const WORDS: [&str; 48] = [
    "cat", "dog", "hat", "pen", "cup", "box", "map", "key", "fish", "bird", "door", "book", "milk", "rain", "snow",
    "wind", "lamp", "desk", "ship", "road", "hill", "coin", "bell", "rope", "cake", "kite", "nest", "drum", "horse",
    "mouse", "chair", "table", "plant", "stone", "cloud", "river", "bread", "piano", "robot", "tiger", "zebra",
    "camel", "candle", "rocket", "garden", "window", "pocket", "button",
];

/// The color knowledge base: (noun phrase, color). The last fact of each
/// color is held out of instruction training.
pub const COLOR_FACTS: [(&str, &str); 20] = [
    ("a banana", "yellow"),
    ("a lemon", "yellow"),
    ("the sun", "yellow"),
    ("corn", "yellow"),
    ("a chick", "yellow"),
    ("grass", "green"),
    ("a leaf", "green"),
    ("a frog", "green"),
    ("a lime", "green"),
    ("a pea", "green"),
    ("the sky", "blue"),
    ("the sea", "blue"),
    ("a blueberry", "blue"),
    ("a sapphire", "blue"),
    ("a bluebird", "blue"),
    ("a cherry", "red"),
    ("a tomato", "red"),
    ("a strawberry", "red"),
    ("a ruby", "red"),
    ("a fire truck", "red"),
];

fn is_heldout_word(i: usize) -> bool {
    i % 4 == 3
}

fn is_heldout_fact(i: usize) -> bool {
    i % 5 == 4
}

fn words(heldout: bool) -> Vec<&'static str> {
    WORDS
        .iter()
        .enumerate()
        .filter(|(i, _)| is_heldout_word(*i) == heldout)
        .map(|(_, w)| *w)
        .collect()
}

fn facts(heldout: bool) -> Vec<(&'static str, &'static str)> {
    COLOR_FACTS
        .iter()
        .enumerate()
        .filter(|(i, _)| is_heldout_fact(*i) == heldout)
        .map(|(_, f)| *f)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CaptionRecord", into = "CaptionRecord")]
pub struct CaptionExample {
    pub image: SynthImage,
    pub caption: String,
}

impl CaptionExample {
    pub fn new(image: SynthImage) -> Self {
        Self {
            caption: image.caption(),
            image,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    shape: String,
    color: String,
    size: String,
    caption: String,
}

impl TryFrom<CaptionRecord> for CaptionExample {
    type Error = Error;
    fn try_from(r: CaptionRecord) -> Result<Self> {
        let image = SynthImage::from_names(&r.shape, &r.color, &r.size)?;
        if r.caption != image.caption() {
            return Err(Error::Dataset(format!(
                "caption {:?} does not describe {image}",
                r.caption
            )));
        }
        Ok(Self {
            image,
            caption: r.caption,
        })
    }
}

impl From<CaptionExample> for CaptionRecord {
    fn from(e: CaptionExample) -> Self {
        CaptionRecord {
            shape: e.image.shape_name().into(),
            color: e.image.color_name().into(),
            size: e.image.size_name().into(),
            caption: e.caption,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

impl InstructionExample {
    fn new(instruction: String, input: Option<&str>, output: String) -> Self {
        Self {
            instruction,
            input: input.map(str::to_string),
            output,
        }
    }

    /// The task family this example was drawn from, read off its wording.
    pub fn family(&self) -> Option<TaskFamily> {
        let i = self.instruction.as_str();
        if i.starts_with("Repeat the") {
            Some(TaskFamily::Echo)
        } else if i.starts_with("Spell") {
            Some(TaskFamily::Reversal)
        } else if i.starts_with("What color is") {
            Some(TaskFamily::ColorFact)
        } else if i.starts_with("How many letters") {
            Some(TaskFamily::Counting)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Echo,
    Reversal,
    ColorFact,
    Counting,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::Echo,
        TaskFamily::Reversal,
        TaskFamily::ColorFact,
        TaskFamily::Counting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Echo => "echo",
            TaskFamily::Reversal => "reversal",
            TaskFamily::ColorFact => "color_fact",
            TaskFamily::Counting => "counting",
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A pronounceable made-up word of two or three consonant-vowel syllables,
/// sometimes closed by a consonant.
fn pseudo_word(rng: &mut impl Rng) -> String {
    let mut w = String::new();
    for _ in 0..rng.gen_range(2..=3) {
        w.push(*CONSONANTS.choose(rng).expect("consonants") as char);
        w.push(*VOWELS.choose(rng).expect("vowels") as char);
    }
    if rng.gen_bool(0.3) {
        w.push(*CONSONANTS.choose(rng).expect("consonants") as char);
    }
    w
}

/// A word for a training-side task: half the time a made-up word, so the
/// tasks cannot be solved by memorising a fixed vocabulary.
fn training_word(rng: &mut impl Rng) -> String {
    if rng.gen_bool(0.5) {
        pseudo_word(rng)
    } else {
        words(false).choose(rng).expect("word pool is non-empty").to_string()
    }
}

fn reversed(w: &str) -> String {
    w.chars().rev().collect()
}

fn instruction_example(family: TaskFamily, heldout: bool, rng: &mut impl Rng) -> InstructionExample {
    let w = if heldout {
        words(true).choose(rng).expect("word pool is non-empty").to_string()
    } else {
        training_word(rng)
    };
    let w = w.as_str();
    let with_input = rng.gen_bool(0.5);
    match family {
        TaskFamily::Echo if with_input => InstructionExample::new("Repeat the input word.".into(), Some(w), w.into()),
        TaskFamily::Echo => InstructionExample::new(format!("Repeat the word: {w}"), None, w.into()),
        TaskFamily::Reversal if with_input => {
            InstructionExample::new("Spell the input backwards.".into(), Some(w), reversed(w))
        }
        TaskFamily::Reversal => InstructionExample::new(format!("Spell {w} backwards"), None, reversed(w)),
        // Reading the color off a described object; training side only, so
        // the held-out split stays about remembered facts.
        TaskFamily::ColorFact if with_input && !heldout => {
            let img = *SynthImage::universe().choose(rng).expect("non-empty universe");
            InstructionExample::new("What color is it?".into(), Some(&img.caption()), img.color_name().into())
        }
        TaskFamily::ColorFact => {
            let pool = facts(heldout);
            let (thing, color) = *pool.choose(rng).expect("fact pool is non-empty");
            InstructionExample::new(format!("What color is {thing}?"), None, color.into())
        }
        TaskFamily::Counting => {
            InstructionExample::new(format!("How many letters in {w}?"), None, w.chars().count().to_string())
        }
    }
}

fn instruction_set(n: usize, seed: u64, heldout: bool) -> Result<Vec<InstructionExample>> {
    if n == 0 {
        return Err(Error::Dataset("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let family = *TaskFamily::ALL.choose(&mut rng).expect("four families");
            instruction_example(family, heldout, &mut rng)
        })
        .collect())
}

/// `n` text-only instructions from the four task families, drawn from the
/// training words and facts.
pub fn gen_instruction_dataset(n: usize, seed: u64) -> Result<Vec<InstructionExample>> {
    instruction_set(n, seed, false)
}

/// Instructions over the held-out words and facts.
pub fn gen_instruction_eval_set(n: usize, seed: u64) -> Result<Vec<InstructionExample>> {
    instruction_set(n, seed, true)
}

/// `n` captioned images drawn uniformly from the universe.
pub fn gen_caption_dataset(n: usize, seed: u64) -> Result<Vec<CaptionExample>> {
    if n == 0 {
        return Err(Error::Dataset("dataset size must be at least 1".into()));
    }
    let universe = SynthImage::universe();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| CaptionExample::new(*universe.choose(&mut rng).expect("non-empty universe")))
        .collect())
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn fact_line(rng: &mut impl Rng) -> String {
    let (thing, color) = *COLOR_FACTS.choose(rng).expect("facts");
    match rng.gen_range(0..5) {
        0 => format!("{} is {color}.", capitalize(thing)),
        1 => format!("The color of {thing} is {color}."),
        2 => format!("I saw {thing}. It was {color}."),
        3 => format!("Everyone knows that {thing} is {color}."),
        _ => format!("{} is always {color}, never {}.", capitalize(thing), other_color(color, rng)),
    }
}

fn other_color(color: &str, rng: &mut impl Rng) -> &'static str {
    loop {
        let c = *COLORS.choose(rng).expect("colors");
        if c != color {
            return c;
        }
    }
}

fn object_line(rng: &mut impl Rng) -> String {
    let img = *SynthImage::universe().choose(rng).expect("universe");
    let (cap, shape, color, size) = (img.caption(), img.shape_name(), img.color_name(), img.size_name());
    match rng.gen_range(0..6) {
        0 => format!("There is {cap}. It is {color}."),
        1 => format!("Look at {cap}. The {shape} is {color}."),
        2 => format!("She drew {cap}. Its color is {color}. Its size is {size}."),
        3 => format!("{} is on the page. The shape is a {shape}.", capitalize(&cap)),
        4 => format!("He painted {cap}. The color of the {shape} is {color}."),
        _ => format!("We found {cap}. It was {size} and {color}."),
    }
}

fn word_line(rng: &mut impl Rng) -> String {
    let w = if rng.gen_bool(0.5) {
        pseudo_word(rng)
    } else {
        WORDS.choose(rng).expect("words").to_string()
    };
    let n = w.chars().count();
    match rng.gen_range(0..5) {
        0 => format!("The word {w} has {n} letters."),
        1 => format!("{w} spelled backwards is {}.", reversed(&w)),
        2 => format!("Say {w}. {w}."),
        3 => format!("The word {w} backwards is {}.", reversed(&w)),
        _ => format!("There are {n} letters in {w}."),
    }
}

/// Plain-prose pretraining text: color facts, object descriptions and word
/// play over real and made-up words. It carries the world knowledge but never the question/answer layout
/// of the instruction template.
pub fn gen_corpus(n: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::Dataset("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => fact_line(&mut rng),
            1 => object_line(&mut rng),
            _ => word_line(&mut rng),
        })
        .collect())
}

/// Tokenize captions under the caption template, with encoder features.
pub fn caption_train_examples(
    examples: &[CaptionExample],
    encoder: &VisualEncoder,
    max_len: usize,
) -> Result<Vec<TrainExample>> {
    examples
        .iter()
        .map(|e| {
            let f = format_prompt(
                &Template::Caption {
                    response: Some(&e.caption),
                },
                None,
                max_len,
            )?;
            Ok(f.into_train_example(Some(encoder.encode(&e.image))))
        })
        .collect()
}

/// Tokenize text-only instructions under the instruction template.
pub fn instruction_train_examples(examples: &[InstructionExample], max_len: usize) -> Result<Vec<TrainExample>> {
    examples
        .iter()
        .map(|e| {
            if e.output.is_empty() {
                return Err(Error::Dataset(format!("instruction {:?} has an empty output", e.instruction)));
            }
            let f = format_prompt(
                &Template::Instruction {
                    instruction: &e.instruction,
                    input: e.input.as_deref(),
                    response: Some(&e.output),
                },
                None,
                max_len,
            )?;
            Ok(f.into_train_example(None))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}
