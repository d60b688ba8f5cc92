use std::ops::Range;

use crate::backbone::tokenizer::{self, BOS, EOS};
use crate::error::{Error, Result};
use crate::trainer::TrainExample;

/// Text that opens the caption template; the caption follows it directly.
pub const CAPTION_LEAD: &str = "There is ";

/// Opening of the expert-context line; the line closes with `"]\n"`.
pub const CONTEXT_PREFIX: &str = "[Caption expert: ";

/// Prompt layouts. A `response` of `None` leaves the prompt open for
/// generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template<'a> {
    Instruction {
        instruction: &'a str,
        input: Option<&'a str>,
        response: Option<&'a str>,
    },
    Caption {
        response: Option<&'a str>,
    },
    /// A question about an image; the caller supplies the image features.
    VisualInstruction {
        instruction: &'a str,
        response: Option<&'a str>,
    },
}

/// A tokenized prompt. `loss_mask[i]` is 1 exactly on response tokens and
/// the closing EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Formatted {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<f32>,
    /// Tokens before the response.
    pub prompt_len: usize,
    /// Token range of the whole expert-context line, when present.
    pub context_span: Option<Range<usize>>,
}

impl Formatted {
    pub fn prompt_tokens(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn into_train_example(self, features: Option<Vec<f32>>) -> TrainExample {
        TrainExample {
            tokens: self.tokens,
            loss_mask: self.loss_mask,
            features,
        }
    }
}

fn question_head(instruction: &str, input: Option<&str>) -> String {
    let mut head = format!("Q: {instruction}\n");
    if let Some(input) = input {
        head.push_str(&format!("In: {input}\n"));
    }
    head.push_str("A: ");
    head
}

/// Render a template into tokens. Instructions use
///
/// ```text
/// [Caption expert: {context}]   (optional)
/// Q: {instruction}
/// In: {input}                   (optional)
/// A: {response}<EOS>
/// ```
///
/// preceded by BOS; captions are `"There is {caption}<EOS>"`, describing
/// the image in the plain prose the backbone was trained on. Fails if the
/// result exceeds `max_len` tokens.
pub fn format_prompt(template: &Template<'_>, expert_context: Option<&str>, max_len: usize) -> Result<Formatted> {
    let (head, response) = match *template {
        Template::Instruction {
            instruction,
            input,
            response,
        } => (question_head(instruction, input), response),
        Template::Caption { response } => (CAPTION_LEAD.to_string(), response),
        Template::VisualInstruction { instruction, response } => (question_head(instruction, None), response),
    };
    let mut tokens = vec![BOS];
    let context_span = expert_context.map(|ctx| {
        let start = tokens.len();
        tokens.extend(tokenizer::encode(&format!("{CONTEXT_PREFIX}{ctx}]\n")));
        start..tokens.len()
    });
    tokens.extend(tokenizer::encode(&head));
    let prompt_len = tokens.len();
    let mut loss_mask = vec![0.0; prompt_len];
    if let Some(r) = response {
        let r = tokenizer::encode(r);
        loss_mask.extend(std::iter::repeat_n(1.0, r.len() + 1));
        tokens.extend(r);
        tokens.push(EOS);
    }
    if tokens.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    Ok(Formatted {
        tokens,
        loss_mask,
        prompt_len,
        context_span,
    })
}
