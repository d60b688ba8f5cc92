//! The synthetic world: encoder, datasets, prompt layout, file round trips
//! and the evaluation harness.

use padapt::backbone::tokenizer::{self, EOS};
use padapt::synthworld::{
    eval_instructions, eval_vqa, exact_match, format_prompt, gen_caption_dataset, gen_corpus, gen_instruction_dataset,
    gen_instruction_eval_set, instruction_train_examples, read_jsonl, vqa_eval_images, write_jsonl, Answerer,
    Attribute, CaptionExample, InstructionExample, OracleAnswerer, Query, SynthImage, TaskFamily, Template,
    VisualEncoder, COLORS, COLOR_FACTS, SHAPES, SIZES, WORDS,
};
use padapt::Result;
use proptest::prelude::*;

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

#[test]
fn encoder_separates_every_image() {
    for seed in [0, 7, 123] {
        let enc = VisualEncoder::new(16, seed).unwrap();
        let feats: Vec<Vec<f32>> = SynthImage::universe().iter().map(|i| enc.encode(i)).collect();
        let mut min = f32::INFINITY;
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                min = min.min(dist(&feats[i], &feats[j]));
            }
        }
        assert!(min > 0.0, "seed {seed}: two images share features");
    }
}

#[test]
fn encoder_is_linear_in_the_one_hot_code() {
    let enc = VisualEncoder::new(8, 3).unwrap();
    // Swapping only the color moves the features by the same vector whatever
    // the shape and size.
    let shift = |shape: usize, size: usize| -> Vec<f32> {
        let a = enc.encode(&SynthImage::new(shape, 0, size).unwrap());
        let b = enc.encode(&SynthImage::new(shape, 2, size).unwrap());
        a.iter().zip(&b).map(|(x, y)| y - x).collect()
    };
    let reference = shift(0, 0);
    for shape in 0..SHAPES.len() {
        for size in 0..SIZES.len() {
            assert!(dist(&shift(shape, size), &reference) < 1e-5);
        }
    }
}

#[test]
fn datasets_are_deterministic_under_seed() {
    assert_eq!(gen_caption_dataset(50, 4).unwrap(), gen_caption_dataset(50, 4).unwrap());
    assert_ne!(gen_caption_dataset(50, 4).unwrap(), gen_caption_dataset(50, 5).unwrap());
    assert_eq!(gen_instruction_dataset(50, 4).unwrap(), gen_instruction_dataset(50, 4).unwrap());
    assert_ne!(gen_instruction_dataset(50, 4).unwrap(), gen_instruction_dataset(50, 5).unwrap());
    assert_eq!(gen_corpus(50, 4).unwrap(), gen_corpus(50, 4).unwrap());
    assert!(gen_caption_dataset(0, 1).is_err());
    assert!(gen_instruction_dataset(0, 1).is_err());
}

#[test]
fn captions_regenerate_from_their_images() {
    for ex in gen_caption_dataset(300, 8).unwrap() {
        let words: Vec<&str> = ex.caption.split(' ').collect();
        assert_eq!(words.len(), 4);
        assert_eq!(words[0], "a");
        assert_eq!(words[1], ex.image.size_name());
        assert_eq!(words[2], ex.image.color_name());
        assert_eq!(words[3], ex.image.shape_name());
    }
}

#[test]
fn caption_set_covers_the_universe() {
    let set: std::collections::BTreeSet<SynthImage> =
        gen_caption_dataset(2000, 1).unwrap().into_iter().map(|e| e.image).collect();
    assert_eq!(set.len(), 32);
}

/// Answers recomputed from the instruction text alone.
fn rule_answer(ex: &InstructionExample) -> Option<String> {
    let instr = ex.instruction.as_str();
    let subject = |prefix: &str, suffix: &str| -> Option<String> {
        match &ex.input {
            Some(i) => Some(i.clone()),
            None => instr.strip_prefix(prefix)?.strip_suffix(suffix).map(str::to_string),
        }
    };
    match ex.family()? {
        TaskFamily::Echo => match &ex.input {
            Some(i) => Some(i.clone()),
            None => instr.strip_prefix("Repeat the word: ").map(str::to_string),
        },
        TaskFamily::Reversal => subject("Spell ", " backwards").map(|w| w.chars().rev().collect()),
        TaskFamily::Counting => subject("How many letters in ", "?").map(|w| w.len().to_string()),
        TaskFamily::ColorFact => match &ex.input {
            Some(description) => COLORS
                .iter()
                .find(|c| description.split(' ').any(|w| w == **c))
                .map(|c| c.to_string()),
            None => {
                let thing = instr.strip_prefix("What color is ")?.strip_suffix('?')?;
                COLOR_FACTS.iter().find(|(t, _)| *t == thing).map(|(_, c)| c.to_string())
            }
        },
    }
}

#[test]
fn instruction_answers_follow_the_task_rules() {
    for ex in gen_instruction_dataset(1000, 2).unwrap().iter().chain(&gen_instruction_eval_set(400, 3).unwrap()) {
        assert_eq!(rule_answer(ex).as_deref(), Some(ex.output.as_str()), "{ex:?}");
    }
}

#[test]
fn every_family_appears_in_both_splits() {
    for set in [gen_instruction_dataset(400, 1).unwrap(), gen_instruction_eval_set(400, 1).unwrap()] {
        for f in TaskFamily::ALL {
            assert!(set.iter().any(|e| e.family() == Some(f)), "{f:?} missing");
        }
    }
}

fn mentioned_words(ex: &InstructionExample) -> Vec<String> {
    let mut text = ex.instruction.clone();
    if let Some(i) = &ex.input {
        text.push(' ');
        text.push_str(i);
    }
    text.split(|c: char| !c.is_ascii_alphabetic()).map(str::to_lowercase).collect()
}

#[test]
fn held_out_words_and_facts_never_reach_training() {
    let heldout_words: Vec<&str> = WORDS.iter().enumerate().filter(|(i, _)| i % 4 == 3).map(|(_, w)| *w).collect();
    let heldout_facts: Vec<&str> = COLOR_FACTS.iter().enumerate().filter(|(i, _)| i % 5 == 4).map(|(_, f)| f.0).collect();
    for ex in gen_instruction_dataset(3000, 6).unwrap() {
        let words = mentioned_words(&ex);
        for w in &heldout_words {
            assert!(!words.iter().any(|m| m == w), "{w} in {ex:?}");
        }
        for f in &heldout_facts {
            assert!(!ex.instruction.contains(f), "{f} in {ex:?}");
        }
    }
    for ex in gen_instruction_eval_set(500, 6).unwrap() {
        let words = mentioned_words(&ex);
        let uses_heldout =
            heldout_words.iter().any(|w| words.iter().any(|m| m == w)) || heldout_facts.iter().any(|f| ex.instruction.contains(f));
        assert!(uses_heldout, "{ex:?} is not held out");
    }
}

#[test]
fn no_training_text_mentions_images_or_the_eval_questions() {
    let instr = gen_instruction_dataset(3000, 1).unwrap();
    let corpus = gen_corpus(3000, 1).unwrap();
    let captions = gen_caption_dataset(500, 1).unwrap();
    let caption_prompt = tokenizer::decode(
        &format_prompt(&Template::Caption { response: None }, None, 256).unwrap().tokens,
    );
    let mut texts: Vec<String> = corpus;
    texts.push(caption_prompt);
    texts.extend(captions.iter().map(|c| c.caption.clone()));
    for e in &instr {
        texts.push(e.instruction.clone());
        texts.extend(e.input.clone());
        texts.push(e.output.clone());
    }
    for t in &texts {
        for a in Attribute::ALL {
            assert!(!t.contains(a.question()), "{t:?}");
        }
    }
    for e in &instr {
        assert!(!e.instruction.to_lowercase().contains("image"), "{e:?}");
    }
}

#[test]
fn corpus_never_uses_the_question_layout() {
    for line in gen_corpus(3000, 2).unwrap() {
        assert!(!line.contains("Q: ") && !line.contains("A: ") && !line.contains('\n'), "{line:?}");
    }
}

#[test]
fn jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let caps = gen_caption_dataset(40, 1).unwrap();
    let instr = gen_instruction_dataset(40, 1).unwrap();
    let (cp, ip) = (dir.path().join("c.jsonl"), dir.path().join("i.jsonl"));
    write_jsonl(&cp, &caps).unwrap();
    write_jsonl(&ip, &instr).unwrap();
    assert_eq!(read_jsonl::<CaptionExample>(&cp).unwrap(), caps);
    assert_eq!(read_jsonl::<InstructionExample>(&ip).unwrap(), instr);

    let first = std::fs::read_to_string(&cp).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    for key in ["shape", "color", "size", "caption"] {
        assert!(v.get(key).is_some(), "{key}");
    }

    std::fs::write(&cp, "{\"shape\":\"circle\"}\n").unwrap();
    let err = read_jsonl::<CaptionExample>(&cp).unwrap_err();
    assert!(err.to_string().contains(":1:"), "{err}");
}

#[test]
fn instruction_records_accept_missing_input() {
    let ex: InstructionExample = serde_json::from_str(r#"{"output":"tac","instruction":"Spell cat backwards"}"#).unwrap();
    assert_eq!(ex.input, None);
    assert_eq!(rule_answer(&ex).unwrap(), "tac");
}

#[test]
fn empty_outputs_are_rejected_for_training() {
    let ex = InstructionExample {
        instruction: "Repeat the word: x".into(),
        input: None,
        output: String::new(),
    };
    assert!(instruction_train_examples(&[ex], 128).is_err());
}

#[test]
fn oracle_answerer_is_perfect() {
    for a in Attribute::ALL {
        assert_eq!(eval_vqa(&OracleAnswerer, a, &vqa_eval_images(200, 2)).unwrap().accuracy, 1.0);
    }
    assert!(OracleAnswerer.answer(&Query::text("Spell cat backwards", None)).is_err());
}

/// Answers every text instruction by its task rule.
struct RuleAnswerer;

impl Answerer for RuleAnswerer {
    fn answer(&self, q: &Query<'_>) -> Result<String> {
        let ex = InstructionExample {
            instruction: q.instruction.into(),
            input: q.input.map(str::to_string),
            output: String::new(),
        };
        Ok(rule_answer(&ex).unwrap_or_default())
    }
}

#[test]
fn instruction_eval_scores_per_family() {
    let set = gen_instruction_eval_set(120, 4).unwrap();
    let s = eval_instructions(&RuleAnswerer, &set).unwrap();
    assert_eq!(s.accuracy, 1.0);
    assert_eq!(s.n, 120);
    assert_eq!(s.per_family.len(), 4);
    assert!(s.per_family.values().all(|&v| v == 1.0));
}

#[test]
fn eval_images_are_seeded() {
    assert_eq!(vqa_eval_images(200, 1), vqa_eval_images(200, 1));
    assert_ne!(vqa_eval_images(200, 1), vqa_eval_images(200, 2));
    assert!(exact_match("Red.", "red"));
}

proptest! {
    #[test]
    fn prompt_mask_marks_exactly_the_response(
        instruction in "[a-zA-Z ?]{1,30}",
        input in proptest::option::of("[a-z]{1,10}"),
        response in "[a-z ]{1,12}",
        context in proptest::option::of("[a-z ]{1,20}"),
    ) {
        let t = Template::Instruction { instruction: &instruction, input: input.as_deref(), response: Some(&response) };
        let f = format_prompt(&t, context.as_deref(), 512).unwrap();
        let r = tokenizer::encode(&response);
        prop_assert_eq!(f.loss_mask.len(), f.tokens.len());
        prop_assert_eq!(f.loss_mask.iter().sum::<f32>() as usize, r.len() + 1);
        prop_assert!(f.loss_mask[..f.prompt_len].iter().all(|&m| m == 0.0));
        prop_assert!(f.loss_mask[f.prompt_len..].iter().all(|&m| m == 1.0));
        prop_assert_eq!(&f.tokens[f.prompt_len..f.tokens.len() - 1], r.as_slice());
        prop_assert_eq!(*f.tokens.last().unwrap(), EOS);

        let text = tokenizer::decode(f.prompt_tokens());
        let expected_tail = match &input {
            Some(i) => format!("Q: {instruction}\nIn: {i}\nA: "),
            None => format!("Q: {instruction}\nA: "),
        };
        prop_assert!(text.ends_with(&expected_tail));

        let plain = format_prompt(&t, None, 512).unwrap();
        match (&context, &f.context_span) {
            (Some(c), Some(span)) => {
                prop_assert!(tokenizer::decode(&f.tokens[span.clone()]).contains(c.as_str()));
                let mut stripped = f.tokens.clone();
                stripped.drain(span.clone());
                prop_assert_eq!(stripped, plain.tokens);
            }
            (None, None) => prop_assert_eq!(&f, &plain),
            _ => prop_assert!(false, "context span mismatch"),
        }
    }

    #[test]
    fn caption_prompt_ends_in_the_caption(idx in 0usize..32) {
        let img = SynthImage::universe()[idx];
        let cap = img.caption();
        let f = format_prompt(&Template::Caption { response: Some(&cap) }, None, 256).unwrap();
        let text = tokenizer::decode(&f.tokens);
        prop_assert!(text.ends_with(&cap));
        prop_assert_eq!(tokenizer::decode(&f.tokens[f.prompt_len..f.tokens.len() - 1]), cap);
    }
}
