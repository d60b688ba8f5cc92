//! Expert context at inference: composition, fallback, determinism and the
//! evaluation wrapper, on a small randomly initialized model.

use std::collections::BTreeMap;

use padapt::adapter::{AdaptedModel, AdapterConfig, AdapterState, FusionMode};
use padapt::backbone::{tokenizer, BackboneConfig, BackboneWeights};
use padapt::experts::{
    answer_with_expert, caption_image, eval_vqa_with_expert, Expert, OracleExpert, SelfCaptionExpert,
};
use padapt::synthworld::{
    eval_vqa, format_prompt, vqa_eval_images, Answerer, Attribute, ModelAnswerer, Query, SynthImage, Template,
    VisualEncoder, CONTEXT_PREFIX,
};
use padapt::{Error, Result};

fn small_bb() -> BackboneConfig {
    BackboneConfig {
        d_model: 32,
        n_layers: 3,
        n_heads: 2,
        ffn_hidden: 48,
        max_seq_len: 160,
        ..BackboneConfig::desk()
    }
}

fn small_ad() -> AdapterConfig {
    AdapterConfig {
        prompt_layers: 2,
        prompt_len: 3,
        fusion_layers: 1,
        visual_len: 2,
        feat_dim: 16,
    }
}

fn setup() -> (BackboneWeights, VisualEncoder) {
    let mut w = BackboneWeights::init(&small_bb(), 21).unwrap();
    w.set_frozen(true);
    (w, VisualEncoder::new(16, 7).unwrap())
}

/// An adapter with every gate open, so prompts and visual tokens matter.
fn opened(w: &BackboneWeights) -> AdapterState {
    let mut s = AdapterState::new(w, &small_ad(), 3).unwrap();
    for (name, t) in s.tensors_mut() {
        if name.ends_with("gate") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.7);
        }
    }
    s
}

fn short(model: ModelAnswerer<'_>) -> ModelAnswerer<'_> {
    ModelAnswerer { max_new: 6, ..model }
}

struct Failing;

impl Expert for Failing {
    fn name(&self) -> &str {
        "failing"
    }
    fn describe(&self, _: &SynthImage) -> Result<String> {
        Err(Error::Dataset("no description".into()))
    }
}

#[test]
fn no_expert_is_the_plain_visual_answer() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    for img in vqa_eval_images(5, 1) {
        let q = Attribute::Color.question();
        let a = answer_with_expert(&m, &img, q, None).unwrap();
        assert_eq!(a.response, m.answer(&Query::visual(q, img)).unwrap());
        assert_eq!(a.context, None);
        assert!(!a.fell_back);
    }
}

#[test]
fn context_goes_on_one_line_before_the_instruction() {
    let instruction = Attribute::Shape.question();
    let ctx = "a small red star";
    let t = Template::VisualInstruction {
        instruction,
        response: None,
    };
    let f = format_prompt(&t, Some(ctx), 256).unwrap();
    let text = tokenizer::decode(&f.tokens);
    let line = format!("{CONTEXT_PREFIX}{ctx}]\n");
    assert!(text.starts_with(&line), "{text:?}");
    assert!(text.ends_with(&format!("Q: {instruction}\nA: ")));
    assert_eq!(tokenizer::decode(&f.tokens[f.context_span.unwrap()]), line);
}

#[test]
fn oracle_context_is_used_verbatim() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let img = SynthImage::from_names("square", "blue", "large").unwrap();
    let oracle = OracleExpert::true_captions();
    let a = answer_with_expert(&m, &img, Attribute::Color.question(), Some(&oracle)).unwrap();
    assert_eq!(a.context.as_deref(), Some("a large blue square"));
    assert!(!a.fell_back);
    let q = Query {
        context: Some("a large blue square"),
        ..Query::visual(Attribute::Color.question(), img)
    };
    assert_eq!(a.response, m.answer(&q).unwrap());
}

#[test]
fn empty_or_failing_experts_fall_back_and_say_so() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let img = SynthImage::universe()[3];
    let q = Attribute::Color.question();
    let plain = answer_with_expert(&m, &img, q, None).unwrap();
    let empty = OracleExpert::new(BTreeMap::new());
    for expert in [&empty as &dyn Expert, &Failing] {
        let a = answer_with_expert(&m, &img, q, Some(expert)).unwrap();
        assert!(a.fell_back, "{}", expert.name());
        assert_eq!(a.context, None);
        assert_eq!(a.response, plain.response);
    }
    assert!(answer_with_expert(&m, &img, "  ", None).is_err());
}

#[test]
fn expert_answers_are_deterministic() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let images = vqa_eval_images(6, 2);
    let expert = SelfCaptionExpert::new(m);
    let a = eval_vqa_with_expert(&m, Attribute::Color, &images, Some(&expert)).unwrap();
    let b = eval_vqa_with_expert(&m, Attribute::Color, &images, Some(&expert)).unwrap();
    assert_eq!(a, b);
    assert_eq!(expert.describe(&images[0]).unwrap(), caption_image(&m, &images[0]).unwrap());
}

#[test]
fn no_expert_evaluation_matches_the_plain_harness() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let images = vqa_eval_images(6, 3);
    let with = eval_vqa_with_expert(&m, Attribute::Size, &images, None).unwrap();
    let plain = eval_vqa(&m, Attribute::Size, &images).unwrap();
    assert_eq!(with, plain);
}

#[test]
fn wrong_context_changes_some_answers_of_a_context_sensitive_model() {
    let (w, enc) = setup();
    let ad = opened(&w);
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let images = SynthImage::universe();
    let truth = eval_vqa_with_expert(&m, Attribute::Color, &images, Some(&OracleExpert::true_captions())).unwrap();
    let wrong = eval_vqa_with_expert(&m, Attribute::Color, &images, Some(&OracleExpert::wrong_colors())).unwrap();
    assert!(wrong.disagreement(&truth) > 0.0);
}

#[test]
fn fresh_adapter_captions_ignore_the_image() {
    let (w, enc) = setup();
    let ad = AdapterState::new(&w, &small_ad(), 4).unwrap();
    let m = short(ModelAnswerer::new(AdaptedModel::new(&w, &ad, FusionMode::Early), &enc));
    let first = caption_image(&m, &SynthImage::universe()[0]).unwrap();
    for img in SynthImage::universe() {
        assert_eq!(caption_image(&m, &img).unwrap(), first, "{img}");
    }
}

#[test]
fn oracle_file_drives_the_expert() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ocr.json");
    std::fs::write(
        &path,
        r#"[{"shape":"circle","color":"red","size":"small","context":"the sign reads STOP"}]"#,
    )
    .unwrap();
    let e = OracleExpert::load(&path).unwrap();
    let img = SynthImage::from_names("circle", "red", "small").unwrap();
    assert_eq!(e.describe(&img).unwrap(), "the sign reads STOP");
    assert!(!e.covers_universe());
    assert!(OracleExpert::load(&dir.path().join("missing.json")).is_err());
}
