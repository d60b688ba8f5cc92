//! Expert context at inference time: an expert describes the image in text,
//! the description goes on a context line ahead of the instruction, and the
//! adapted model answers with the image features as usual.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Answerer, Attribute, ModelAnswerer, Query, SynthImage, VqaResult};

pub trait Expert {
    fn name(&self) -> &str;
    /// Text context for `image`. Must be deterministic for a fixed expert.
    fn describe(&self, image: &SynthImage) -> Result<String>;
}

/// Captions the image with the adapted model itself.
pub struct SelfCaptionExpert<'a> {
    model: ModelAnswerer<'a>,
}

impl<'a> SelfCaptionExpert<'a> {
    pub fn new(model: ModelAnswerer<'a>) -> Self {
        Self { model }
    }
}

impl Expert for SelfCaptionExpert<'_> {
    fn name(&self) -> &str {
        "self"
    }

    fn describe(&self, image: &SynthImage) -> Result<String> {
        caption_image(&self.model, image)
    }
}

/// Replays a fixed table of contexts, one per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleExpert {
    table: BTreeMap<SynthImage, String>,
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    #[serde(flatten)]
    image: SynthImage,
    context: String,
}

impl OracleExpert {
    pub fn new(table: BTreeMap<SynthImage, String>) -> Self {
        Self { table }
    }

    /// Ground-truth captions for all 32 images.
    pub fn true_captions() -> Self {
        Self::new(SynthImage::universe().into_iter().map(|i| (i, i.caption())).collect())
    }

    /// Captions whose color word is replaced by the next color in the
    /// palette, so every context contradicts its image.
    pub fn wrong_colors() -> Self {
        use crate::synthworld::COLORS;
        Self::new(
            SynthImage::universe()
                .into_iter()
                .map(|i| {
                    let wrong = COLORS[(i.color_id() + 1) % COLORS.len()];
                    (i, format!("a {} {wrong} {}", i.size_name(), i.shape_name()))
                })
                .collect(),
        )
    }

    pub fn covers_universe(&self) -> bool {
        SynthImage::universe().iter().all(|i| self.table.contains_key(i))
    }

    /// Load from a JSON array of `{"shape", "color", "size", "context"}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<OracleRecord> = serde_json::from_str(&text)?;
        Ok(Self::new(records.into_iter().map(|r| (r.image, r.context)).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<OracleRecord> = self
            .table
            .iter()
            .map(|(i, c)| OracleRecord {
                image: *i,
                context: c.clone(),
            })
            .collect();
        std::fs::write(path, serde_json::to_vec_pretty(&records)?).map_err(|e| Error::io(path, e))
    }
}

impl Expert for OracleExpert {
    fn name(&self) -> &str {
        "oracle"
    }

    /// Images missing from the table get an empty context.
    fn describe(&self, image: &SynthImage) -> Result<String> {
        Ok(self.table.get(image).cloned().unwrap_or_default())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAnswer {
    pub response: String,
    /// The context that was placed in the prompt.
    pub context: Option<String>,
    /// Set when an expert was asked but produced nothing usable, so the
    /// answer came from the no-context path.
    pub fell_back: bool,
}

/// Answer `instruction` about `image`, with the expert's description on a
/// context line when an expert is given.
pub fn answer_with_expert(
    model: &ModelAnswerer<'_>,
    image: &SynthImage,
    instruction: &str,
    expert: Option<&dyn Expert>,
) -> Result<ExpertAnswer> {
    if instruction.trim().is_empty() {
        return Err(Error::Dataset("instruction must not be empty".into()));
    }
    let context = match expert {
        None => None,
        Some(e) => match e.describe(image) {
            Ok(c) if !c.trim().is_empty() => Some(c),
            _ => {
                let response = model.answer(&Query::visual(instruction, *image))?;
                return Ok(ExpertAnswer {
                    response,
                    context: None,
                    fell_back: true,
                });
            }
        },
    };
    let query = Query {
        context: context.as_deref(),
        ..Query::visual(instruction, *image)
    };
    Ok(ExpertAnswer {
        response: model.answer(&query)?,
        context,
        fell_back: false,
    })
}

/// Greedy caption of `image`.
pub fn caption_image(model: &ModelAnswerer<'_>, image: &SynthImage) -> Result<String> {
    model.caption(image)
}

/// The held-out attribute question over `images`, answered through
/// [`answer_with_expert`].
pub fn eval_vqa_with_expert(
    model: &ModelAnswerer<'_>,
    attribute: Attribute,
    images: &[SynthImage],
    expert: Option<&dyn Expert>,
) -> Result<VqaResult> {
    let mut predictions = Vec::with_capacity(images.len());
    let mut correct = 0usize;
    for img in images {
        let a = answer_with_expert(model, img, attribute.question(), expert)?;
        correct += crate::synthworld::exact_match(&a.response, img.attribute(attribute)) as usize;
        predictions.push(a.response);
    }
    Ok(VqaResult {
        attribute,
        accuracy: if images.is_empty() { 0.0 } else { correct as f64 / images.len() as f64 },
        images: images.to_vec(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_tables_cover_the_universe() {
        assert!(OracleExpert::true_captions().covers_universe());
        let wrong = OracleExpert::wrong_colors();
        assert!(wrong.covers_universe());
        for img in SynthImage::universe() {
            let c = wrong.describe(&img).unwrap();
            assert!(!c.contains(img.color_name()), "{c} for {img}");
            assert!(c.contains(img.shape_name()));
        }
    }

    #[test]
    fn oracle_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        let e = OracleExpert::wrong_colors();
        e.save(&path).unwrap();
        assert_eq!(OracleExpert::load(&path).unwrap(), e);
    }

    #[test]
    fn missing_entries_describe_as_empty() {
        let e = OracleExpert::new(BTreeMap::new());
        assert_eq!(e.describe(&SynthImage::universe()[0]).unwrap(), "");
        assert!(!e.covers_universe());
    }
}
