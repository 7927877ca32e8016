//! Conditioning inputs: captions, class labels, tokenization and the text and
//! class embedders consumed by the denoiser.

mod text_encoder;
mod tokenizer;

pub use text_encoder::{position_ids, TextContext, TextEmbedding, TextEncoder, TextEncoderConfig};
pub use tokenizer::{TokenSequence, Tokenizer, MAX_TOKENS, SEGMENT_LEN};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Embedding, ParamStore};

/// Probabilities at or above this are `High`.
pub const LEVEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(if p >= LEVEL_THRESHOLD { Level::High } else { Level::Low })
    }

    fn capitalized(self) -> &'static str {
        match self {
            Level::Low => "Low",
            Level::High => "High",
        }
    }

    fn lowercase(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::High => "high",
        }
    }
}

/// Text prompt of one patch: `"{Level} tumor; {level} til; {summary}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tumor_level: Level,
    pub til_level: Level,
    pub summary: String,
    pub rendered: String,
}

pub fn build_caption(tumor_prob: f64, til_prob: f64, summary: &str) -> Result<Caption> {
    let tumor_level = Level::from_prob(tumor_prob)?;
    let til_level = Level::from_prob(til_prob)?;
    let rendered = format!("{} tumor; {} til; {summary}", tumor_level.capitalized(), til_level.lowercase());
    Ok(Caption { tumor_level, til_level, summary: summary.to_string(), rendered })
}

/// Recovers the two levels from a rendered caption.
pub fn parse_caption_levels(rendered: &str) -> Option<(Level, Level)> {
    let mut parts = rendered.splitn(3, "; ");
    let tumor = match parts.next()? {
        "Low tumor" => Level::Low,
        "High tumor" => Level::High,
        _ => return None,
    };
    let til = match parts.next()? {
        "low til" => Level::Low,
        "high til" => Level::High,
        _ => return None,
    };
    Some((tumor, til))
}

/// Baseline class id: `2·[tumor high] + [til high]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassLabel(u8);

pub const NUM_CLASSES: usize = 4;
/// Embedding row reserved for the unconditional branch.
pub const NULL_CLASS: u32 = NUM_CLASSES as u32;

impl ClassLabel {
    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < NUM_CLASSES {
            Ok(Self(id))
        } else {
            Err(Error::invalid(format!("class id {id} outside 0..{NUM_CLASSES}")))
        }
    }

    pub fn from_levels(tumor: Level, til: Level) -> Self {
        Self(2 * (tumor == Level::High) as u8 + (til == Level::High) as u8)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn levels(self) -> (Level, Level) {
        let level = |high: bool| if high { Level::High } else { Level::Low };
        (level(self.0 >= 2), level(self.0 % 2 == 1))
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Self::new(id)
    }
}

impl From<ClassLabel> for u8 {
    fn from(c: ClassLabel) -> u8 {
        c.0
    }
}

pub fn class_label(tumor_prob: f64, til_prob: f64) -> Result<ClassLabel> {
    Ok(ClassLabel::from_levels(Level::from_prob(tumor_prob)?, Level::from_prob(til_prob)?))
}

/// Learned table of four class rows plus the reserved null row.
#[derive(Clone)]
pub struct ClassEmbedder {
    table: Embedding,
}

impl ClassEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { table: Embedding::new(store, name, NUM_CLASSES + 1, dim, 1.0)? })
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn embed_class(&self, label: ClassLabel) -> Result<Tensor> {
        Ok(self.table.lookup(&[label.id() as u32])?.squeeze(0)?)
    }

    pub fn embed_null(&self) -> Result<Tensor> {
        Ok(self.table.lookup(&[NULL_CLASS])?.squeeze(0)?)
    }

    /// Length-one context `(B, 1, dim)` for ids in `0..=NULL_CLASS`.
    pub fn context(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(self.table.lookup(ids)?.unsqueeze(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    #[test]
    fn template_and_tie_rule() {
        assert_eq!(build_caption(0.9, 0.2, "S").unwrap().rendered, "High tumor; low til; S");
        assert_eq!(build_caption(0.2, 0.9, "S").unwrap().rendered, "Low tumor; high til; S");
        assert_eq!(build_caption(0.5, 0.5, "S").unwrap().rendered, "High tumor; high til; S");
        assert!(build_caption(1.2, 0.0, "S").is_err());
        assert!(build_caption(0.1, f64::NAN, "S").is_err());
    }

    #[test]
    fn class_mapping() {
        let id = |a, b| class_label(a, b).unwrap().id();
        assert_eq!((id(0.2, 0.2), id(0.2, 0.9), id(0.9, 0.2), id(0.9, 0.9)), (0, 1, 2, 3));
        assert!(class_label(-0.1, 0.3).is_err());
        assert!(ClassLabel::new(4).is_err());
        let json = serde_json::to_string(&ClassLabel::new(3).unwrap()).unwrap();
        assert_eq!(json, "3");
        assert!(serde_json::from_str::<ClassLabel>("7").is_err());
    }

    #[test]
    fn class_rows_are_deterministic_and_distinct() {
        let mut store = ParamStore::new(0, DType::F32);
        let emb = ClassEmbedder::new(&mut store, "class", 8).unwrap();
        let row = |i| crate::nn::to_f64_vec(&emb.context(&[i]).unwrap()).unwrap();
        assert_eq!(row(2), row(2));
        for a in 0..=NULL_CLASS {
            for b in 0..a {
                assert_ne!(row(a), row(b));
            }
        }
        let null = crate::nn::to_f64_vec(&emb.embed_null().unwrap()).unwrap();
        assert_eq!(null, row(NULL_CLASS));
    }

    proptest! {
        #[test]
        fn caption_levels_agree_with_class(tumor in 0.0f64..=1.0, til in 0.0f64..=1.0, summary in "[a-z ;]{0,30}") {
            let caption = build_caption(tumor, til, &summary).unwrap();
            let (a, b) = parse_caption_levels(&caption.rendered).unwrap();
            prop_assert_eq!(ClassLabel::from_levels(a, b), class_label(tumor, til).unwrap());
            prop_assert_eq!(class_label(tumor, til).unwrap().levels(), (a, b));
        }

        #[test]
        fn rendering_is_injective_in_levels(summary in "[a-z ]{0,20}") {
            let probs = [(0.1, 0.1), (0.1, 0.9), (0.9, 0.1), (0.9, 0.9)];
            let rendered: std::collections::HashSet<String> =
                probs.iter().map(|&(a, b)| build_caption(a, b, &summary).unwrap().rendered).collect();
            prop_assert_eq!(rendered.len(), 4);
        }
    }
}
