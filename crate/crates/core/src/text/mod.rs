//! Bi-encoder over job postings and member profiles/resumes.
//!
//! One shared encoder embeds every text kind; the kind is signalled by a
//! literal prefix prepended before tokenization.

mod data;
mod loss;
mod model;
mod tokenize;
mod train;

pub use data::{read_pairs, write_pairs, TrainingPair};
pub use loss::{compute_loss, mine_semi_hard, EmbeddedBatch, LossConfig, LossParts};
pub use model::{BiEncoder, EncoderConfig};
pub use tokenize::Tokenizer;
pub use train::{
    balance_pairs, evaluate_auc, loss_graph, split_validation, train, train_with_validation, AucCheck,
    EncoderTrainConfig, TrainMode, TrainOutcome,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    JobDescription,
    MemberProfile,
    MemberResume,
}

/// Entity ids must fit below this bound so the kind can share a 64-bit key.
pub const MAX_ENTITY_ID: u64 = (1 << 56) - 1;

impl TextKind {
    pub const ALL: [TextKind; 3] = [
        TextKind::JobDescription,
        TextKind::MemberProfile,
        TextKind::MemberResume,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            TextKind::JobDescription => "document: ",
            TextKind::MemberProfile => "profile: ",
            TextKind::MemberResume => "resume: ",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TextKind::JobDescription => "job_description",
            TextKind::MemberProfile => "member_profile",
            TextKind::MemberResume => "member_resume",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TextKind::JobDescription => 1,
            TextKind::MemberProfile => 2,
            TextKind::MemberResume => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Store key combining kind and entity id. A member's profile and resume
    /// share an entity id, so the id alone is not a unique key.
    pub fn key(self, entity_id: u64) -> crate::Result<u64> {
        if entity_id > MAX_ENTITY_ID {
            return Err(crate::Error::invalid(format!(
                "entity id {entity_id} exceeds {MAX_ENTITY_ID}"
            )));
        }
        Ok(((self.code() as u64) << 56) | entity_id)
    }

    pub fn split_key(key: u64) -> Option<(TextKind, u64)> {
        Some((Self::from_code((key >> 56) as u8)?, key & MAX_ENTITY_ID))
    }
}

impl std::str::FromStr for TextKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::Error::invalid(format!("unknown text kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub entity_id: u64,
    pub kind: TextKind,
    pub text: String,
    #[serde(default)]
    pub snapshot_time: Option<i64>,
}

impl TextRecord {
    pub fn new(entity_id: u64, kind: TextKind, text: impl Into<String>) -> Self {
        Self {
            entity_id,
            kind,
            text: text.into(),
            snapshot_time: None,
        }
    }

    /// The exact string handed to the tokenizer.
    pub fn prompt(&self) -> String {
        format!("{}{}", self.kind.prefix(), self.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip() {
        for kind in TextKind::ALL {
            let k = kind.key(12345).unwrap();
            assert_eq!(TextKind::split_key(k), Some((kind, 12345)));
        }
        assert_ne!(
            TextKind::MemberProfile.key(9).unwrap(),
            TextKind::MemberResume.key(9).unwrap()
        );
        assert!(TextKind::JobDescription.key(1 << 56).is_err());
    }

    #[test]
    fn kind_names_parse() {
        for kind in TextKind::ALL {
            assert_eq!(kind.as_str().parse::<TextKind>().unwrap(), kind);
        }
        assert!("job".parse::<TextKind>().is_err());
    }
}
