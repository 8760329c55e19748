use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TextKind, TextRecord};
use crate::error::{Error, Result};
use crate::io_util;

/// One labelled (member, job) pair with the texts as they were at event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub member_id: u64,
    pub job_id: u64,
    pub label: u8,
    pub event_time: i64,
    pub profile_text: String,
    pub resume_text: String,
    pub job_text: String,
}

impl TrainingPair {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn profile(&self) -> TextRecord {
        self.record(self.member_id, TextKind::MemberProfile, &self.profile_text)
    }

    pub fn resume(&self) -> TextRecord {
        self.record(self.member_id, TextKind::MemberResume, &self.resume_text)
    }

    pub fn document(&self) -> TextRecord {
        self.record(self.job_id, TextKind::JobDescription, &self.job_text)
    }

    fn record(&self, id: u64, kind: TextKind, text: &str) -> TextRecord {
        TextRecord {
            entity_id: id,
            kind,
            text: text.to_owned(),
            snapshot_time: Some(self.event_time),
        }
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let text = io_util::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainingPair =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if pair.label > 1 {
            return Err(Error::parse(path, i + 1, "label must be 0 or 1"));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let mut buf = String::new();
    for p in pairs {
        buf.push_str(&serde_json::to_string(p)?);
        buf.push('\n');
    }
    io_util::write_atomic(path, buf.as_bytes())
}
