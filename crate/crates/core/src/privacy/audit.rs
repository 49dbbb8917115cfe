//! Post-hoc privacy checks over a session transcript.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::transcript::{MessageKind, Transcript};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub round: u64,
    /// Index into the transcript; `None` for round-level findings.
    pub record: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Flags plaintext embeddings, raw identifiers, labels or features on the
/// wire, and rounds where more than one aggregate was decrypted.
pub fn transcript_audit(transcript: &Transcript) -> AuditReport {
    let mut findings = Vec::new();
    let mut decrypts: BTreeMap<u64, usize> = BTreeMap::new();
    for (k, r) in transcript.records().iter().enumerate() {
        let what = match r.kind {
            MessageKind::Embedding if !r.encrypted => Some("plaintext embedding"),
            MessageKind::RawId => Some("raw identifiers"),
            MessageKind::Label => Some("labels"),
            MessageKind::RawFeature => Some("raw features"),
            MessageKind::Decrypt => {
                *decrypts.entry(r.round).or_default() += 1;
                None
            }
            _ => None,
        };
        if let Some(what) = what {
            findings.push(Finding {
                round: r.round,
                record: Some(k),
                message: format!("{what} sent from {} to {}", r.from, r.to),
            });
        }
    }
    for (round, n) in decrypts {
        if n > 1 {
            findings.push(Finding {
                round,
                record: None,
                message: format!("{n} decryptions in one round; only the aggregate may be decrypted"),
            });
        }
    }
    AuditReport { findings }
}
