//! Append-only message log shared by the protocol, the privacy layer and
//! the cost accountant.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per plaintext scalar on the wire.
pub const ELEMENT_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Embedding,
    Ciphertext,
    Hidden,
    Gradient,
    Psi,
    /// Plaintext released by the decryptor.
    Decrypt,
    /// Never produced by the protocol; present so the audit can flag injected leaks.
    RawId,
    Label,
    RawFeature,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Embedding => "embedding",
            MessageKind::Ciphertext => "ciphertext",
            MessageKind::Hidden => "hidden",
            MessageKind::Gradient => "gradient",
            MessageKind::Psi => "psi",
            MessageKind::Decrypt => "decrypt",
            MessageKind::RawId => "raw_id",
            MessageKind::Label => "label",
            MessageKind::RawFeature => "raw_feature",
        }
    }
}

pub const SERVER: &str = "server";
pub const DECRYPTOR: &str = "decryptor";

pub fn party(i: usize) -> String {
    format!("p{i}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: u64,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub elements: u64,
    pub bytes: u64,
    pub encrypted: bool,
    /// Hex digests carried by PSI messages; not exported.
    #[serde(skip)]
    pub payload: Option<String>,
}

impl MessageRecord {
    /// A plaintext message of `elements` 8-byte scalars.
    pub fn plain(round: u64, from: &str, to: &str, kind: MessageKind, elements: u64) -> Self {
        MessageRecord {
            round,
            from: from.to_string(),
            to: to.to_string(),
            kind,
            elements,
            bytes: elements * ELEMENT_BYTES,
            encrypted: false,
            payload: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    records: Vec<MessageRecord>,
}

/// The messages of a single round.
pub type RoundTranscript = Transcript;

impl Transcript {
    pub fn new() -> Self {
        Transcript::default()
    }

    pub fn push(&mut self, record: MessageRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: &Transcript) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_of(&self, kind: MessageKind) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.bytes).sum()
    }

    pub fn round(&self, round: u64) -> Transcript {
        Transcript {
            records: self.records.iter().filter(|r| r.round == round).cloned().collect(),
        }
    }

    pub fn rounds(&self) -> Vec<u64> {
        let mut r: Vec<u64> = self.records.iter().map(|r| r.round).collect();
        r.dedup();
        r.sort_unstable();
        r.dedup();
        r
    }

    /// CSV with columns `round,from,to,kind,elements,bytes,encrypted`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        if self.records.is_empty() {
            w.write_record(["round", "from", "to", "kind", "elements", "bytes", "encrypted"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let records = r.deserialize().collect::<std::result::Result<Vec<MessageRecord>, _>>()?;
        Ok(Transcript { records })
    }
}
