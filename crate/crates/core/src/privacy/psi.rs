//! Salted-hash private set intersection.
//!
//! Participants share a fresh salt the server never sees and upload
//! `SHA-256(salt || id)`. The server intersects digests and returns the
//! common ones; each participant maps them back to its own ids.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::init_rng;
use crate::transcript::{party, MessageKind, MessageRecord, Transcript, SERVER};

pub type PsiDigest = [u8; 32];

pub const DIGEST_BYTES: u64 = 32;

pub fn psi_salt(seed: u64) -> [u8; 32] {
    let mut salt = [0u8; 32];
    init_rng(seed, &[0x5a17]).fill_bytes(&mut salt);
    salt
}

pub fn psi_digest(salt: &[u8], id: &str) -> PsiDigest {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(id.as_bytes());
    h.finalize().into()
}

fn hex_list<'a>(ds: impl Iterator<Item = &'a PsiDigest>) -> String {
    ds.map(hex::encode).collect::<Vec<_>>().join(",")
}

/// Ids common to every participant, ordered by digest.
pub fn psi_align(
    id_sets: &[Vec<String>],
    salt: &[u8],
    round: u64,
    transcript: &mut Transcript,
) -> Result<Vec<String>> {
    if id_sets.len() < 2 {
        return Err(Error::Input(format!(
            "private set intersection needs at least 2 participants, got {}",
            id_sets.len()
        )));
    }
    let mut uploads: Vec<HashMap<PsiDigest, &str>> = Vec::with_capacity(id_sets.len());
    for (i, ids) in id_sets.iter().enumerate() {
        let mut seen = HashSet::with_capacity(ids.len());
        let mut map = HashMap::with_capacity(ids.len());
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Input(format!("participant {i} lists a duplicate id")));
            }
            map.insert(psi_digest(salt, id), id.as_str());
        }
        let sorted: BTreeSet<&PsiDigest> = map.keys().collect();
        transcript.push(MessageRecord {
            bytes: DIGEST_BYTES * map.len() as u64,
            payload: Some(hex_list(sorted.into_iter())),
            ..MessageRecord::plain(round, &party(i), SERVER, MessageKind::Psi, map.len() as u64)
        });
        uploads.push(map);
    }

    // Server side: digests only.
    let mut common: BTreeSet<PsiDigest> = uploads[0].keys().copied().collect();
    for up in &uploads[1..] {
        common.retain(|d| up.contains_key(d));
    }
    for i in 0..uploads.len() {
        transcript.push(MessageRecord {
            bytes: DIGEST_BYTES * common.len() as u64,
            payload: Some(hex_list(common.iter())),
            ..MessageRecord::plain(round, SERVER, &party(i), MessageKind::Psi, common.len() as u64)
        });
    }
    if common.is_empty() {
        return Err(Error::Protocol("participants share no ids; session aborted".into()));
    }
    Ok(common.iter().map(|d| uploads[0][d].to_string()).collect())
}
