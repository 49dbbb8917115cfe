//! Additively homomorphic aggregation of participant embeddings.
//!
//! Participants encrypt fixed-point elements under the decryptor's public
//! key. The server combines ciphertexts and forwards only the combination,
//! so the decryptor sees one aggregate per round.

use num_bigint::BigUint;

use super::fixed::FixedPoint;
use super::paillier::{element_rng, keygen, Ciphertext, KeyPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transcript::{party, MessageKind, MessageRecord, Transcript, DECRYPTOR, SERVER, ELEMENT_BYTES};

#[derive(Clone, Debug)]
pub struct SecureAggregator {
    pub keys: KeyPair,
    pub fixed: FixedPoint,
    seed: u64,
    counter: u64,
}

fn wire(cs: &[Ciphertext]) -> u64 {
    cs.iter().map(Ciphertext::wire_bytes).sum()
}

fn cipher_record(round: u64, from: &str, to: &str, cs: &[Ciphertext]) -> MessageRecord {
    MessageRecord {
        bytes: wire(cs),
        encrypted: true,
        ..MessageRecord::plain(round, from, to, MessageKind::Ciphertext, cs.len() as u64)
    }
}

fn same_shape(inputs: &[Tensor]) -> Result<&[usize]> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Input("secure aggregation needs at least one input".into()))?;
    for t in &inputs[1..] {
        if t.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "secure_sum",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(first.shape())
}

impl SecureAggregator {
    pub fn new(bits: u64, seed: u64) -> Result<Self> {
        Ok(Self::from_keys(keygen(bits, seed)?, seed))
    }

    pub fn from_keys(keys: KeyPair, seed: u64) -> Self {
        SecureAggregator {
            keys,
            fixed: FixedPoint::default(),
            seed,
            counter: 0,
        }
    }

    fn encrypt_tensor(&mut self, t: &Tensor) -> Result<Vec<Ciphertext>> {
        let pk = &self.keys.public;
        let encoded = self.fixed.encode_all(t.data(), &pk.n)?;
        let base = self.counter;
        self.counter += encoded.len() as u64;
        encoded
            .iter()
            .enumerate()
            .map(|(k, m)| pk.encrypt(m, &mut element_rng(self.seed, base + k as u64)))
            .collect()
    }

    fn combine(&self, parts: &[Vec<Ciphertext>]) -> Result<Vec<Ciphertext>> {
        let pk = &self.keys.public;
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            for (a, c) in acc.iter_mut().zip(p) {
                *a = pk.add(a, c)?;
            }
        }
        Ok(acc)
    }

    fn decrypt_tensor(&self, cs: &[Ciphertext], shape: &[usize], depth: u32) -> Result<Tensor> {
        let n = &self.keys.public.n;
        let data = cs
            .iter()
            .map(|c| Ok(self.fixed.decode(&self.keys.decrypt(c)?, n, depth)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape.to_vec(), data)
    }

    fn upload(&mut self, inputs: &[Tensor], round: u64, transcript: &mut Transcript) -> Result<Vec<Vec<Ciphertext>>> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let cs = self
                    .encrypt_tensor(t)
                    .map_err(|e| Error::Range(format!("participant {i}: {e}")))?;
                transcript.push(cipher_record(round, &party(i), SERVER, &cs));
                Ok(cs)
            })
            .collect()
    }

    fn release(&self, agg: &[Ciphertext], shape: &[usize], depth: u32, round: u64, transcript: &mut Transcript) -> Result<Tensor> {
        transcript.push(cipher_record(round, SERVER, DECRYPTOR, agg));
        let out = self.decrypt_tensor(agg, shape, depth)?;
        transcript.push(MessageRecord::plain(round, DECRYPTOR, SERVER, MessageKind::Decrypt, agg.len() as u64));
        Ok(out)
    }

    /// Element-wise `Σ_i inputs[i]`; only the sum is decrypted.
    pub fn secure_sum(&mut self, inputs: &[Tensor], round: u64, transcript: &mut Transcript) -> Result<Tensor> {
        let shape = same_shape(inputs)?.to_vec();
        let parts = self.upload(inputs, round, transcript)?;
        let agg = self.combine(&parts)?;
        self.release(&agg, &shape, 1, round, transcript)
    }

    /// `Σ_i inputs[i] ⊙ weights[i]`, each weight a column vector broadcast over rows.
    /// The server raises ciphertexts to fixed-point weights before combining.
    pub fn secure_weighted_sum(
        &mut self,
        inputs: &[Tensor],
        weights: &[Tensor],
        round: u64,
        transcript: &mut Transcript,
    ) -> Result<Tensor> {
        let shape = same_shape(inputs)?.to_vec();
        if weights.len() != inputs.len() {
            return Err(Error::Contract(format!("{} weights for {} inputs", weights.len(), inputs.len())));
        }
        let cols = *shape.last().unwrap_or(&1);
        for w in weights {
            if w.numel() != cols {
                return Err(Error::Dimension {
                    op: "secure_weighted_sum",
                    lhs: shape.clone(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        let parts = self.upload(inputs, round, transcript)?;
        let pk = &self.keys.public;
        let mut scaled = Vec::with_capacity(parts.len());
        for (cs, w) in parts.iter().zip(weights) {
            let enc: Vec<BigUint> = self.fixed.encode_all(w.data(), &pk.n)?;
            scaled.push(
                cs.iter()
                    .enumerate()
                    .map(|(k, c)| pk.mul_plain(c, &enc[k % cols]))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let agg = self.combine(&scaled)?;
        self.release(&agg, &shape, 2, round, transcript)
    }

    /// Fallback for non-additive strategies: every input is decrypted on its own.
    /// The audit reports the extra decryptions.
    pub fn secure_blocks(&mut self, inputs: &[Tensor], round: u64, transcript: &mut Transcript) -> Result<Vec<Tensor>> {
        let parts = self.upload(inputs, round, transcript)?;
        parts
            .iter()
            .zip(inputs)
            .map(|(cs, t)| self.release(cs, t.shape(), 1, round, transcript))
            .collect()
    }
}

/// Bytes a plaintext tensor would take on the wire.
pub fn plaintext_bytes(t: &Tensor) -> u64 {
    t.numel() as u64 * ELEMENT_BYTES
}
