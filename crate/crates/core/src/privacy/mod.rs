//! Private set intersection, additively homomorphic encryption and the
//! transcript audit.

mod audit;
mod fixed;
mod paillier;
mod psi;
mod secure;

pub use audit::{transcript_audit, AuditReport, Finding};
pub use fixed::{FixedPoint, DEFAULT_SCALE_BITS};
pub use paillier::{
    element_rng, is_probable_prime, keygen, random_plaintext, Ciphertext, KeyPair, PrivateKey, PublicKey,
    SUPPORTED_BITS, TEST_BITS,
};
pub use psi::{psi_align, psi_digest, psi_salt, PsiDigest, DIGEST_BYTES};
pub use secure::{plaintext_bytes, SecureAggregator};
