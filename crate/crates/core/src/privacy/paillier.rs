//! Paillier additively homomorphic encryption over arbitrary-precision integers.
//!
//! Simulation quality only: no constant-time arithmetic, no side-channel care.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mix_seed;

pub const SUPPORTED_BITS: [u64; 3] = [512, 1024, 2048];
pub const TEST_BITS: u64 = 512;
const PRIME_ATTEMPTS: usize = 100_000;
const MILLER_RABIN_ROUNDS: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub n_squared: BigUint,
    /// Generator `n + 1`.
    pub g: BigUint,
    pub bits: u64,
    pub key_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivateKey {
    pub lambda: BigUint,
    pub mu: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub value: BigUint,
    pub key_id: u64,
}

impl Ciphertext {
    /// Length-prefixed big-endian encoding size.
    pub fn wire_bytes(&self) -> u64 {
        4 + self.value.to_bytes_be().len() as u64
    }
}

fn random_below(rng: &mut impl RngCore, bound: &BigUint) -> BigUint {
    let len = bound.to_bytes_be().len() + 8;
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    BigUint::from_bytes_be(&buf) % bound
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller-Rabin with random bases.
pub fn is_probable_prime(n: &BigUint, rng: &mut impl RngCore) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let mut d = n_minus_1.clone();
    let mut r = 0u32;
    while d.is_even() {
        d >>= 1;
        r += 1;
    }
    let span = n - BigUint::from(3u32);
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(rng, &span) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..r {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A prime of exactly `bits` bits with the top two bits set.
fn random_prime(bits: u64, rng: &mut impl RngCore) -> Result<BigUint> {
    let bytes = bits.div_ceil(8) as usize;
    for _ in 0..PRIME_ATTEMPTS {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let mut c = BigUint::from_bytes_be(&buf);
        c >>= (bytes as u64 * 8 - bits) as usize;
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, rng) {
            return Ok(c);
        }
    }
    Err(Error::Crypto(format!("no {bits}-bit prime found in {PRIME_ATTEMPTS} attempts")))
}

/// Deterministic under `seed`.
pub fn keygen(bits: u64, seed: u64) -> Result<KeyPair> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::Crypto(format!("unsupported key length {bits}; use 512, 1024 or 2048")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, &[0x9a11]));
    let half = bits / 2;
    let (p, q) = loop {
        let p = random_prime(half, &mut rng)?;
        let q = random_prime(half, &mut rng)?;
        if p != q {
            break (p, q);
        }
    };
    let n = &p * &q;
    let one = BigUint::one();
    let lambda = (&p - &one).lcm(&(&q - &one));
    let mu = lambda
        .modinv(&n)
        .ok_or_else(|| Error::Crypto("lambda is not invertible modulo n".into()))?;
    let n_squared = &n * &n;
    let g = &n + &one;
    Ok(KeyPair {
        public: PublicKey {
            key_id: mix_seed(seed, &[bits]),
            n,
            n_squared,
            g,
            bits,
        },
        private: PrivateKey { lambda, mu },
    })
}

impl PublicKey {
    /// `g^m r^n mod n²` for a plaintext `m < n`.
    pub fn encrypt(&self, m: &BigUint, rng: &mut impl RngCore) -> Result<Ciphertext> {
        if *m >= self.n {
            return Err(Error::Range("plaintext is not below the modulus".into()));
        }
        let one = BigUint::one();
        let r = loop {
            let r = random_below(rng, &self.n);
            if !r.is_zero() && r.gcd(&self.n) == one {
                break r;
            }
        };
        // (n + 1)^m = 1 + m n (mod n²)
        let gm = (&one + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: gm * rn % &self.n_squared,
            key_id: self.key_id,
        })
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_id != self.key_id {
            return Err(Error::Crypto("ciphertext belongs to another key".into()));
        }
        Ok(())
    }

    /// `Enc(a) ⊕ Enc(b) = Enc(a + b)`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: &a.value * &b.value % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// `Enc(a)^k = Enc(k a)`.
    pub fn mul_plain(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
        self.check(c)?;
        Ok(Ciphertext {
            value: c.value.modpow(k, &self.n_squared),
            key_id: self.key_id,
        })
    }
}

impl KeyPair {
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.check(c)?;
        let pk = &self.public;
        let x = c.value.modpow(&self.private.lambda, &pk.n_squared);
        let l = (x - BigUint::one()) / &pk.n;
        Ok(l * &self.private.mu % &pk.n)
    }

    /// JSON form; refused outside the 512-bit test mode.
    pub fn to_json(&self) -> Result<String> {
        if self.public.bits != TEST_BITS {
            return Err(Error::Crypto("key export is limited to 512-bit test keys".into()));
        }
        let doc = KeyDoc {
            bits: self.public.bits,
            key_id: self.public.key_id,
            n: self.public.n.to_str_radix(16),
            lambda: self.private.lambda.to_str_radix(16),
            mu: self.private.mu.to_str_radix(16),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KeyDoc = serde_json::from_str(text)?;
        let parse = |s: &str| {
            BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| Error::Crypto(format!("bad hex integer {s}")))
        };
        let n = parse(&doc.n)?;
        Ok(KeyPair {
            public: PublicKey {
                n_squared: &n * &n,
                g: &n + BigUint::one(),
                n,
                bits: doc.bits,
                key_id: doc.key_id,
            },
            private: PrivateKey {
                lambda: parse(&doc.lambda)?,
                mu: parse(&doc.mu)?,
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct KeyDoc {
    bits: u64,
    key_id: u64,
    n: String,
    lambda: String,
    mu: String,
}

/// Per-element encryption randomness derived from `(seed, counter)`.
pub fn element_rng(seed: u64, counter: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix_seed(seed, &[0xe4c, counter]))
}

/// Uniform plaintext in `[0, n)`.
pub fn random_plaintext(pk: &PublicKey, rng: &mut impl Rng) -> BigUint {
    random_below(rng, &pk.n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_plaintexts_round_trip() {
        let kp = keygen(512, 1).unwrap();
        let mut rng = element_rng(3, 0);
        assert_eq!(kp.decrypt(&kp.public.encrypt(&BigUint::zero(), &mut rng).unwrap()).unwrap(), BigUint::zero());
        let max = &kp.public.n - BigUint::one();
        assert_eq!(kp.decrypt(&kp.public.encrypt(&max, &mut rng).unwrap()).unwrap(), max);
        assert!(kp.public.encrypt(&kp.public.n, &mut rng).is_err());
        assert_eq!(kp.public.n.bits(), 512);
    }

    #[test]
    fn keygen_is_seeded() {
        assert_eq!(keygen(512, 9).unwrap(), keygen(512, 9).unwrap());
        assert_ne!(keygen(512, 9).unwrap().public.n, keygen(512, 10).unwrap().public.n);
        assert!(matches!(keygen(256, 1), Err(Error::Crypto(_))));
    }

    #[test]
    fn encryption_is_randomized() {
        let kp = keygen(512, 2).unwrap();
        let m = BigUint::from(42u32);
        let a = kp.public.encrypt(&m, &mut element_rng(1, 0)).unwrap();
        let b = kp.public.encrypt(&m, &mut element_rng(1, 1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.decrypt(&a).unwrap(), kp.decrypt(&b).unwrap());
    }

    #[test]
    fn scalar_multiplication() {
        let kp = keygen(512, 4).unwrap();
        let c = kp.public.encrypt(&BigUint::from(7u32), &mut element_rng(1, 0)).unwrap();
        let c6 = kp.public.mul_plain(&c, &BigUint::from(6u32)).unwrap();
        assert_eq!(kp.decrypt(&c6).unwrap(), BigUint::from(42u32));
    }

    #[test]
    fn key_json_round_trip_in_test_mode() {
        let kp = keygen(512, 5).unwrap();
        assert_eq!(KeyPair::from_json(&kp.to_json().unwrap()).unwrap(), kp);
    }

    #[test]
    fn primality_of_known_values() {
        let mut rng = element_rng(0, 0);
        assert!(is_probable_prime(&BigUint::from(104_729u32), &mut rng));
        assert!(!is_probable_prime(&BigUint::from(104_730u32), &mut rng));
        // Carmichael number
        assert!(!is_probable_prime(&BigUint::from(561u32), &mut rng));
        let m61 = (BigUint::one() << 61usize) - BigUint::one();
        assert!(is_probable_prime(&m61, &mut rng));
    }
}
