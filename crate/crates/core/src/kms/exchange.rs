// SPDX-License-Identifier: Apache-2.0

//! Key-exchange methods backing the encrypted channels.
//!
//! Each method runs between two in-process endpoints and must leave both with
//! the same 32 bytes of AES-256 key material.

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng, TryRngCore};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KmsError;

/// 2048-bit MODP group, generator 2.
const MODP14_PRIME_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

fn one() -> BigUint {
    BigUint::from(1u8)
}

/// Private exponent size for the MODP groups.
const DH_EXPONENT_BYTES: usize = 32;

/// Draws 32 bytes from a random source standing in for the QRNG.
pub fn qrng_key(rng: &mut impl RngCore) -> [u8; 32] {
    let mut out = [0u8; 32];
    rng.fill_bytes(&mut out);
    out
}

/// Draws 32 bytes from operating-system entropy.
pub fn qrng_key_os() -> Result<[u8; 32], KmsError> {
    let mut out = [0u8; 32];
    rand::rngs::OsRng
        .try_fill_bytes(&mut out)
        .map_err(|e| KmsError::Entropy(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DhGroup {
    /// RFC 3526 group 14.
    #[default]
    Modp14,
    /// Arbitrary group, prime given in hex. Intended for fast tests.
    Custom { prime_hex: String, generator: u64 },
}

impl DhGroup {
    pub fn params(&self) -> Result<(BigUint, BigUint), KmsError> {
        let (hex, g) = match self {
            DhGroup::Modp14 => (MODP14_PRIME_HEX, 2),
            DhGroup::Custom { prime_hex, generator } => (prime_hex.as_str(), *generator),
        };
        let p = BigUint::parse_bytes(hex.as_bytes(), 16)
            .ok_or_else(|| KmsError::Provider { method: "dh".into(), reason: "malformed prime".into() })?;
        let g = BigUint::from(g);
        if g <= one() || g >= p {
            return Err(KmsError::Provider { method: "dh".into(), reason: "generator out of range".into() });
        }
        Ok((p, g))
    }
}

/// Both sides of one Diffie-Hellman run.
#[derive(Debug, Clone)]
pub struct DhTranscript {
    pub public_a: BigUint,
    pub public_b: BigUint,
    pub key_a: [u8; 32],
    pub key_b: [u8; 32],
}

fn private_exponent(rng: &mut impl RngCore, p: &BigUint) -> BigUint {
    let len = DH_EXPONENT_BYTES.min(((p.bits() as usize) / 8).saturating_sub(1)).max(1);
    loop {
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        let x = BigUint::from_bytes_be(&bytes);
        if x > one() {
            return x;
        }
    }
}

fn derive(shared: &BigUint, p: &BigUint) -> [u8; 32] {
    let width = (p.bits() as usize).div_ceil(8);
    let raw = shared.to_bytes_be();
    let mut padded = vec![0u8; width - raw.len()];
    padded.extend_from_slice(&raw);
    Sha256::digest(&padded).into()
}

/// Runs classic finite-field Diffie-Hellman between two endpoints; each side
/// hashes its shared secret with SHA-256.
pub fn dh_exchange(group: &DhGroup, rng: &mut impl RngCore) -> Result<DhTranscript, KmsError> {
    let (p, g) = group.params()?;
    let a = private_exponent(rng, &p);
    let b = private_exponent(rng, &p);
    let public_a = g.modpow(&a, &p);
    let public_b = g.modpow(&b, &p);
    let p_minus_one = &p - one();
    for public in [&public_a, &public_b] {
        if *public <= one() || *public >= p_minus_one {
            return Err(KmsError::Provider { method: "dh".into(), reason: "degenerate public value".into() });
        }
    }
    let key_a = derive(&public_b.modpow(&a, &p), &p);
    let key_b = derive(&public_a.modpow(&b, &p), &p);
    Ok(DhTranscript { public_a, public_b, key_a, key_b })
}

/// Key encapsulation mechanism interface for the quantum-resistant method.
pub trait Kem: Send + Sync {
    fn name(&self) -> &str;
    /// Returns `(public key, secret key)`.
    fn keypair(&mut self) -> (Vec<u8>, Vec<u8>);
    /// Returns `(ciphertext, shared secret)`.
    fn encapsulate(&mut self, public_key: &[u8]) -> Result<(Vec<u8>, [u8; 32]), KmsError>;
    fn decapsulate(&self, secret_key: &[u8], ciphertext: &[u8]) -> Result<[u8; 32], KmsError>;
    fn boxed_clone(&self) -> Box<dyn Kem>;
}

impl Clone for Box<dyn Kem> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Deterministic stand-in with the KEM message flow and no security: the
/// public key is a hash of the secret key and anyone holding the public key
/// can decapsulate. Swap in a lattice KEM behind [`Kem`] for real use.
#[derive(Debug, Clone)]
pub struct SimulatedKem {
    rng: ChaCha20Rng,
}

impl SimulatedKem {
    pub fn new(seed: u64) -> Self {
        SimulatedKem { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    fn tagged_hash(tag: &[u8], parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(tag);
        for p in parts {
            h.update(p);
        }
        h.finalize().into()
    }
}

impl Kem for SimulatedKem {
    fn name(&self) -> &str {
        "simulated-kem"
    }

    fn keypair(&mut self) -> (Vec<u8>, Vec<u8>) {
        let sk = qrng_key(&mut self.rng);
        let pk = Self::tagged_hash(b"pk", &[&sk]);
        (pk.to_vec(), sk.to_vec())
    }

    fn encapsulate(&mut self, public_key: &[u8]) -> Result<(Vec<u8>, [u8; 32]), KmsError> {
        if public_key.len() != 32 {
            return Err(KmsError::Provider { method: "qra".into(), reason: "bad public key length".into() });
        }
        let r = qrng_key(&mut self.rng);
        let mask = Self::tagged_hash(b"mask", &[public_key]);
        let ct: Vec<u8> = r.iter().zip(mask).map(|(a, b)| a ^ b).collect();
        Ok((ct, Self::tagged_hash(b"ss", &[&r, public_key])))
    }

    fn decapsulate(&self, secret_key: &[u8], ciphertext: &[u8]) -> Result<[u8; 32], KmsError> {
        if ciphertext.len() != 32 {
            return Err(KmsError::Provider { method: "qra".into(), reason: "bad ciphertext length".into() });
        }
        let pk = Self::tagged_hash(b"pk", &[secret_key]);
        let mask = Self::tagged_hash(b"mask", &[&pk]);
        let r: Vec<u8> = ciphertext.iter().zip(mask).map(|(a, b)| a ^ b).collect();
        Ok(Self::tagged_hash(b"ss", &[&r, &pk]))
    }

    fn boxed_clone(&self) -> Box<dyn Kem> {
        Box::new(self.clone())
    }
}

/// Runs one KEM exchange: the receiver publishes a key pair, the sender
/// encapsulates, the receiver decapsulates. Returns both sides' secrets.
pub fn kem_exchange(kem: &mut dyn Kem) -> Result<([u8; 32], [u8; 32]), KmsError> {
    let (pk, sk) = kem.keypair();
    let (ct, sender) = kem.encapsulate(&pk)?;
    let receiver = kem.decapsulate(&sk, &ct)?;
    Ok((sender, receiver))
}
