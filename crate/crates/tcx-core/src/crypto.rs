//! Cryptographic primitives used across the system: SHA-256, HMAC-SHA256,
//! HKDF-SHA256 with fixed ASCII context labels, X25519 key agreement,
//! Ed25519 signatures and ChaCha20-Poly1305 sealing.
//!
//! Key derivation labels are part of the wire contract; an independent
//! implementation using the same labels derives byte-identical keys.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// HKDF label for DH transport keys (secret injection).
pub const LABEL_TRANSPORT: &[u8] = b"tcx-transport-v1";
/// HKDF label for per-VM sealing keys.
pub const LABEL_SEAL: &[u8] = b"tcx-seal-v1";
/// HKDF label for secure-channel record keys.
pub const LABEL_CHANNEL: &[u8] = b"tcx-channel-v1";
/// HKDF label for the image block cipher key.
pub const LABEL_IMAGE_ENC: &[u8] = b"tcx-image-enc-v1";
/// HKDF label for the image block MAC key.
pub const LABEL_IMAGE_MAC: &[u8] = b"tcx-image-mac-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("signature verification failed")]
    BadSignature,
    #[error("AEAD open failed")]
    DecryptFailure,
    #[error("invalid key material: {0}")]
    BadKey(&'static str),
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// HKDF-SHA256 expand of `ikm` under a fixed ASCII `label` plus optional
/// per-use `context` bytes.
pub fn hkdf_derive<const N: usize>(ikm: &[u8], label: &[u8], context: &[u8]) -> [u8; N] {
    let hk = Hkdf::<Sha256>::new(None, ikm);
    let mut info = Vec::with_capacity(label.len() + context.len());
    info.extend_from_slice(label);
    info.extend_from_slice(context);
    let mut out = [0u8; N];
    hk.expand(&info, &mut out).expect("output length fits hkdf limit");
    out
}

/// Source of key material: either seeded (deterministic tests) or the
/// system RNG. Every key-generating operation takes one of these.
pub enum Entropy {
    Seeded(rand_chacha::ChaCha20Rng),
    System,
}

impl Entropy {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        use rand::SeedableRng;
        Entropy::Seeded(rand_chacha::ChaCha20Rng::from_seed(seed))
    }

    pub fn system() -> Self {
        Entropy::System
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        match self {
            Entropy::Seeded(rng) => rng.fill_bytes(out),
            Entropy::System => rand::rngs::OsRng.fill_bytes(out),
        }
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.fill(&mut out);
        out
    }
}

// --- Signatures (Ed25519) -------------------------------------------------

#[derive(Clone)]
pub struct SigKeypair {
    signing: SigningKey,
}

impl SigKeypair {
    pub fn generate(entropy: &mut Entropy) -> Self {
        let seed: [u8; 32] = entropy.bytes();
        SigKeypair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        SigKeypair {
            signing: SigningKey::from_bytes(&bytes),
        }
    }
}

impl std::fmt::Debug for SigKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigKeypair({})", hex::encode(self.public()))
    }
}

pub fn verify_sig(public: &[u8; 32], msg: &[u8], sig: &[u8; 64]) -> Result<(), CryptoError> {
    let vk = VerifyingKey::from_bytes(public).map_err(|_| CryptoError::BadKey("ed25519 public"))?;
    let sig = Signature::from_bytes(sig);
    vk.verify(msg, &sig).map_err(|_| CryptoError::BadSignature)
}

// --- Diffie-Hellman (X25519) ----------------------------------------------

#[derive(Clone)]
pub struct DhKeypair {
    secret: x25519_dalek::StaticSecret,
}

impl DhKeypair {
    pub fn generate(entropy: &mut Entropy) -> Self {
        let seed: [u8; 32] = entropy.bytes();
        DhKeypair {
            secret: x25519_dalek::StaticSecret::from(seed),
        }
    }

    pub fn public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.secret).to_bytes()
    }

    /// Raw DH shared secret with a peer's 32-byte public share.
    pub fn agree(&self, peer_public: &[u8; 32]) -> [u8; 32] {
        let peer = x25519_dalek::PublicKey::from(*peer_public);
        self.secret.diffie_hellman(&peer).to_bytes()
    }
}

impl std::fmt::Debug for DhKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DhKeypair({})", hex::encode(self.public()))
    }
}

// --- AEAD sealing (ChaCha20-Poly1305) ---------------------------------------

/// Seals `plaintext` under `key` with the given 12-byte nonce and
/// associated data. The nonce must never repeat for one key.
pub fn aead_seal(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(key.into());
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("encryption is infallible for in-memory buffers")
}

pub fn aead_open(
    key: &[u8; 32],
    nonce: &[u8; 12],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(key.into());
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
        .map_err(|_| CryptoError::DecryptFailure)
}
