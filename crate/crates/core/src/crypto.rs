//! Hashing, signatures and public-key encryption.
//!
//! * Hash: SHA-256.
//! * Signatures: Ed25519 over the SHA-256 digest of the message, verified
//!   in strict mode (canonical scalars, no weak keys).
//! * Encryption: hybrid. A fresh X25519 ephemeral key agrees a secret with
//!   the recipient's key (the Montgomery form of its Ed25519 key), HKDF-SHA256
//!   derives a ChaCha20-Poly1305 key and nonce, and the ciphertext is
//!   `ephemeral_public (32) || aead_ciphertext_with_tag`.
//!
//! One key pair per entity serves both signing and encryption. The secret
//! key is the 32-byte Ed25519 seed; the public key is the 32-byte Ed25519
//! verifying key.

use std::fmt;
use std::fs;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use curve25519_dalek::montgomery::MontgomeryPoint;
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;


pub const PUBLIC_KEY_LEN: usize = 32;
pub const SECRET_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;
/// Bytes added to every plaintext by [`encrypt`].
pub const CIPHERTEXT_OVERHEAD: usize = 32 + 16;

const HKDF_INFO: &[u8] = b"dlacb hybrid encryption v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key generation failed: {0}")]
    Generation(String),
    #[error("malformed key: {0}")]
    Key(&'static str),
    #[error("decryption failed")]
    Decryption,
    #[error("key file {path}: {reason}")]
    KeyFile { path: String, reason: String },
}

byte_newtype!(PublicKey, PUBLIC_KEY_LEN);
byte_newtype!(Signature, SIGNATURE_LEN);
byte_newtype!(Digest, DIGEST_LEN);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);
}

/// Ed25519 seed. Debug output never shows the bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; SECRET_KEY_LEN]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; SECRET_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s.trim()).map_err(|_| CryptoError::Key("invalid hex"))?;
        let arr: [u8; SECRET_KEY_LEN] =
            raw.as_slice().try_into().map_err(|_| CryptoError::Key("wrong length"))?;
        Ok(Self(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; SECRET_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl KeyPair {
    /// Deterministic key pair from a 32-byte seed.
    pub fn from_seed(seed: [u8; SECRET_KEY_LEN]) -> Self {
        let signing = SigningKey::from_bytes(&seed);
        Self {
            public: PublicKey(signing.verifying_key().to_bytes()),
            secret: SecretKey(seed),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, CryptoError> {
        generate_keypair(rng)
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(&self.secret, message)
    }

    /// Writes `<stem>.pub` and `<stem>.key`, each holding one lowercase hex key.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), CryptoError> {
        write_key_file(&dir.join(format!("{stem}.pub")), &self.public.to_hex())?;
        write_key_file(&dir.join(format!("{stem}.key")), &self.secret.to_hex())
    }

    /// Loads a key pair from a secret key file; the public half is derived.
    pub fn load(secret_path: &Path) -> Result<Self, CryptoError> {
        let text = read_key_file(secret_path)?;
        let secret = SecretKey::from_hex(&text).map_err(|e| key_file_error(secret_path, e))?;
        Ok(Self::from_seed(secret.0))
    }
}

pub fn load_public_key(path: &Path) -> Result<PublicKey, CryptoError> {
    let text = read_key_file(path)?;
    PublicKey::from_hex(&text)
        .ok_or(CryptoError::Key("expected 32 hex-encoded bytes"))
        .map_err(|e| key_file_error(path, e))
}

fn key_file_error(path: &Path, e: CryptoError) -> CryptoError {
    CryptoError::KeyFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn read_key_file(path: &Path) -> Result<String, CryptoError> {
    fs::read_to_string(path).map_err(|e| CryptoError::KeyFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn write_key_file(path: &Path, hex: &str) -> Result<(), CryptoError> {
    fs::write(path, format!("{hex}\n")).map_err(|e| CryptoError::KeyFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// The primitive set every protocol component goes through.
///
/// Randomness is always passed in, so a seeded generator makes every
/// operation reproducible.
pub trait CryptoProvider: Send + Sync {
    fn generate_keypair(&self, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError>;
    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Signature;
    /// Never fails: malformed keys or signatures simply do not verify.
    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool;
    fn encrypt(
        &self,
        public: &PublicKey,
        plaintext: &[u8],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<u8>, CryptoError>;
    fn decrypt(&self, secret: &SecretKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;
    fn hash(&self, data: &[u8]) -> Digest;
}

/// Ed25519 + X25519/ChaCha20-Poly1305 + SHA-256.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultProvider;

impl CryptoProvider for DefaultProvider {
    fn generate_keypair(&self, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError> {
        let mut seed = [0u8; SECRET_KEY_LEN];
        rng.try_fill_bytes(&mut seed)
            .map_err(|e| CryptoError::Generation(e.to_string()))?;
        Ok(KeyPair::from_seed(seed))
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Signature {
        let signing = SigningKey::from_bytes(&secret.0);
        let digest = self.hash(message);
        Signature(signing.sign(&digest.0).to_bytes())
    }

    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let Ok(pk_bytes) = <[u8; PUBLIC_KEY_LEN]>::try_from(public) else {
            return false;
        };
        let Ok(sig_bytes) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
            return false;
        };
        let Ok(verifying) = VerifyingKey::from_bytes(&pk_bytes) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        let digest = self.hash(message);
        verifying.verify_strict(&digest.0, &sig).is_ok()
    }

    fn encrypt(
        &self,
        public: &PublicKey,
        plaintext: &[u8],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<u8>, CryptoError> {
        let recipient = recipient_point(public)?;
        let mut ephemeral = [0u8; 32];
        rng.try_fill_bytes(&mut ephemeral)
            .map_err(|e| CryptoError::Generation(e.to_string()))?;
        let ephemeral_public = MontgomeryPoint::mul_base_clamped(ephemeral);
        let shared = recipient.mul_clamped(ephemeral);
        let cipher = derive_cipher(&shared, &ephemeral_public, public)?;
        let sealed = cipher
            .0
            .encrypt(
                (&cipher.1).into(),
                Payload {
                    msg: plaintext,
                    aad: public.as_bytes(),
                },
            )
            .map_err(|_| CryptoError::Key("encryption failed"))?;
        let mut out = Vec::with_capacity(CIPHERTEXT_OVERHEAD + plaintext.len());
        out.extend_from_slice(ephemeral_public.as_bytes());
        out.extend_from_slice(&sealed);
        Ok(out)
    }

    fn decrypt(&self, secret: &SecretKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < CIPHERTEXT_OVERHEAD {
            return Err(CryptoError::Decryption);
        }
        let (eph, sealed) = ciphertext.split_at(32);
        let ephemeral_public = MontgomeryPoint(eph.try_into().expect("split at 32"));
        let signing = SigningKey::from_bytes(&secret.0);
        let own_public = PublicKey(signing.verifying_key().to_bytes());
        let shared = ephemeral_public.mul_clamped(signing.to_scalar_bytes());
        let cipher =
            derive_cipher(&shared, &ephemeral_public, &own_public).map_err(|_| CryptoError::Decryption)?;
        cipher
            .0
            .decrypt(
                (&cipher.1).into(),
                Payload {
                    msg: sealed,
                    aad: own_public.as_bytes(),
                },
            )
            .map_err(|_| CryptoError::Decryption)
    }

    fn hash(&self, data: &[u8]) -> Digest {
        Digest(Sha256::digest(data).into())
    }
}

fn recipient_point(public: &PublicKey) -> Result<MontgomeryPoint, CryptoError> {
    let verifying =
        VerifyingKey::from_bytes(&public.0).map_err(|_| CryptoError::Key("not a curve point"))?;
    if verifying.is_weak() {
        return Err(CryptoError::Key("small-order public key"));
    }
    Ok(verifying.to_montgomery())
}

fn derive_cipher(
    shared: &MontgomeryPoint,
    ephemeral_public: &MontgomeryPoint,
    recipient: &PublicKey,
) -> Result<(ChaCha20Poly1305, [u8; 12]), CryptoError> {
    if shared.as_bytes() == &[0u8; 32] {
        return Err(CryptoError::Key("degenerate shared secret"));
    }
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral_public.as_bytes());
    salt[32..].copy_from_slice(recipient.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared.as_bytes());
    let mut okm = [0u8; 44];
    hk.expand(HKDF_INFO, &mut okm)
        .expect("44 bytes is a valid HKDF-SHA256 output length");
    let cipher = ChaCha20Poly1305::new((&okm[..32]).into());
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&okm[32..]);
    Ok((cipher, nonce))
}

pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<KeyPair, CryptoError> {
    DefaultProvider.generate_keypair(rng)
}

pub fn sign(secret: &SecretKey, message: &[u8]) -> Signature {
    DefaultProvider.sign(secret, message)
}

pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    DefaultProvider.verify(&public.0, message, &signature.0)
}

/// Verification over raw byte strings of any length.
pub fn verify_raw(public: &[u8], message: &[u8], signature: &[u8]) -> bool {
    DefaultProvider.verify(public, message, signature)
}

pub fn encrypt<R: RngCore + CryptoRng>(
    public: &PublicKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    DefaultProvider.encrypt(public, plaintext, rng)
}

pub fn decrypt(secret: &SecretKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    DefaultProvider.decrypt(secret, ciphertext)
}

pub fn hash(data: &[u8]) -> Digest {
    DefaultProvider.hash(data)
}

/// Seeded CSPRNG used wherever reproducible randomness is required.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
