//! Probabilistic authenticated encryption of blocks and the keyed position
//! function.
//!
//! A sealed block stores `nonce | tag | body`. The body is ChaCha20 over
//! `block_id | counter | payload` under a fresh random nonce, so sealing the
//! same plaintext twice yields unrelated ciphertexts. The tag is
//! HMAC-SHA256 over `block_id | counter | payload`, truncated to 8 bytes, which
//! binds the payload to the counter recorded in the position map and so gives
//! freshness as well as authenticity.
//!
//! Block ids and counters travel inside the encrypted body, never in the
//! clear, so the stored nonce reveals nothing about which block a slot holds.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, KeyInit, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

pub const NONCE_BYTES: usize = 12;
pub const TAG_BYTES: usize = 8;
/// Encrypted `block_id | counter` header in front of the payload.
pub const HEADER_BYTES: usize = 16;

/// Block id carried by filler blocks that back no logical block.
pub const DUMMY_BLOCK: u64 = u64::MAX;

type HmacSha256 = Hmac<Sha256>;

/// Independent secret keys for one ORAM instance.
#[derive(Clone)]
pub struct KeyMaterial {
    pub enc_key: [u8; 32],
    pub mac_key: [u8; 32],
    pub prf_key: [u8; 32],
}

impl KeyMaterial {
    /// Derives all three keys from a simulation seed.
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_7973_6b65_7973);
        let mut k = Self { enc_key: [0; 32], mac_key: [0; 32], prf_key: [0; 32] };
        rng.fill_bytes(&mut k.enc_key);
        rng.fill_bytes(&mut k.mac_key);
        rng.fill_bytes(&mut k.prf_key);
        k
    }
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

/// The on-DRAM unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlock {
    pub nonce: [u8; NONCE_BYTES],
    pub tag: [u8; TAG_BYTES],
    pub body: Vec<u8>,
}

impl SealedBlock {
    pub fn encoded_len(block_bytes: usize) -> usize {
        NONCE_BYTES + TAG_BYTES + HEADER_BYTES + block_bytes
    }

    pub fn encode_into(&self, out: &mut [u8]) {
        out[..NONCE_BYTES].copy_from_slice(&self.nonce);
        out[NONCE_BYTES..NONCE_BYTES + TAG_BYTES].copy_from_slice(&self.tag);
        out[NONCE_BYTES + TAG_BYTES..].copy_from_slice(&self.body);
    }

    pub fn decode(bytes: &[u8]) -> Self {
        let mut nonce = [0; NONCE_BYTES];
        let mut tag = [0; TAG_BYTES];
        nonce.copy_from_slice(&bytes[..NONCE_BYTES]);
        tag.copy_from_slice(&bytes[NONCE_BYTES..NONCE_BYTES + TAG_BYTES]);
        Self { nonce, tag, body: bytes[NONCE_BYTES + TAG_BYTES..].to_vec() }
    }
}

/// Tag check failed: the block was tampered with, replayed, or opened under
/// the wrong block id or counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagMismatch;

/// Plaintext recovered from a block whose tag verified against its own header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opened {
    pub block_id: u64,
    pub counter: u64,
    pub payload: Vec<u8>,
}

/// Seals and opens blocks, and derives positions. Owns the nonce source.
pub struct BlockCrypto {
    keys: KeyMaterial,
    mac: HmacSha256,
    prf: HmacSha256,
    salt: ChaCha20Rng,
}

impl BlockCrypto {
    pub fn new(keys: KeyMaterial, nonce_seed: u64) -> Self {
        let mac = <HmacSha256 as KeyInit>::new_from_slice(&keys.mac_key).expect("hmac takes any key length");
        let prf = <HmacSha256 as KeyInit>::new_from_slice(&keys.prf_key).expect("hmac takes any key length");
        Self { keys, mac, prf, salt: ChaCha20Rng::seed_from_u64(nonce_seed ^ 0x6e6f_6e63_6573_616c) }
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }

    fn tag(&self, block_id: u64, counter: u64, payload: &[u8]) -> [u8; TAG_BYTES] {
        let mut m = self.mac.clone();
        m.update(&block_id.to_le_bytes());
        m.update(&counter.to_le_bytes());
        m.update(payload);
        let full = m.finalize().into_bytes();
        let mut t = [0; TAG_BYTES];
        t.copy_from_slice(&full[..TAG_BYTES]);
        t
    }

    fn keystream(&self, nonce: &[u8; NONCE_BYTES], buf: &mut [u8]) {
        let mut c = ChaCha20::new(&self.keys.enc_key.into(), &(*nonce).into());
        c.apply_keystream(buf);
    }

    /// Encrypts under a fresh nonce and tags with `(block_id, counter, payload)`.
    pub fn seal(&mut self, block_id: u64, counter: u64, payload: &[u8]) -> SealedBlock {
        let mut nonce = [0; NONCE_BYTES];
        self.salt.fill_bytes(&mut nonce);
        let mut body = Vec::with_capacity(HEADER_BYTES + payload.len());
        body.extend_from_slice(&block_id.to_le_bytes());
        body.extend_from_slice(&counter.to_le_bytes());
        body.extend_from_slice(payload);
        self.keystream(&nonce, &mut body);
        SealedBlock { nonce, tag: self.tag(block_id, counter, payload), body }
    }

    /// Returns the payload iff the tag verifies for `(block_id, counter)`.
    pub fn open(&self, sealed: &SealedBlock, block_id: u64, counter: u64) -> Result<Vec<u8>, TagMismatch> {
        let mut body = sealed.body.clone();
        self.keystream(&sealed.nonce, &mut body);
        let payload = body.split_off(HEADER_BYTES);
        let header_ok = body[..8] == block_id.to_le_bytes() && body[8..] == counter.to_le_bytes();
        if !header_ok || self.tag(block_id, counter, &payload) != sealed.tag {
            return Err(TagMismatch);
        }
        Ok(payload)
    }

    /// Opens a block without knowing which logical block it holds, checking
    /// the tag against the encrypted header. This proves authenticity but not
    /// freshness.
    pub fn open_authentic(&self, sealed: &SealedBlock) -> Result<Opened, TagMismatch> {
        let mut body = sealed.body.clone();
        self.keystream(&sealed.nonce, &mut body);
        let payload = body.split_off(HEADER_BYTES);
        let block_id = u64::from_le_bytes(body[..8].try_into().unwrap());
        let counter = u64::from_le_bytes(body[8..16].try_into().unwrap());
        if self.tag(block_id, counter, &payload) != sealed.tag {
            return Err(TagMismatch);
        }
        Ok(Opened { block_id, counter, payload })
    }

    /// Re-encrypts a block in place under a fresh nonce. Plaintext, block id
    /// and counter are unchanged.
    pub fn reseal(&mut self, sealed: &SealedBlock) -> Result<SealedBlock, TagMismatch> {
        let o = self.open_authentic(sealed)?;
        Ok(self.seal(o.block_id, o.counter, &o.payload))
    }

    /// Keyed pseudo-random position for `(block_id, counter)` in `[0, slots)`.
    /// `slots` must be a power of two; the low bits of the PRF output are used.
    pub fn prf_position(&self, block_id: u64, counter: u64, slots: u64) -> u64 {
        debug_assert!(slots.is_power_of_two());
        let mut m = self.prf.clone();
        m.update(&block_id.to_le_bytes());
        m.update(&counter.to_le_bytes());
        let out = m.finalize().into_bytes();
        u64::from_le_bytes(out[..8].try_into().unwrap()) & (slots - 1)
    }
}
