// SPDX-License-Identifier: Apache-2.0

//! Data-plane frame format. All integers are big-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "QSLC"
//!      4     1  mode (0 plaintext, 1 AES-256-GCM)
//!      5    16  key id (zero in mode 0)
//!     21     8  sequence number
//!     29    12  nonce
//!     41     4  payload length
//!     45     n  payload (ciphertext in mode 1)
//!   45+n    16  GCM tag (mode 1 only)
//! ```
//!
//! In mode 1 the 45 header bytes are the GCM associated data, so a frame
//! whose header was altered fails authentication.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use qslice_core::kms::KeyId;

pub const MAGIC: [u8; 4] = *b"QSLC";
pub const HEADER_LEN: usize = 45;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Mode {
    Plaintext = 0,
    Aes256Gcm = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub mode: Mode,
    pub key_id: KeyId,
    pub seq: u64,
    pub nonce: [u8; 12],
    /// Plaintext in mode 0, ciphertext without the tag in mode 1.
    pub payload: Vec<u8>,
    /// Present exactly in mode 1.
    pub tag: Option<[u8; TAG_LEN]>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown mode {0}")]
    UnknownMode(u8),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("payload of {0} bytes does not fit a frame")]
    TooLarge(usize),
    #[error("mode {mode:?} frame {problem}")]
    Inconsistent { mode: Mode, problem: &'static str },
    #[error("authentication failed")]
    Authentication,
}

impl Frame {
    fn header(&self) -> Result<[u8; HEADER_LEN], FrameError> {
        let len = u32::try_from(self.payload.len()).map_err(|_| FrameError::TooLarge(self.payload.len()))?;
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = self.mode as u8;
        h[5..21].copy_from_slice(&self.key_id.to_bytes());
        h[21..29].copy_from_slice(&self.seq.to_be_bytes());
        h[29..41].copy_from_slice(&self.nonce);
        h[41..45].copy_from_slice(&len.to_be_bytes());
        Ok(h)
    }

    fn check(&self) -> Result<(), FrameError> {
        match (self.mode, self.tag.is_some()) {
            (Mode::Plaintext, true) => Err(FrameError::Inconsistent { mode: self.mode, problem: "carries a tag" }),
            (Mode::Aes256Gcm, false) => Err(FrameError::Inconsistent { mode: self.mode, problem: "lacks a tag" }),
            (Mode::Plaintext, false) if self.key_id != KeyId(0) => {
                Err(FrameError::Inconsistent { mode: self.mode, problem: "has a non-zero key id" })
            }
            _ => Ok(()),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TAG_LEN);
        out.extend_from_slice(&self.header()?);
        out.extend_from_slice(&self.payload);
        if let Some(tag) = &self.tag {
            out.extend_from_slice(tag);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Truncated { need: HEADER_LEN, have: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let mode = match bytes[4] {
            0 => Mode::Plaintext,
            1 => Mode::Aes256Gcm,
            m => return Err(FrameError::UnknownMode(m)),
        };
        let key_id = KeyId::from_bytes(bytes[5..21].try_into().expect("16 bytes"));
        let seq = u64::from_be_bytes(bytes[21..29].try_into().expect("8 bytes"));
        let nonce: [u8; 12] = bytes[29..41].try_into().expect("12 bytes");
        let len = u32::from_be_bytes(bytes[41..45].try_into().expect("4 bytes")) as usize;
        let tag_len = if mode == Mode::Aes256Gcm { TAG_LEN } else { 0 };
        let need = HEADER_LEN + len + tag_len;
        if bytes.len() < need {
            return Err(FrameError::Truncated { need, have: bytes.len() });
        }
        if bytes.len() > need {
            return Err(FrameError::Trailing(bytes.len() - need));
        }
        let payload = bytes[HEADER_LEN..HEADER_LEN + len].to_vec();
        let tag = (tag_len > 0).then(|| bytes[HEADER_LEN + len..].try_into().expect("16 bytes"));
        let frame = Frame { mode, key_id, seq, nonce, payload, tag };
        frame.check()?;
        Ok(frame)
    }

    pub fn plaintext(seq: u64, nonce: [u8; 12], payload: &[u8]) -> Frame {
        Frame { mode: Mode::Plaintext, key_id: KeyId(0), seq, nonce, payload: payload.to_vec(), tag: None }
    }

    /// Encrypts `plaintext` under `key` with the header as associated data.
    pub fn seal(key: &[u8; 32], key_id: KeyId, seq: u64, nonce: [u8; 12], plaintext: &[u8]) -> Result<Frame, FrameError> {
        let mut frame = Frame {
            mode: Mode::Aes256Gcm,
            key_id,
            seq,
            nonce,
            payload: vec![0; plaintext.len()],
            tag: Some([0; TAG_LEN]),
        };
        let header = frame.header()?;
        let mut sealed = aes_gcm_seal(key, &nonce, &header, plaintext);
        let tag = sealed.split_off(plaintext.len());
        frame.payload = sealed;
        frame.tag = Some(tag.try_into().expect("16-byte tag"));
        Ok(frame)
    }

    /// Verifies the tag and returns the plaintext; mode 0 frames pass
    /// through.
    pub fn open(&self, key: Option<&[u8; 32]>) -> Result<Vec<u8>, FrameError> {
        self.check()?;
        match (self.mode, key, &self.tag) {
            (Mode::Plaintext, _, _) => Ok(self.payload.clone()),
            (Mode::Aes256Gcm, Some(key), Some(tag)) => {
                let mut sealed = self.payload.clone();
                sealed.extend_from_slice(tag);
                aes_gcm_open(key, &self.nonce, &self.header()?, &sealed)
            }
            (Mode::Aes256Gcm, _, _) => Err(FrameError::Authentication),
        }
    }
}

/// AES-256-GCM encryption; returns ciphertext followed by the tag.
pub fn aes_gcm_seal(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key))
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("in-memory AES-GCM encryption")
}

pub fn aes_gcm_open(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, FrameError> {
    Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key))
        .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad })
        .map_err(|_| FrameError::Authentication)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published AES-256-GCM vectors: all-zero key and nonce.
    #[test]
    fn known_answer_vectors() {
        let key = [0u8; 32];
        let nonce = [0u8; 12];
        assert_eq!(hex::encode(aes_gcm_seal(&key, &nonce, &[], &[])), "530f8afbc74536b9a963b4f1c4cb738b");
        assert_eq!(
            hex::encode(aes_gcm_seal(&key, &nonce, &[], &[0u8; 16])),
            "cea7403d4d606b6e074ec5d3baf39d18d0d1c8a799996bf0265b98b5d48ab919"
        );
    }

    #[test]
    fn layout_is_bit_exact() {
        let f = Frame::plaintext(0x0102030405060708, [9; 12], b"hi");
        let bytes = f.encode().unwrap();
        let mut expected = b"QSLC".to_vec();
        expected.push(0);
        expected.extend([0u8; 16]);
        expected.extend([1, 2, 3, 4, 5, 6, 7, 8]);
        expected.extend([9u8; 12]);
        expected.extend([0, 0, 0, 2]);
        expected.extend(b"hi");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn sealed_frame_round_trips_and_rejects_tampering() {
        let key = [7u8; 32];
        let f = Frame::seal(&key, KeyId(0xabc), 5, [1; 12], b"hello").unwrap();
        assert_ne!(f.payload, b"hello");
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 5 + TAG_LEN);
        let back = Frame::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.open(Some(&key)).unwrap(), b"hello");
        assert_eq!(back.open(Some(&[8u8; 32])), Err(FrameError::Authentication));
        let mut header_flip = bytes.clone();
        header_flip[28] ^= 1;
        assert_eq!(Frame::decode(&header_flip).unwrap().open(Some(&key)), Err(FrameError::Authentication));
    }

    #[test]
    fn malformed_input_is_rejected() {
        let bytes = Frame::plaintext(1, [0; 12], b"abc").encode().unwrap();
        assert!(matches!(Frame::decode(&bytes[..10]), Err(FrameError::Truncated { .. })));
        assert!(matches!(Frame::decode(&bytes[..bytes.len() - 1]), Err(FrameError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Frame::decode(&extra), Err(FrameError::Trailing(1)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Frame::decode(&magic), Err(FrameError::BadMagic(_))));
        let mut mode = bytes;
        mode[4] = 9;
        assert_eq!(Frame::decode(&mode), Err(FrameError::UnknownMode(9)));
    }
}
