//! Binary checkpoint format.
//!
//! ```text
//! "IMOBE-CKPT\0" | 0x01 | agent_id | kind | accessibility | home_container
//!               | lifecycle | mailbox (u32 count, then envelopes) | internal
//!               | sha256(everything before)
//! ```
//!
//! Every variable-size field is a u32 little-endian length followed by the
//! bytes. Envelopes are stored in their canonical JSON encoding.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kinds::{Accessibility, AgentKind};
use crate::protocol::{decode, encode, MessageEnvelope};

use super::{AgentDescriptor, Lifecycle};

pub const MAGIC: &[u8; 11] = b"IMOBE-CKPT\0";
pub const FORMAT_VERSION: u8 = 0x01;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("checkpoint digest mismatch")]
    DigestMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to bring an agent back.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentImage {
    pub descriptor: AgentDescriptor,
    pub lifecycle: Lifecycle,
    pub mailbox: Vec<MessageEnvelope>,
    pub internal: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointBlob {
    bytes: Vec<u8>,
}

impl CheckpointBlob {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        CheckpointBlob { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Hex of the stored trailer, whether or not it verifies.
    pub fn digest(&self) -> String {
        let start = self.bytes.len().saturating_sub(DIGEST_LEN);
        hex::encode(&self.bytes[start..])
    }

    pub fn verify(&self) -> Result<(), CheckpointError> {
        if self.bytes.len() < MAGIC.len() + 1 + DIGEST_LEN {
            return Err(CheckpointError::Malformed("too short".into()));
        }
        let (body, trailer) = self.bytes.split_at(self.bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CheckpointError::DigestMismatch);
        }
        Ok(())
    }

    pub fn decode(&self) -> Result<AgentImage, CheckpointError> {
        self.verify()?;
        let body = &self.bytes[..self.bytes.len() - DIGEST_LEN];
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::Malformed("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Malformed(format!("unsupported version {version}")));
        }
        let agent_id = r.string()?;
        let kind = AgentKind::from_code(r.byte_field()?)
            .ok_or_else(|| CheckpointError::Malformed("unknown agent kind".into()))?;
        let accessibility = match r.byte_field()? {
            0 => Accessibility::Public,
            1 => Accessibility::Private,
            other => return Err(CheckpointError::Malformed(format!("accessibility {other}"))),
        };
        let home_container = r.string()?;
        let lifecycle = Lifecycle::from_code(r.byte_field()?)
            .ok_or_else(|| CheckpointError::Malformed("unknown lifecycle".into()))?;
        let count = r.u32()? as usize;
        let mut mailbox = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let raw = r.field()?;
            mailbox.push(decode(raw).map_err(|e| CheckpointError::Malformed(format!("mailbox: {e}")))?);
        }
        let internal = r.field()?.to_vec();
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(AgentImage {
            descriptor: AgentDescriptor {
                agent_id,
                kind,
                accessibility,
                home_container,
            },
            lifecycle,
            mailbox,
            internal,
        })
    }
}

fn put_field(buf: &mut Vec<u8>, bytes: &[u8]) {
    let len = u32::try_from(bytes.len()).expect("checkpoint field under 4 GiB");
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub fn encode_image(image: &AgentImage) -> CheckpointBlob {
    let d = &image.descriptor;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    put_field(&mut buf, d.agent_id.as_bytes());
    put_field(&mut buf, &[d.kind.code()]);
    let access = match d.accessibility {
        Accessibility::Public => 0,
        Accessibility::Private => 1,
    };
    put_field(&mut buf, &[access]);
    put_field(&mut buf, d.home_container.as_bytes());
    put_field(&mut buf, &[image.lifecycle.code()]);
    let count = u32::try_from(image.mailbox.len()).expect("mailbox under 4G entries");
    buf.extend_from_slice(&count.to_le_bytes());
    for envelope in &image.mailbox {
        put_field(&mut buf, &encode(envelope));
    }
    put_field(&mut buf, &image.internal);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    CheckpointBlob { bytes: buf }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let bytes = self.take(4)?;
        Ok(u32::from_le_bytes(bytes.try_into().expect("four bytes")))
    }

    fn field(&mut self) -> Result<&'a [u8], CheckpointError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn byte_field(&mut self) -> Result<u8, CheckpointError> {
        match self.field()? {
            [b] => Ok(*b),
            _ => Err(CheckpointError::Malformed("expected one byte".into())),
        }
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.field()?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }
}
