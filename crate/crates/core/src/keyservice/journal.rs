// SPDX-License-Identifier: Apache-2.0

//! Append-only, sealed record of store mutations.
//!
//! Each record is `u32-BE length ‖ AeadEnvelope`, sealed under the key
//! service's sealing key with AAD `"journal|-|<index>"`, so records cannot
//! be reordered, dropped from the middle, or read outside the enclave.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use super::{KsError, Mutation};
use crate::crypto::{aead_decrypt, aead_encrypt, context_aad, AeadEnvelope, Purpose, SymKey};

pub struct Journal {
    file: File,
    key: SymKey,
    next_index: u64,
}

fn aad(index: u64) -> Vec<u8> {
    context_aad(Purpose::Journal, "", &index.to_string())
}

fn io(e: std::io::Error) -> KsError {
    KsError::Journal(e.to_string())
}

impl Journal {
    pub(crate) fn open(path: &Path, key: SymKey) -> Result<(Journal, Vec<Mutation>), KsError> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).map_err(io)?;
        let mut mutations = Vec::new();
        let mut pos = 0usize;
        while pos < raw.len() {
            let len_bytes: [u8; 4] = raw
                .get(pos..pos + 4)
                .ok_or_else(|| KsError::Journal("truncated record header".into()))?
                .try_into()
                .unwrap();
            let len = u32::from_be_bytes(len_bytes) as usize;
            let body = raw.get(pos + 4..pos + 4 + len).ok_or_else(|| KsError::Journal("truncated record".into()))?;
            let env = AeadEnvelope::from_bytes(body).map_err(|e| KsError::Journal(e.to_string()))?;
            let pt = aead_decrypt(&key, &env, &aad(mutations.len() as u64))
                .map_err(|_| KsError::Journal(format!("record {} failed integrity check", mutations.len())))?;
            let m: Mutation = serde_json::from_slice(&pt).map_err(|e| KsError::Journal(e.to_string()))?;
            mutations.push(m);
            pos += 4 + len;
        }
        let next_index = mutations.len() as u64;
        Ok((Journal { file, key, next_index }, mutations))
    }

    pub(crate) fn append(&mut self, m: &Mutation) -> Result<(), KsError> {
        let pt = serde_json::to_vec(m).map_err(|e| KsError::Journal(e.to_string()))?;
        let env = aead_encrypt(&self.key, &pt, &aad(self.next_index)).map_err(|e| KsError::Journal(e.to_string()))?;
        let bytes = env.to_bytes();
        let mut rec = Vec::with_capacity(4 + bytes.len());
        rec.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        rec.extend_from_slice(&bytes);
        self.file.write_all(&rec).map_err(io)?;
        self.next_index += 1;
        Ok(())
    }

    pub(crate) fn flush(&mut self) -> Result<(), KsError> {
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}
