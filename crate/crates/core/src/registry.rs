//! User ↔ watermark bindings kept by the model owner.
//!
//! The backing file holds one JSON object per line:
//! `{"user_id": .., "bits": <hex>, "d_w": .., "created_at": <ISO-8601>, "note": ..}`
//! where `bits` packs the message most-significant-bit first, zero-padded to
//! `ceil(d_w / 4)` hex digits. Mutations append to the file before returning.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Shortest message for which the detection statistics are meaningful.
pub const MIN_MESSAGE_BITS: usize = 8;

/// Resampling budget when a fresh message collides with a registered one.
pub const MAX_COLLISION_RETRIES: usize = 64;

/// A binary watermark payload `m ∈ {0,1}^d_w`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WatermarkMessage {
    bits: Vec<u8>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(invalid(format!("watermark bit must be 0 or 1, got {b}")));
        }
        Ok(Self { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self {
            bits: bits.iter().map(|&b| b as u8).collect(),
        }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse_binary(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(invalid(format!("'{other}' is not a bit"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bits as 0.0 / 1.0 targets.
    pub fn as_targets(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Bits recentred to ±1.
    pub fn as_signed(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| 2.0 * b as f32 - 1.0).collect()
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn to_binary_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|nib| {
                let v = nib
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (i, &b)| acc | ((b as u32) << (3 - i)));
                char::from_digit(v, 16).unwrap()
            })
            .collect()
    }

    pub fn from_hex(hex: &str, d_w: usize) -> Result<Self> {
        let digits = d_w.div_ceil(4);
        if hex.len() != digits {
            return Err(invalid(format!(
                "expected {digits} hex digits for {d_w} bits, got {}",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| invalid(format!("'{c}' is not a hex digit")))?;
            bits.extend((0..4).map(|i| ((v >> (3 - i)) & 1) as u8));
        }
        if bits[d_w..].iter().any(|&b| b != 0) {
            return Err(invalid("nonzero padding bits in hex message"));
        }
        bits.truncate(d_w);
        Ok(Self { bits })
    }
}

/// Draws `m ~ Ber(0.5)^d_w`.
pub fn sample_message(d_w: usize, rng: &mut Rng) -> Result<WatermarkMessage> {
    if d_w < MIN_MESSAGE_BITS {
        return Err(invalid(format!(
            "watermark length {d_w} is below the minimum of {MIN_MESSAGE_BITS}"
        )));
    }
    Ok(WatermarkMessage {
        bits: (0..d_w).map(|_| rng.bit() as u8).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryRecord {
    pub user_id: String,
    pub message: WatermarkMessage,
    pub created_at: String,
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    user_id: String,
    bits: String,
    d_w: usize,
    created_at: String,
    note: String,
}

impl From<&RegistryRecord> for RecordLine {
    fn from(r: &RegistryRecord) -> Self {
        Self {
            user_id: r.user_id.clone(),
            bits: r.message.to_hex(),
            d_w: r.message.len(),
            created_at: r.created_at.clone(),
            note: r.note.clone(),
        }
    }
}

/// Ordered, append-only collection of records backed by a JSON-lines file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    path: PathBuf,
    d_w: usize,
    records: Vec<RegistryRecord>,
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Registry {
    /// Creates an empty registry file (truncating any existing one).
    pub fn create(path: impl AsRef<Path>, d_w: usize) -> Result<Self> {
        if d_w < MIN_MESSAGE_BITS {
            return Err(invalid(format!("watermark length {d_w} is below {MIN_MESSAGE_BITS}")));
        }
        File::create(path.as_ref())?;
        Ok(Self {
            path: path.as_ref().to_path_buf(),
            d_w,
            records: Vec::new(),
        })
    }

    /// Loads an existing file, or creates it when absent.
    pub fn open_or_create(path: impl AsRef<Path>, d_w: usize) -> Result<Self> {
        if path.as_ref().exists() {
            let r = Self::load(path)?;
            if !r.records.is_empty() && r.d_w != d_w {
                return Err(invalid(format!(
                    "registry holds {}-bit messages, requested {d_w}",
                    r.d_w
                )));
            }
            Ok(Self { d_w, ..r })
        } else {
            Self::create(path, d_w)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let mut records: Vec<RegistryRecord> = Vec::new();
        let mut users = HashSet::new();
        let mut messages = HashSet::new();
        let mut d_w = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |msg: String| Error::RegistryFormat { line: line_no, msg };
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            let message =
                WatermarkMessage::from_hex(&rec.bits, rec.d_w).map_err(|e| fail(e.to_string()))?;
            match d_w {
                None => d_w = Some(rec.d_w),
                Some(d) if d != rec.d_w => {
                    return Err(fail(format!("message length {} differs from {d}", rec.d_w)))
                }
                _ => {}
            }
            if !users.insert(rec.user_id.clone()) {
                return Err(fail(format!("duplicate user '{}'", rec.user_id)));
            }
            if !messages.insert(message.clone()) {
                return Err(fail("duplicate watermark message".into()));
            }
            records.push(RegistryRecord {
                user_id: rec.user_id,
                message,
                created_at: rec.created_at,
                note: rec.note,
            });
        }
        Ok(Self {
            path: path.as_ref().to_path_buf(),
            d_w: d_w.unwrap_or(0),
            records,
        })
    }

    /// Rewrites the whole backing file from memory.
    pub fn save(&self) -> Result<()> {
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for r in &self.records {
                writeln!(f, "{}", serde_json::to_string(&RecordLine::from(r))?)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    fn append(&self, new: &[RegistryRecord]) -> Result<()> {
        let mut f = OpenOptions::new().append(true).create(true).open(&self.path)?;
        let mut buf = String::new();
        for r in new {
            buf.push_str(&serde_json::to_string(&RecordLine::from(r))?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn message_bits(&self) -> usize {
        self.d_w
    }

    pub fn records(&self) -> &[RegistryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, user_id: &str) -> Option<&RegistryRecord> {
        self.records.iter().find(|r| r.user_id == user_id)
    }

    fn fresh_message(&self, taken: &HashSet<WatermarkMessage>, rng: &mut Rng) -> Result<WatermarkMessage> {
        for _ in 0..MAX_COLLISION_RETRIES {
            let m = sample_message(self.d_w, rng)?;
            if !taken.contains(&m) {
                return Ok(m);
            }
        }
        Err(Error::MessageCollision(MAX_COLLISION_RETRIES))
    }

    /// Assigns a fresh unique watermark to `user_id` and persists it.
    pub fn register_user(&mut self, user_id: &str, rng: &mut Rng) -> Result<&RegistryRecord> {
        self.register_with_note(user_id, "", rng)
    }

    pub fn register_with_note(
        &mut self,
        user_id: &str,
        note: &str,
        rng: &mut Rng,
    ) -> Result<&RegistryRecord> {
        self.register_many(&[(user_id.to_string(), note.to_string())], rng)?;
        Ok(self.records.last().unwrap())
    }

    /// Registers several `(user_id, note)` pairs with a single file append.
    pub fn register_many(&mut self, users: &[(String, String)], rng: &mut Rng) -> Result<()> {
        let mut ids: HashSet<&str> = self.records.iter().map(|r| r.user_id.as_str()).collect();
        for (u, _) in users {
            if u.is_empty() {
                return Err(invalid("user id must not be empty"));
            }
            if !ids.insert(u.as_str()) {
                return Err(Error::DuplicateUser(u.clone()));
            }
        }
        let mut taken: HashSet<WatermarkMessage> =
            self.records.iter().map(|r| r.message.clone()).collect();
        let created_at = now_utc();
        let mut new = Vec::with_capacity(users.len());
        for (u, note) in users {
            let message = self.fresh_message(&taken, rng)?;
            taken.insert(message.clone());
            new.push(RegistryRecord {
                user_id: u.clone(),
                message,
                created_at: created_at.clone(),
                note: note.clone(),
            });
        }
        self.append(&new)?;
        self.records.extend(new);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_is_msb_first_and_padded() {
        let m = WatermarkMessage::parse_binary("1010000111").unwrap();
        assert_eq!(m.to_hex(), "a1c");
        assert_eq!(WatermarkMessage::from_hex("a1c", 10).unwrap(), m);
        assert!(WatermarkMessage::from_hex("a1d", 10).is_err());
    }

    #[test]
    fn sample_is_deterministic() {
        let a = sample_message(16, &mut Rng::new(7)).unwrap();
        let b = sample_message(16, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(sample_message(7, &mut Rng::new(7)).is_err());
    }

    #[test]
    fn distinct_seeds_give_distinct_messages() {
        let a = sample_message(48, &mut Rng::new(1)).unwrap();
        let b = sample_message(48, &mut Rng::new(2)).unwrap();
        assert!(a.hamming(&b) > 0);
    }
}
