//! Byte-level BPE tokenizer compatible with CLIP text encoders.
//!
//! Reads the Hugging Face `vocab.json` / `merges.txt` pair. Text is
//! whitespace-normalized and lower-cased, split with the CLIP pre-tokenizer
//! pattern, mapped through the GPT-2 byte-to-unicode table and merged by BPE
//! rank, with `</w>` marking the end of each word.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const START: &str = "<|startoftext|>";
const END: &str = "<|endoftext|>";
const PATTERN: &str =
    r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+";

/// Tokenizer section of an encoder manifest. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPreprocessing {
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub context_length: usize,
    pub pad_token_id: u32,
    /// Name of the attention-mask input, if the graph takes one.
    #[serde(default)]
    pub attention_mask_input: Option<String>,
}

pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    start_id: u32,
    end_id: u32,
    cache: Mutex<HashMap<String, Vec<String>>>,
}

impl std::fmt::Debug for ClipTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipTokenizer")
            .field("vocab_size", &self.encoder.len())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

/// GPT-2 reversible byte → printable-unicode table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (b'!' as u32..=b'~' as u32).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}

impl ClipTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab_text).map_err(|e| Error::Parse {
            path: vocab.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        let mut pairs = Vec::new();
        for (idx, line) in merges_text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Parse {
                        path: merges.to_path_buf(),
                        line: idx + 1,
                        message: "expected two space-separated symbols".into(),
                    })
                }
            }
        }
        Self::new(encoder, pairs)
    }

    pub fn new(encoder: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let start_id = *encoder
            .get(START)
            .ok_or_else(|| Error::Encoder(format!("vocabulary lacks {START}")))?;
        let end_id = *encoder
            .get(END)
            .ok_or_else(|| Error::Encoder(format!("vocabulary lacks {END}")))?;
        let ranks = merges.into_iter().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(ClipTokenizer {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern: Regex::new(&format!("(?i){PATTERN}")).expect("static pattern"),
            start_id,
            end_id,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn start_id(&self) -> u32 {
        self.start_id
    }

    pub fn end_id(&self) -> u32 {
        self.end_id
    }

    /// Token ids without the start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let word: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&word) {
                let id = self
                    .encoder
                    .get(&piece)
                    .ok_or_else(|| Error::Encoder(format!("token `{piece}` missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// `[start] tokens [end]` truncated and padded to `context_length`, plus the attention mask.
    pub fn encode_padded(&self, text: &str, context_length: usize, pad_id: u32) -> Result<(Vec<i64>, Vec<i64>)> {
        if context_length < 2 {
            return Err(Error::Encoder("context length must be at least 2".into()));
        }
        let mut tokens = self.encode(text)?;
        tokens.truncate(context_length - 2);
        let mut ids = Vec::with_capacity(context_length);
        ids.push(self.start_id as i64);
        ids.extend(tokens.iter().map(|&t| t as i64));
        ids.push(self.end_id as i64);
        let mut mask = vec![1i64; ids.len()];
        ids.resize(context_length, pad_id as i64);
        mask.resize(context_length, 0);
        Ok((ids, mask))
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        if let Some(hit) = self.cache.lock().unwrap().get(word) {
            return hit.clone();
        }
        let chars: Vec<char> = word.chars().collect();
        let mut parts: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((_, at)) = best else { break };
            let (first, second) = (parts[at].clone(), parts[at + 1].clone());
            // merge every occurrence of the best pair, left to right
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == first && parts[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
            if parts.len() == 1 {
                break;
            }
        }
        self.cache.lock().unwrap().insert(word.to_string(), parts.clone());
        parts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClipTokenizer {
        let table = bytes_to_unicode();
        let mut vocab: Vec<String> = table.iter().map(|c| c.to_string()).collect();
        vocab.extend(table.iter().map(|c| format!("{c}</w>")));
        let merges: Vec<(String, String)> = [("t", "h"), ("th", "e</w>"), ("a", "b"), ("ab", "c</w>")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        for (a, b) in &merges {
            vocab.push(format!("{a}{b}"));
        }
        vocab.push(START.into());
        vocab.push(END.into());
        let encoder = vocab.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        ClipTokenizer::new(encoder, merges).unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], '\u{120}');
    }

    #[test]
    fn merges_apply_by_rank() {
        let tok = tiny();
        let ids = tok.encode("The  ABC").unwrap();
        let the = tok.encoder["the</w>"];
        let abc = tok.encoder["abc</w>"];
        assert_eq!(ids, vec![the, abc]);
    }

    #[test]
    fn punctuation_splits_and_padding() {
        let tok = tiny();
        let ids = tok.encode("a: b").unwrap();
        assert_eq!(ids.len(), 3);
        let (padded, mask) = tok.encode_padded("a: b", 8, 0).unwrap();
        assert_eq!(padded.len(), 8);
        assert_eq!(padded[0], tok.start_id() as i64);
        assert_eq!(padded[4], tok.end_id() as i64);
        assert_eq!(mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        let (trunc, _) = tok.encode_padded("the the the the", 4, 0).unwrap();
        assert_eq!(trunc[3], tok.end_id() as i64);
    }
}
