//! Byte-level BPE tokenizer (GPT-2 style `vocab.json` + `merges.txt`).
//!
//! Text is pre-tokenized into chunks (contractions, optionally
//! space-prefixed letter/number/symbol runs, whitespace runs), each chunk's
//! UTF-8 bytes are mapped into the printable proxy alphabet, and merges are
//! applied lowest-rank first within a chunk. `decode(encode(x)) == x` for
//! any valid UTF-8 input since every byte is in the base alphabet.

use std::collections::HashMap;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;

use crate::error::{Error, Result};

static LETTER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\p{L}").unwrap());
static NUMBER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\p{N}").unwrap());

fn is_letter(c: char) -> bool {
    LETTER.is_match(c.encode_utf8(&mut [0u8; 4]))
}

fn is_number(c: char) -> bool {
    NUMBER.is_match(c.encode_utf8(&mut [0u8; 4]))
}

/// The invertible byte -> printable-char map used by GPT-2 vocabularies.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let direct = (b'!'..=b'~')
        .chain(0xa1..=0xac)
        .chain(0xae..=0xff);
    for b in direct {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256 {
        if !assigned[b] {
            table[b] = char::from_u32(256 + n).unwrap();
            n += 1;
        }
    }
    table
}

/// Splits text into pre-token chunks following the GPT-2 pattern:
/// contractions, ` ?letters`, ` ?numbers`, ` ?symbols`, then whitespace runs
/// (a run followed by a non-space keeps its last character for the next
/// chunk).
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let mut chunks = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_end = |idx: usize| -> usize {
        if idx < n {
            chars[idx].0
        } else {
            text.len()
        }
    };
    let mut i = 0;
    while i < n {
        let rest = &text[chars[i].0..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            let end = i + c.chars().count();
            chunks.push(&text[chars[i].0..byte_end(end)]);
            i = end;
            continue;
        }
        let c = chars[i].1;
        let start = i;
        if !c.is_whitespace() {
            let class: fn(char) -> bool = if is_letter(c) {
                is_letter
            } else if is_number(c) {
                is_number
            } else {
                |c: char| !c.is_whitespace() && !is_letter(c) && !is_number(c)
            };
            let mut j = i + 1;
            while j < n && class(chars[j].1) {
                j += 1;
            }
            chunks.push(&text[chars[start].0..byte_end(j)]);
            i = j;
        } else if c == ' ' && i + 1 < n && !chars[i + 1].1.is_whitespace() {
            // optional-space prefix form: " word", " 123", " +#!"
            let next = chars[i + 1].1;
            let class: fn(char) -> bool = if is_letter(next) {
                is_letter
            } else if is_number(next) {
                is_number
            } else {
                |c: char| !c.is_whitespace() && !is_letter(c) && !is_number(c)
            };
            let mut j = i + 2;
            while j < n && class(chars[j].1) {
                j += 1;
            }
            chunks.push(&text[chars[start].0..byte_end(j)]);
            i = j;
        } else {
            let mut j = i;
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < n && j - i > 1 {
                // run followed by non-space: last whitespace char belongs to
                // the next chunk
                chunks.push(&text[chars[start].0..chars[j - 1].0]);
                i = j - 1;
            } else {
                chunks.push(&text[chars[start].0..byte_end(j)]);
                i = j;
            }
        }
    }
    chunks
}

#[derive(Debug)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_proxy: [char; 256],
    proxy_to_byte: HashMap<char, u8>,
}

impl BpeTokenizer {
    pub fn from_files(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path.as_ref())?;
        let merges_text = std::fs::read_to_string(merges_path.as_ref())?;
        Self::from_strs(&vocab_text, &merges_text)
    }

    pub fn from_strs(vocab_json: &str, merges: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Tokenizer(format!("malformed vocab: {e}")))?;
        if encoder.is_empty() {
            return Err(Error::Tokenizer("malformed vocab: empty".to_owned()));
        }
        let max_id = *encoder.values().max().unwrap() as usize;
        if max_id + 1 != encoder.len() {
            return Err(Error::Tokenizer(format!(
                "malformed vocab: {} entries but max id {max_id}",
                encoder.len()
            )));
        }
        let mut decoder = vec![String::new(); encoder.len()];
        for (tok, &id) in &encoder {
            decoder[id as usize] = tok.clone();
        }

        let mut ranks = HashMap::new();
        for (lineno, line) in merges.lines().enumerate() {
            if lineno == 0 && line.starts_with("#version") {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (a, b) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => (a, b),
                _ => {
                    return Err(Error::Tokenizer(format!(
                        "malformed merge entry at line {}: `{line}`",
                        lineno + 1
                    )))
                }
            };
            let merged = format!("{a}{b}");
            if !encoder.contains_key(a) || !encoder.contains_key(b) || !encoder.contains_key(&merged)
            {
                return Err(Error::Tokenizer(format!(
                    "unknown merge entry at line {}: `{line}`",
                    lineno + 1
                )));
            }
            ranks.insert((a.to_owned(), b.to_owned()), ranks.len());
        }

        let byte_to_proxy = bytes_to_unicode();
        let proxy_to_byte = byte_to_proxy
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(BpeTokenizer {
            encoder,
            decoder,
            ranks,
            byte_to_proxy,
            proxy_to_byte,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for chunk in pre_tokenize(text) {
            let mut word: Vec<String> = chunk
                .bytes()
                .map(|b| self.byte_to_proxy[b as usize].to_string())
                .collect();
            while word.len() > 1 {
                let mut best: Option<(usize, usize)> = None;
                for i in 0..word.len() - 1 {
                    if let Some(&rank) = self
                        .ranks
                        .get(&(word[i].clone(), word[i + 1].clone()))
                    {
                        if best.map_or(true, |(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((_, i)) = best else { break };
                let merged = format!("{}{}", word[i], word[i + 1]);
                word.splice(i..=i + 1, [merged]);
            }
            for piece in word {
                let id = self.encoder.get(&piece).ok_or_else(|| {
                    Error::Tokenizer(format!("piece `{piece}` missing from vocab"))
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_str(id)?;
            for c in tok.chars() {
                let b = self.proxy_to_byte.get(&c).ok_or_else(|| {
                    Error::Tokenizer(format!("token {id} contains non-proxy char {c:?}"))
                })?;
                bytes.push(*b);
            }
        }
        Ok(bytes)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Tokenizer(format!("decoded bytes are not valid UTF-8: {e}")))
    }

    /// Raw token string in the proxy alphabet (as stored in `vocab.json`).
    pub fn token_str(&self, id: u32) -> Result<&str> {
        self.decoder
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Tokenizer(format!("token id {id} out of range")))
    }

    /// Human-readable form of one token (lossy when the token holds a
    /// partial UTF-8 sequence).
    pub fn token_text(&self, id: u32) -> Result<String> {
        let tok = self.token_str(id)?;
        let bytes: Vec<u8> = tok
            .chars()
            .filter_map(|c| self.proxy_to_byte.get(&c).copied())
            .collect();
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Number of text bytes this token decodes to.
    pub fn token_byte_len(&self, id: u32) -> Result<usize> {
        Ok(self.token_str(id)?.chars().count())
    }

    /// First token id of `text` (used for scoring a multi-token target by
    /// its first token).
    pub fn first_token(&self, text: &str) -> Result<u32> {
        let ids = self.encode(text)?;
        ids.into_iter()
            .next()
            .ok_or_else(|| Error::Tokenizer("empty target text".to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tokenizer() -> BpeTokenizer {
        // base alphabet plus merges for "ab" and "Ġab"
        let mut vocab: Vec<(String, u32)> = bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut s = String::new();
                s.push(c);
                (s, i as u32)
            })
            .collect();
        vocab.sort_by(|x, y| x.0.cmp(&y.0));
        let mut map: HashMap<String, u32> = HashMap::new();
        for (i, (tok, _)) in vocab.into_iter().enumerate() {
            map.insert(tok, i as u32);
        }
        map.insert("ab".to_owned(), map.len() as u32);
        map.insert("\u{120}ab".to_owned(), map.len() as u32);
        let vocab_json = serde_json::to_string(&map).unwrap();
        let merges = "#version: 0.2\na b\n\u{120} ab\n";
        BpeTokenizer::from_strs(&vocab_json, merges).unwrap()
    }

    #[test]
    fn empty_round_trip() {
        let tok = tiny_tokenizer();
        let ids = tok.encode("").unwrap();
        assert!(ids.is_empty());
        assert_eq!(tok.decode(&ids).unwrap(), "");
    }

    #[test]
    fn merges_apply_by_rank() {
        let tok = tiny_tokenizer();
        let ids = tok.encode("ab ab").unwrap();
        assert_eq!(ids.len(), 2, "`ab` and `Ġab` should each be one token");
        assert_eq!(tok.decode(&ids).unwrap(), "ab ab");
    }

    #[test]
    fn unknown_merge_entry_rejected() {
        let vocab = r#"{"a": 0, "b": 1}"#;
        let err = BpeTokenizer::from_strs(vocab, "a c\n").unwrap_err();
        assert!(err.to_string().contains("unknown merge entry"));
    }

    #[test]
    fn pre_tokenizer_matches_reference_semantics() {
        assert_eq!(pre_tokenize("The capital"), vec!["The", " capital"]);
        assert_eq!(pre_tokenize("don't"), vec!["don", "'t"]);
        assert_eq!(pre_tokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pre_tokenize("a \nb"), vec!["a", " ", "\n", "b"]);
        assert_eq!(pre_tokenize("x 12!"), vec!["x", " 12", "!"]);
        assert_eq!(pre_tokenize("hi  "), vec!["hi", "  "]);
        assert_eq!(pre_tokenize(" 's"), vec![" '", "s"]);
        assert_eq!(pre_tokenize("\n\n\nword"), vec!["\n\n", "\n", "word"]);
    }

    #[test]
    fn round_trip_over_random_utf8() {
        use rand::Rng;
        use rand::SeedableRng;
        let tok = tiny_tokenizer();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let len = rng.random_range(0..60);
            let s: String = (0..len)
                .map(|_| {
                    if rng.random_bool(0.7) {
                        rng.random_range(0x20u32..0x7f) // ascii
                    } else {
                        loop {
                            let c = rng.random_range(0u32..0x11_0000);
                            if char::from_u32(c).is_some() {
                                break c;
                            }
                        }
                    }
                })
                .map(|c| char::from_u32(c).unwrap())
                .collect();
            let ids = tok.encode(&s).unwrap();
            assert_eq!(tok.decode(&ids).unwrap(), s);
        }
    }
}
