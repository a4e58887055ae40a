//! GPT-2 byte-level BPE.
//!
//! Reads the published `vocab.json` / `merges.txt` pair. Text is split with
//! the GPT-2 pretokenization pattern, each chunk's UTF-8 bytes are mapped to
//! printable stand-in characters, and merges are applied lowest rank first.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;

use super::Tokenizer;
use crate::error::{Error, Result};

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE).expect("valid pattern"))
}

/// GPT-2's reversible byte → printable character table.
pub fn byte_encoder() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(u32::from('¡')..=u32::from('¬'))
        .chain(u32::from('®')..=u32::from('ÿ'))
        .collect();
    let mut table = ['\0'; 256];
    for &b in &printable {
        table[b as usize] = char::from_u32(b).expect("latin-1 range");
    }
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            table[b as usize] = char::from_u32(256 + extra).expect("valid codepoint");
            extra += 1;
        }
    }
    table
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    /// (left id, right id) → (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    byte_to_id: [u32; 256],
    char_to_byte: HashMap<char, u8>,
}

impl BpeVocab {
    /// Builds a vocabulary from a token→id map and merge pairs in rank order.
    pub fn new(token_to_id: HashMap<String, u32>, merges: &[(String, String)]) -> Result<Self> {
        let err = |m: String| Error::Tokenizer(m);
        let n = token_to_id.len();
        let mut id_to_token: Vec<Option<String>> = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| err(format!("id {id} of `{tok}` is outside the dense range 0..{n}")))?;
            if let Some(prev) = slot {
                return Err(err(format!("duplicate id {id} for `{prev}` and `{tok}`")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| err(format!("id {i} is unused"))))
            .collect::<Result<_>>()?;

        let encoder = byte_encoder();
        let mut byte_to_id = [0u32; 256];
        let mut char_to_byte = HashMap::with_capacity(256);
        for (b, &c) in encoder.iter().enumerate() {
            let id = token_to_id
                .get(&c.to_string())
                .ok_or_else(|| err(format!("base byte token for 0x{b:02x} (`{c}`) is missing")))?;
            byte_to_id[b] = *id;
            char_to_byte.insert(c, b as u8);
        }

        let mut merge_map = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| err(format!("merge {} `{a} {b}` references unknown symbol `{s}`", rank + 1)))
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let merged = lookup(&format!("{a}{b}"))?;
            merge_map.entry((ia, ib)).or_insert((rank as u32, merged));
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            merges: merge_map,
            byte_to_id,
            char_to_byte,
        })
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    fn bpe(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| self.byte_to_id[b as usize]).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank);
            let Some(&(rank, merged)) = best else { break };
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && self.merges.get(&(ids[i], ids[i + 1])).is_some_and(|m| m.0 == rank) {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Raw bytes for `ids` (may be invalid UTF-8 for arbitrary id runs).
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} outside vocabulary of {}", self.id_to_token.len())))?;
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => out.push(b),
                    // special tokens such as <|endoftext|> are plain ASCII
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Tokenizer for BpeVocab {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for m in pretokenizer().find_iter(text) {
            let m = m.expect("pretokenizer pattern never backtracks past its limit");
            self.bpe(m.as_str().as_bytes(), &mut out);
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
    }

    fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }
}

/// Loads a GPT-2 style `vocab.json` (token → id) and `merges.txt` (optional
/// `#` header line, then one `left right` pair per line).
pub fn load_bpe(vocab_file: impl AsRef<Path>, merges_file: impl AsRef<Path>) -> Result<BpeVocab> {
    let (vp, mp) = (vocab_file.as_ref(), merges_file.as_ref());
    let vocab_text = std::fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?;
    let merges_text = std::fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
    parse_bpe(&vocab_text, &merges_text)
}

pub fn parse_bpe(vocab_json: &str, merges_txt: &str) -> Result<BpeVocab> {
    let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)
        .map_err(|e| Error::Tokenizer(format!("vocab is not a JSON object of ids: {e}")))?;
    let mut merges = Vec::new();
    for (i, line) in merges_txt.lines().enumerate() {
        if (i == 0 && line.starts_with('#')) || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Tokenizer(format!(
                    "merges line {}: expected `left right`, got {line:?}",
                    i + 1
                )))
            }
        }
    }
    BpeVocab::new(token_to_id, &merges)
}
