use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

const MAX_CHARS_PER_WORD: usize = 100;

/// BERT-style basic tokenization followed by greedy longest-match WordPiece.
#[derive(Clone, Debug)]
pub struct WordPiece {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    lowercase: bool,
    unk: usize,
    cls: usize,
    sep: usize,
}

impl WordPiece {
    pub fn new(vocab: Vec<String>, lowercase: bool) -> Result<Self> {
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let special = |t: &str| {
            index.get(t).copied().ok_or_else(|| Error::Config(format!("wordpiece vocabulary lacks `{t}`")))
        };
        Ok(Self { unk: special("[UNK]")?, cls: special("[CLS]")?, sep: special("[SEP]")?, vocab, index, lowercase })
    }

    pub fn from_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect(), lowercase)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn cls(&self) -> usize {
        self.cls
    }

    pub fn sep(&self) -> usize {
        self.sep
    }

    fn basic_split(&self, word: &str) -> Vec<String> {
        let cleaned: String = if self.lowercase {
            word.to_lowercase().nfd().filter(|c| !is_combining_mark(*c)).collect()
        } else {
            word.to_string()
        };
        let mut out = Vec::new();
        let mut current = String::new();
        for ch in cleaned.chars() {
            if ch == '\u{0}' || ch == '\u{fffd}' || ch.is_control() {
                continue;
            }
            if ch.is_whitespace() {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            } else if is_punctuation(ch) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }

    fn wordpiece(&self, token: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = token.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut sub: String = chars[start..end].iter().collect();
                if start > 0 {
                    sub.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&sub) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Subword ids for one pre-split word; `[UNK]` when nothing survives.
    pub fn tokenize_word(&self, word: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for token in self.basic_split(word) {
            self.wordpiece(&token, &mut ids);
        }
        if ids.is_empty() {
            ids.push(self.unk);
        }
        ids
    }
}

fn is_punctuation(c: char) -> bool {
    let cp = c as u32;
    (33..=47).contains(&cp)
        || (58..=64).contains(&cp)
        || (91..=96).contains(&cp)
        || (123..=126).contains(&cp)
        || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}
