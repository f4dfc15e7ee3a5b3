use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
/// Number of reserved ids preceding the character ids.
pub const RESERVED_IDS: usize = 3;

const SENTINELS: [char; RESERVED_IDS] = ['\u{2400}', '\u{FFFD}', '\u{2402}'];

/// Character ↔ id bijection. Reserved ids come first; characters follow in
/// order of first occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocabulary {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Vocab("cannot build a vocabulary from an empty stream".into()));
        }
        Ok(Self::from_chars(text.chars()))
    }

    /// Builds from several streams, in order.
    pub fn build_all<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let joined: String = texts.into_iter().collect();
        Self::build(&joined)
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Self {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            if !v.index.contains_key(&c) {
                v.index.insert(c, (v.chars.len() + RESERVED_IDS) as TokenId);
                v.chars.push(c);
            }
        }
        v
    }

    /// Vocabulary size including reserved ids.
    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED_IDS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        (id as usize)
            .checked_sub(RESERVED_IDS)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Non-reserved characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect()
    }

    /// Encodes, failing on the first unknown character.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        let unknown = self.unknown_chars(text);
        if !unknown.is_empty() {
            return Err(Error::Vocab(format!("unknown characters: {unknown:?}")));
        }
        Ok(self.encode(text))
    }

    /// Distinct characters of `text` missing from the vocabulary, in order.
    pub fn unknown_chars(&self, text: &str) -> Vec<char> {
        let mut out = Vec::new();
        for c in text.chars() {
            if self.id(c).is_none() && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Reserved ids render as sentinel glyphs.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match SENTINELS.get(id as usize) {
                Some(&s) => s,
                None => self.char_of(id).unwrap_or('\u{FFFD}'),
            })
            .collect()
    }

    /// Writes `<id>\t<char>` lines; tab, newline, carriage return and
    /// backslash are escaped.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (i, &c) in self.chars.iter().enumerate() {
            writeln!(w, "{}\t{}", i + RESERVED_IDS, escape(c))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let (id, c) = line.split_once('\t').ok_or_else(|| bad("expected <id>\\t<char>"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != chars.len() + RESERVED_IDS {
                return Err(bad("ids must be contiguous from 3"));
            }
            chars.push(unescape(c).ok_or_else(|| bad("expected one character"))?);
        }
        let v = Self::from_chars(chars.iter().copied());
        if v.chars.len() != chars.len() {
            return Err(Error::Vocab("duplicate characters in vocabulary file".into()));
        }
        Ok(v)
    }
}

fn escape(c: char) -> String {
    match c {
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c => c.to_string(),
    }
}

fn unescape(s: &str) -> Option<char> {
    match s {
        "\\t" => Some('\t'),
        "\\n" => Some('\n'),
        "\\r" => Some('\r'),
        "\\\\" => Some('\\'),
        _ => {
            let mut it = s.chars();
            let c = it.next()?;
            it.next().is_none().then_some(c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abab() {
        let v = Vocabulary::build("abab").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("ba"), vec![4, 3]);
        assert_eq!(v, Vocabulary::build("abab").unwrap());
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(Vocabulary::build("").is_err());
    }

    #[test]
    fn unknown_and_reserved() {
        let v = Vocabulary::build("天进").unwrap();
        assert_eq!(v.encode("天地"), vec![3, UNK]);
        assert_eq!(v.unknown_chars("天地地人"), vec!['地', '人']);
        assert_eq!(v.decode(&[BOS, 3, PAD, UNK]), "\u{2402}天\u{2400}\u{FFFD}");
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn file_roundtrip_with_escapes() {
        let v = Vocabulary::build("a\tb\n\\沙").unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3\ta\n4\t\\t\n"));
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
    }

    proptest! {
        #[test]
        fn roundtrip_on_known_chars(s in "\\PC{0,40}") {
            let v = Vocabulary::from_chars(s.chars().chain("x".chars()));
            let ids = v.encode(&s);
            prop_assert_eq!(ids.len(), s.chars().count());
            prop_assert_eq!(v.decode(&ids), s);
        }
    }
}
