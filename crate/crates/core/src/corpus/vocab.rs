use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Dense token-id mapping. Ids `0..3` are always BOS, PAD and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in [BOS, PAD, UNK] {
            v.insert(s);
        }
        v
    }

    /// Adds a token if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut v = Vocab::new();
        if tokens.len() < 3 || tokens[0] != BOS || tokens[1] != PAD || tokens[2] != UNK {
            return Err(Error::Input("vocab must start with <bos>, <pad>, <unk>".into()));
        }
        for t in &tokens[3..] {
            if v.index.contains_key(t) {
                return Err(Error::Input(format!("duplicate vocab token {t:?}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn pad(&self) -> u32 {
        1
    }

    pub fn unk(&self) -> u32 {
        2
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `id \t token` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{i}\t{t}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("vocab line {}: expected `id\\ttoken`", n + 1)))?;
            if id.parse::<usize>().ok() != Some(n) {
                return Err(Error::Input(format!("vocab line {}: ids must be dense", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        Vocab::from_tokens(tokens)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}
