//! Byte-level corpus, prompt suites and the synthetic toy corpus.

use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::{Error, Result, TokenId};

pub const VOCAB_SIZE: usize = 256;

pub fn encode(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`encode`]. Tokens above 255 are a data error.
pub fn decode(tokens: &[TokenId]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Data(format!("token {t} is not a byte"))))
        .collect()
}

/// Lossy text view of a token sequence.
pub fn decode_lossy(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<TokenId>,
    train_end: usize,
    sha256: String,
}

impl Corpus {
    /// Splits off the last `round(len · eval_fraction)` bytes as the eval set.
    pub fn from_bytes(bytes: &[u8], eval_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::config(format!(
                "eval_fraction must be in [0, 1), got {eval_fraction}"
            )));
        }
        let eval_len = (bytes.len() as f64 * eval_fraction).round() as usize;
        Ok(Corpus {
            tokens: encode(bytes),
            train_end: bytes.len() - eval_len,
            sha256: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path, eval_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from_io(e, path))?;
        Corpus::from_bytes(&bytes, eval_fraction)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn train(&self) -> &[TokenId] {
        &self.tokens[..self.train_end]
    }

    pub fn eval(&self) -> &[TokenId] {
        &self.tokens[self.train_end..]
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn load_corpus(path: &Path, eval_fraction: f64) -> Result<Corpus> {
    Corpus::load(path, eval_fraction)
}

/// Named prompt categories in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSuite {
    categories: Vec<(String, Vec<String>)>,
}

impl PromptSuite {
    pub fn new(categories: Vec<(String, Vec<String>)>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Data("prompt suite has no categories".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, prompts) in &categories {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate prompt category {name:?}")));
            }
            if prompts.is_empty() {
                return Err(Error::Data(format!("prompt category {name:?} is empty")));
            }
        }
        Ok(PromptSuite { categories })
    }

    pub fn categories(&self) -> &[(String, Vec<String>)] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(category, prompt)` pairs in order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.categories
            .iter()
            .flat_map(|(c, ps)| ps.iter().map(move |p| (c.as_str(), p.as_str())))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: RawSuite = serde_json::from_str(s)?;
        PromptSuite::new(raw.0)
    }

    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        for (c, ps) in &self.categories {
            m.insert(c.clone(), serde_json::json!(ps));
        }
        serde_json::to_string_pretty(&m).expect("strings serialise")
    }
}

pub fn load_prompt_suite(path: &Path) -> Result<PromptSuite> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::from_io(e, path))?;
    PromptSuite::from_json(&s)
}

/// Keeps duplicate keys so they can be rejected instead of silently merged.
struct RawSuite(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for RawSuite {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawSuite;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping category names to prompt lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<RawSuite, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, Vec<String>>()? {
                    out.push((k, v));
                }
                Ok(RawSuite(out))
            }
        }
        d.deserialize_map(V)
    }
}

const SUBJECTS: &[&str] = &[
    "the cat",
    "the dog",
    "a robot",
    "the teacher",
    "my friend",
    "the farmer",
    "a bird",
    "the king",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "helps", "follows", "paints", "calls", "builds",
];
const OBJECTS: &[&str] = &[
    "the house",
    "a red ball",
    "the river",
    "an old book",
    "the garden",
    "a small boat",
    "the moon",
    "a green tree",
];
const PLACES: &[&str] = &[
    "in the morning",
    "at night",
    "near the sea",
    "after school",
    "every day",
];
const NAMES: &[&str] = &["alice", "bob", "carol", "dave", "erin"];
const FUNCS: &[&str] = &["add", "sub", "mul", "max", "min"];

fn sentence(r: &mut rng::Rng) -> String {
    let s = SUBJECTS.choose(r).unwrap();
    let v = VERBS.choose(r).unwrap();
    let o = OBJECTS.choose(r).unwrap();
    if r.random_bool(0.4) {
        format!("{s} {v} {o} {}.", PLACES.choose(r).unwrap())
    } else {
        format!("{s} {v} {o}.")
    }
}

fn arithmetic(r: &mut rng::Rng) -> String {
    let a: u32 = r.random_range(0..10);
    let b: u32 = r.random_range(0..10);
    format!("{a} plus {b} is {}.", a + b)
}

fn dialogue(r: &mut rng::Rng) -> String {
    let n = NAMES.choose(r).unwrap();
    format!("{n}: {}", sentence(r))
}

fn code(r: &mut rng::Rng) -> String {
    let f = FUNCS.choose(r).unwrap();
    let a: u32 = r.random_range(0..10);
    let b: u32 = r.random_range(0..10);
    format!("let x = {f}({a}, {b});")
}

/// Deterministic text from a small grammar: plain sentences, dialogue lines,
/// arithmetic facts and code-like statements, one per line.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    let mut r = rng::derive(seed, "synthetic-corpus");
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let line = match r.random_range(0..10) {
            0..=4 => sentence(&mut r),
            5..=6 => dialogue(&mut r),
            7..=8 => arithmetic(&mut r),
            _ => code(&mut r),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Eight categories of grammar-style prompts.
pub fn default_prompt_suite() -> PromptSuite {
    let c = |name: &str, ps: &[&str]| (name.to_string(), ps.iter().map(|s| s.to_string()).collect());
    PromptSuite::new(vec![
        c("writing", &["the cat sees", "a robot paints the", "the king builds a"]),
        c("roleplay", &["alice: the dog", "bob: my friend calls", "carol: a bird"]),
        c(
            "reasoning",
            &["the teacher helps the", "my friend follows", "the farmer finds an"],
        ),
        c("math", &["3 plus 4 is", "7 plus 2", "1 plus"]),
        c("coding", &["let x = add(", "let x = max(3,", "let x = mu"]),
        c(
            "extraction",
            &["dave: the king", "the dog likes a red", "erin: a robot sees"],
        ),
        c("stem", &["a bird follows the moon", "the river", "a small boat"]),
        c("humanities", &["an old book", "the king calls the", "the garden at"]),
    ])
    .expect("built-in suite is valid")
}
