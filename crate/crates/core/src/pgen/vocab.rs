use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::PgError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token-to-id map with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Tokens seen at least `min_freq` times, most frequent first and
    /// alphabetically among equals.
    pub fn build<'a, I, S>(sequences: I, min_freq: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq.as_ref() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t.to_string())).collect();
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a token, [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One encoded source/target pair.
///
/// Extended ids: ids below the target vocabulary size are vocabulary ids,
/// `V + k` is the `k`-th distinct source token missing from the target
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Source ids in the source vocabulary.
    pub src: Vec<usize>,
    /// Source tokens as extended target ids.
    pub src_ext: Vec<usize>,
    /// Source tokens outside the target vocabulary, by extended offset.
    pub oov: Vec<String>,
    /// Target extended ids ending with [`EOS`].
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn new(
        source: &[String],
        target: Option<&[String]>,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<Example, PgError> {
        if source.is_empty() {
            return Err(PgError::EmptySource);
        }
        let v = tgt_vocab.len();
        let mut oov: Vec<String> = Vec::new();
        let src_ext = source
            .iter()
            .map(|t| match tgt_vocab.get(t) {
                Some(id) if id != UNK => id,
                _ => {
                    let k = oov.iter().position(|o| o == t).unwrap_or_else(|| {
                        oov.push(t.clone());
                        oov.len() - 1
                    });
                    v + k
                }
            })
            .collect();
        let tgt = target
            .map(|tg| {
                tg.iter()
                    .map(|t| match tgt_vocab.get(t) {
                        Some(id) => id,
                        None => oov.iter().position(|o| o == t).map_or(UNK, |k| v + k),
                    })
                    .chain(std::iter::once(EOS))
                    .collect()
            })
            .unwrap_or_default();
        Ok(Example { src: source.iter().map(|t| src_vocab.id(t)).collect(), src_ext, oov, tgt })
    }

    /// Token text of an extended id.
    pub fn token<'a>(&'a self, id: usize, tgt_vocab: &'a Vocabulary) -> &'a str {
        if id >= tgt_vocab.len() {
            &self.oov[id - tgt_vocab.len()]
        } else {
            tgt_vocab.token(id).unwrap_or(RESERVED[UNK])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn reserved_ids_and_floor() {
        let data = [toks("a b b c c c"), toks("c d")];
        let v = Vocabulary::build(&data, 2);
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
        assert_eq!(v.get("c"), Some(4));
        assert_eq!(v.get("b"), Some(5));
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn extended_ids_for_copyable_tokens() {
        let v = Vocabulary::build(&[toks("x y x y")], 1);
        let e = Example::new(&toks("x Koivu y Koivu Selänne"), Some(&toks("Koivu x Selänne z")), &v, &v).unwrap();
        let n = v.len();
        assert_eq!(e.src_ext, vec![v.id("x"), n, v.id("y"), n, n + 1]);
        assert_eq!(e.tgt, vec![n, v.id("x"), n + 1, UNK, EOS]);
        assert_eq!(e.token(n + 1, &v), "Selänne");
        assert!(matches!(Example::new(&[], None, &v, &v), Err(PgError::EmptySource)));
    }
}
