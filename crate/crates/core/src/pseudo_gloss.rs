//! Pseudo-gloss extraction, the prototype bank and presence labels.
//!
//! A sentence's pseudo-glosses are the lemmas of its content words (nouns,
//! numerals, adverbs, pronouns, proper nouns, adjectives and verbs). Each
//! pseudo-gloss gets a fixed unit-norm embedding; column 0 of the bank is an
//! all-zero "non-sign" prototype.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Element, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosTag {
    Noun,
    Num,
    Adv,
    Pron,
    Propn,
    Adj,
    Verb,
    Other,
}

/// Word categories whose lemmas become pseudo-glosses.
pub const KEEP_TAGS: [PosTag; 7] = [
    PosTag::Noun,
    PosTag::Num,
    PosTag::Adv,
    PosTag::Pron,
    PosTag::Propn,
    PosTag::Adj,
    PosTag::Verb,
];

impl PosTag {
    pub fn is_kept(self) -> bool {
        self != PosTag::Other
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Num => "NUM",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Propn => "PROPN",
            PosTag::Adj => "ADJ",
            PosTag::Verb => "VERB",
            PosTag::Other => "OTHER",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NOUN" => PosTag::Noun,
            "NUM" => PosTag::Num,
            "ADV" => PosTag::Adv,
            "PRON" => PosTag::Pron,
            "PROPN" => PosTag::Propn,
            "ADJ" => PosTag::Adj,
            "VERB" => PosTag::Verb,
            "OTHER" => PosTag::Other,
            _ => return Err(Error::Config(format!("unknown POS tag {s:?}"))),
        })
    }
}

/// Lowercase token → (lemma, tag). Unknown tokens tag as themselves/OTHER.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosLexicon {
    entries: HashMap<String, (String, PosTag)>,
}

impl PosLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str, lemma: &str, tag: PosTag) {
        self.entries
            .insert(token.to_string(), (lemma.to_string(), tag));
    }

    pub fn tag(&self, token: &str) -> (String, PosTag) {
        self.entries
            .get(token)
            .cloned()
            .unwrap_or_else(|| (token.to_string(), PosTag::Other))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `token<TAB>lemma<TAB>TAG` per line, sorted by token.
    pub fn to_tsv(&self) -> String {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let (lemma, tag) = &self.entries[k];
            out.push_str(&format!("{k}\t{lemma}\t{tag}\n"));
        }
        out
    }

    pub fn parse_tsv(text: &str, source: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Format {
                    path: source.to_string(),
                    detail: format!("line {}: expected 3 tab-separated fields", n + 1),
                });
            }
            let tag = cols[2].parse().map_err(|e: Error| Error::Format {
                path: source.to_string(),
                detail: format!("line {}: {e}", n + 1),
            })?;
            lex.insert(cols[0], cols[1], tag);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Lemmas of content-word tokens, in first-occurrence order, deduplicated.
pub fn extract_pseudo_glosses<S: AsRef<str>>(tokens: &[S], lexicon: &PosLexicon) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for tok in tokens {
        let (lemma, tag) = lexicon.tag(tok.as_ref());
        if tag.is_kept() && seen.insert(lemma.clone()) {
            out.push(lemma);
        }
    }
    out
}

/// Sorted pseudo-gloss lemmas; index = position.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGlossVocab {
    lemmas: Vec<String>,
    index: HashMap<String, usize>,
}

impl PseudoGlossVocab {
    /// Sorted union of extracted lemmas. Pass the training split only.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], lexicon: &PosLexicon) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Config("cannot build a pseudo-gloss vocabulary from no sentences".into()));
        }
        let set: BTreeSet<String> = sentences
            .iter()
            .flat_map(|s| extract_pseudo_glosses(s, lexicon))
            .collect();
        if set.is_empty() {
            return Err(Error::Config("corpus yields no pseudo-glosses".into()));
        }
        Ok(Self::from_sorted(set.into_iter().collect()))
    }

    fn from_sorted(lemmas: Vec<String>) -> Self {
        let index = lemmas.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { lemmas, index }
    }

    /// Vocabulary in file order; rejects duplicates.
    pub fn from_lemmas(lemmas: Vec<String>) -> Result<Self> {
        let v = Self::from_sorted(lemmas);
        if v.index.len() != v.lemmas.len() {
            return Err(Error::Config("duplicate lemma in vocabulary".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    pub fn lemmas(&self) -> &[String] {
        &self.lemmas
    }

    pub fn index_of(&self, lemma: &str) -> Option<usize> {
        self.index.get(lemma).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.lemmas.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lemmas(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

/// Lemma → embedding vector table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, lemma: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Config(format!(
                "embedding for {lemma:?} has dimension {}, table expects {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(lemma.to_string(), v);
        Ok(())
    }

    /// Header `<count> <dim>`, then `lemma v1 … v_dim` per line, sorted.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        let mut out = format!("{} {}\n", keys.len(), self.dim);
        for k in keys {
            out.push_str(k);
            for v in &self.vectors[k] {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let fail = |line: usize, detail: &str| Error::Format {
            path: source.to_string(),
            detail: format!("line {line}: {detail}"),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fail(1, "missing header"))?;
        let hv: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| fail(1, "header must be `<count> <dim>`")))
            .collect::<Result<_>>()?;
        let [count, dim] = hv[..] else {
            return Err(fail(1, "header must be `<count> <dim>`"));
        };
        let mut table = Self::new(dim);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let lemma = parts.next().unwrap();
            let v: Vec<f64> = parts
                .map(|s| s.parse().map_err(|_| fail(n + 2, "bad number")))
                .collect::<Result<_>>()?;
            table.insert(lemma, v).map_err(|e| fail(n + 2, &e.to_string()))?;
        }
        if table.vectors.len() != count {
            return Err(fail(1, &format!("header says {count} rows, found {}", table.vectors.len())));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn lemma_seed(lemma: &str) -> u64 {
    let digest = Sha256::digest(lemma.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic unit vector for a lemma missing from the embedding table.
pub fn hashed_unit_vector(lemma: &str, dim: usize) -> Vec<f64> {
    let mut rng = Rng::new(lemma_seed(lemma), 0x70726f74);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Frozen `D′ × (U + 1)` prototype bank. Column 0 is the non-sign prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    matrix: Tensor<f64>,
}

impl PrototypeMatrix {
    pub fn build(vocab: &PseudoGlossVocab, table: &EmbeddingTable, dim: usize) -> Result<Self> {
        if table.dim != dim {
            return Err(Error::Config(format!(
                "embedding table dimension {} does not match prototype dimension {dim}",
                table.dim
            )));
        }
        let cols = vocab.len() + 1;
        let mut data = vec![0.0; dim * cols];
        for (u, lemma) in vocab.lemmas().iter().enumerate() {
            let v = match table.vectors.get(lemma) {
                Some(raw) => {
                    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-12 {
                        raw.iter().map(|x| x / n).collect()
                    } else {
                        hashed_unit_vector(lemma, dim)
                    }
                }
                None => hashed_unit_vector(lemma, dim),
            };
            for (d, x) in v.into_iter().enumerate() {
                data[d * cols + u + 1] = x;
            }
        }
        Ok(Self {
            matrix: Tensor::new(&[dim, cols], data)?,
        })
    }

    pub fn from_tensor(matrix: Tensor<f64>) -> Result<Self> {
        let (_, cols) = matrix.dims2()?;
        if cols < 2 {
            return Err(Error::Config("prototype bank needs at least one pseudo-gloss".into()));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Number of pseudo-glosses, excluding the non-sign column.
    pub fn glosses(&self) -> usize {
        self.matrix.shape()[1] - 1
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.matrix
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        self.matrix.cast()
    }

    pub fn column(&self, u: usize) -> Vec<f64> {
        let cols = self.matrix.shape()[1];
        (0..self.dim()).map(|d| self.matrix.data()[d * cols + u]).collect()
    }
}

/// Multi-hot presence vector over the `U` pseudo-glosses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossLabel {
    bits: Vec<bool>,
}

impl GlossLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn set_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn targets<T: Element>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

pub fn labels_for<S: AsRef<str>>(tokens: &[S], lexicon: &PosLexicon, vocab: &PseudoGlossVocab) -> GlossLabel {
    let mut bits = vec![false; vocab.len()];
    for lemma in extract_pseudo_glosses(tokens, lexicon) {
        if let Some(i) = vocab.index_of(&lemma) {
            bits[i] = true;
        }
    }
    GlossLabel { bits }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> PosLexicon {
        let mut lex = PosLexicon::new();
        lex.insert("morgen", "morgen", PosTag::Adv);
        lex.insert("scheint", "scheinen", PosTag::Verb);
        lex.insert("die", "die", PosTag::Other);
        lex.insert("sonne", "sonne", PosTag::Noun);
        lex.insert("regen", "regen", PosTag::Noun);
        lex.insert("und", "und", PosTag::Other);
        lex
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn all_other_yields_nothing() {
        assert!(extract_pseudo_glosses(&toks("die und die"), &lexicon()).is_empty());
    }

    #[test]
    fn filter_and_lemmatize() {
        let out = extract_pseudo_glosses(&toks("morgen scheint die sonne"), &lexicon());
        assert_eq!(out, ["morgen", "scheinen", "sonne"]);
    }

    #[test]
    fn duplicates_collapse() {
        let out = extract_pseudo_glosses(&toks("sonne und sonne"), &lexicon());
        assert_eq!(out, ["sonne"]);
    }

    #[test]
    fn unknown_tokens_are_other() {
        assert_eq!(lexicon().tag("xyz"), ("xyz".to_string(), PosTag::Other));
    }

    #[test]
    fn vocab_sizes() {
        let v = PseudoGlossVocab::build(&[toks("morgen scheint die sonne")], &lexicon()).unwrap();
        assert_eq!(v.len(), 3);
        let v = PseudoGlossVocab::build(
            &[toks("morgen scheint die sonne"), toks("sonne und regen")],
            &lexicon(),
        )
        .unwrap();
        assert_eq!(v.lemmas(), ["morgen", "regen", "scheinen", "sonne"]);
    }

    #[test]
    fn empty_vocab_is_config_error() {
        assert!(matches!(
            PseudoGlossVocab::build(&[toks("die und")], &lexicon()),
            Err(Error::Config(_))
        ));
        assert!(PseudoGlossVocab::build::<String>(&[], &lexicon()).is_err());
    }

    #[test]
    fn labels_ignore_out_of_vocab_lemmas() {
        let lex = lexicon();
        let v = PseudoGlossVocab::build(&[toks("morgen scheint die sonne")], &lex).unwrap();
        let h = labels_for(&toks("regen und sonne sonne"), &lex, &v);
        assert_eq!(h.set_indices(), vec![v.index_of("sonne").unwrap()]);
        assert_eq!(labels_for(&toks("die und"), &lex, &v).popcount(), 0);
    }

    #[test]
    fn prototype_columns() {
        let lex = lexicon();
        let v = PseudoGlossVocab::build(&[toks("morgen scheint sonne")], &lex).unwrap();
        let mut table = EmbeddingTable::new(4);
        table.insert("sonne", vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let p = PrototypeMatrix::build(&v, &table, 4).unwrap();
        assert_eq!(p.tensor().shape(), &[4, 4]);
        assert!(p.column(0).iter().all(|&x| x == 0.0));
        let u = v.index_of("sonne").unwrap() + 1;
        let col = p.column(u);
        for (a, b) in col.iter().zip([0.6, 0.0, 0.8, 0.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        for u in 1..=3 {
            let n: f64 = p.column(u).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // hashed fallback is stable
        let again = PrototypeMatrix::build(&v, &table, 4).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn prototype_dimension_mismatch() {
        let lex = lexicon();
        let v = PseudoGlossVocab::build(&[toks("sonne")], &lex).unwrap();
        assert!(matches!(
            PrototypeMatrix::build(&v, &EmbeddingTable::new(3), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lexicon_and_embedding_text_roundtrip() {
        let lex = lexicon();
        assert_eq!(PosLexicon::parse_tsv(&lex.to_tsv(), "m").unwrap(), lex);
        let mut t = EmbeddingTable::new(2);
        t.insert("a", vec![0.5, -1.25]).unwrap();
        t.insert("b", vec![1e-3, 7.0]).unwrap();
        assert_eq!(EmbeddingTable::parse(&t.to_text(), "m").unwrap(), t);
        assert!(EmbeddingTable::parse("2 2\na 1 2\n", "m").is_err());
    }
}
