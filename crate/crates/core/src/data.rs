//! Synthetic sign-language corpus: generation, on-disk layout, loading and
//! padded batching.
//!
//! Every gloss owns a fixed motion template (a short sequence of frame
//! vectors) and a fixed surface word, optionally preceded by a fixed
//! function word. A sample strings 3–8 glosses together, adds Gaussian
//! noise and occasionally inserts pure-noise "non-sign" segments.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::pseudo_gloss::{EmbeddingTable, PosLexicon, PosTag, KEEP_TAGS};
use crate::translation::{TokenVocab, PAD};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const MANIFEST: &str = "manifest.json";
pub const SENTENCES: &str = "sentences.txt";
pub const LEXICON: &str = "lexicon.tsv";
pub const EMBEDDINGS: &str = "embeddings.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub glosses: usize,
    pub function_words: Vec<String>,
    /// Probability that a gloss is assigned a preceding function word.
    pub function_word_prob: f64,
    pub frames_per_gloss: [usize; 2],
    pub input_dim: usize,
    pub noise: f64,
    pub pad_prob: f64,
    pub pad_len: [usize; 2],
    pub glosses_per_sample: [usize; 2],
    pub embedding_dim: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            glosses: 50,
            function_words: ["der", "die", "das", "und", "dann", "im", "am", "zum"]
                .map(String::from)
                .to_vec(),
            function_word_prob: 0.5,
            frames_per_gloss: [2, 4],
            input_dim: 384,
            noise: 0.3,
            pad_prob: 0.2,
            pad_len: [1, 3],
            glosses_per_sample: [3, 8],
            embedding_dim: 300,
            train: 500,
            dev: 60,
            test: 60,
            seed: 0,
        }
    }
}

const MAX_GLOSSES: usize = 75 * 75;

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.glosses < 2 || self.glosses > MAX_GLOSSES {
            return bad(format!("gloss count must be in 2..={MAX_GLOSSES}, got {}", self.glosses));
        }
        let [fmin, fmax] = self.frames_per_gloss;
        if fmin < 1 || fmin > fmax {
            return bad(format!("frames_per_gloss range [{fmin}, {fmax}] is invalid"));
        }
        let [gmin, gmax] = self.glosses_per_sample;
        if gmin < 1 || gmin > gmax {
            return bad(format!("glosses_per_sample range [{gmin}, {gmax}] is invalid"));
        }
        let [pmin, pmax] = self.pad_len;
        if pmin < 1 || pmin > pmax {
            return bad(format!("pad_len range [{pmin}, {pmax}] is invalid"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        for (name, p) in [("pad_prob", self.pad_prob), ("function_word_prob", self.function_word_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.input_dim == 0 || self.embedding_dim == 0 {
            return bad("input_dim and embedding_dim must be positive".into());
        }
        if self.function_word_prob > 0.0 && self.function_words.is_empty() {
            return bad("function_word_prob > 0 needs at least one function word".into());
        }
        Ok(())
    }

    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "dev" => self.dev,
            _ => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T*, D_in]` frame vectors.
    pub frames: Tensor<f32>,
    pub sentence: Vec<String>,
    /// Gloss indices in signing order (known only for generated corpora).
    pub glosses: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    pub lexicon: PosLexicon,
    pub embeddings: EmbeddingTable,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, dev or test"))),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .next()
            .map(|s| s.frames.shape()[1])
    }
}

/// Surface and lemma for gloss `i`: two consonant–vowel syllables, with an
/// inflection on verbs and adjectives so the lexicon has real lemmatization
/// work to do.
fn gloss_word(i: usize) -> (String, String, PosTag) {
    const CONS: [char; 15] = ['b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w'];
    const VOW: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let syl = |k: usize| format!("{}{}", CONS[k / 5], VOW[k % 5]);
    let code = (i * 37 + 11) % MAX_GLOSSES;
    let lemma = format!("{}{}", syl(code / 75), syl(code % 75));
    let tag = KEEP_TAGS[i % KEEP_TAGS.len()];
    let surface = match tag {
        PosTag::Verb => format!("{lemma}en"),
        PosTag::Adj => format!("{lemma}e"),
        _ => lemma.clone(),
    };
    (surface, lemma, tag)
}

struct GlossSpec {
    surface: String,
    prefix: Option<String>,
    template: Vec<f64>,
    frames: usize,
}

struct GlossBank {
    specs: Vec<GlossSpec>,
    lexicon: PosLexicon,
    embeddings: EmbeddingTable,
}

fn gloss_bank(cfg: &SyntheticCorpusConfig) -> Result<GlossBank> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let mut template_rng = Rng::new(cfg.seed, 1);
    let mut embed_rng = Rng::new(cfg.seed, 2);
    let mut lexicon = PosLexicon::new();
    let mut embeddings = EmbeddingTable::new(cfg.embedding_dim);
    for w in &cfg.function_words {
        lexicon.insert(w, w, PosTag::Other);
    }
    let mut seen: HashSet<String> = cfg.function_words.iter().cloned().collect();
    let mut specs = Vec::with_capacity(cfg.glosses);
    for i in 0..cfg.glosses {
        let (surface, lemma, tag) = gloss_word(i);
        if !seen.insert(surface.clone()) {
            return Err(Error::Config(format!("gloss word {surface:?} collides with another word")));
        }
        lexicon.insert(&surface, &lemma, tag);
        let v: Vec<f64> = (0..cfg.embedding_dim).map(|_| embed_rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        embeddings.insert(&lemma, v.into_iter().map(|x| x / n).collect())?;
        let frames = template_rng.range_inclusive(cfg.frames_per_gloss[0], cfg.frames_per_gloss[1]);
        let template = (0..frames * d).map(|_| template_rng.normal()).collect();
        let prefix = (template_rng.bernoulli(cfg.function_word_prob))
            .then(|| cfg.function_words[template_rng.below(cfg.function_words.len())].clone());
        specs.push(GlossSpec {
            surface,
            prefix,
            template,
            frames,
        });
    }
    Ok(GlossBank {
        specs,
        lexicon,
        embeddings,
    })
}

/// The noise-free motion template of every gloss, `[frames, D_in]` each.
pub fn gloss_templates(cfg: &SyntheticCorpusConfig) -> Result<Vec<Tensor<f32>>> {
    gloss_bank(cfg)?
        .specs
        .iter()
        .map(|s| Tensor::new(&[s.frames, cfg.input_dim], s.template.iter().map(|&x| x as f32).collect()))
        .collect()
}

pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    let GlossBank {
        specs,
        lexicon,
        embeddings,
    } = gloss_bank(cfg)?;
    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for (k, split) in SPLITS.iter().enumerate() {
        let mut rng = Rng::new(cfg.seed, 3 + k as u64);
        let samples = (0..cfg.split_size(split))
            .map(|_| render_sample(cfg, &specs, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        splits.push(samples);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus {
        train,
        dev,
        test,
        lexicon,
        embeddings,
    })
}

fn render_sample(cfg: &SyntheticCorpusConfig, specs: &[GlossSpec], rng: &mut Rng) -> Result<Sample> {
    let d = cfg.input_dim;
    let count = rng.range_inclusive(cfg.glosses_per_sample[0], cfg.glosses_per_sample[1]);
    let glosses: Vec<usize> = (0..count).map(|_| rng.below(specs.len())).collect();
    let mut frames: Vec<f64> = Vec::new();
    let pad = |frames: &mut Vec<f64>, rng: &mut Rng| {
        if rng.bernoulli(cfg.pad_prob) {
            let len = rng.range_inclusive(cfg.pad_len[0], cfg.pad_len[1]);
            frames.extend((0..len * d).map(|_| rng.normal()));
        }
    };
    let mut sentence = Vec::new();
    for &gi in &glosses {
        pad(&mut frames, rng);
        let spec = &specs[gi];
        frames.extend(spec.template.iter().map(|&x| x + cfg.noise * rng.normal()));
        if let Some(p) = &spec.prefix {
            sentence.push(p.clone());
        }
        sentence.push(spec.surface.clone());
    }
    pad(&mut frames, rng);
    let t = frames.len() / d;
    let frames = Tensor::new(&[t, d], frames.into_iter().map(|x| x as f32).collect())?;
    Ok(Sample {
        frames,
        sentence,
        glosses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: String,
    pub sentence_line: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub glosses: Vec<usize>,
}

pub type Manifest = BTreeMap<String, Vec<ManifestEntry>>;

/// Writes `manifest.json`, `sentences.txt`, `features/*.hfat`,
/// `lexicon.tsv` and `embeddings.txt` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = Manifest::new();
    let mut sentences = String::new();
    let mut line = 0;
    for split in SPLITS {
        let mut entries = Vec::new();
        for (i, s) in corpus.split(split)?.iter().enumerate() {
            let rel = format!("features/{split}_{i:05}.hfat");
            s.frames.save_hfat(&dir.join(&rel))?;
            sentences.push_str(&s.sentence.join(" "));
            sentences.push('\n');
            entries.push(ManifestEntry {
                features: rel,
                sentence_line: line,
                glosses: s.glosses.clone(),
            });
            line += 1;
        }
        manifest.insert(split.to_string(), entries);
    }
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.display().to_string(),
        source: e,
    })?;
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let spath = dir.join(SENTENCES);
    std::fs::write(&spath, sentences).map_err(|e| Error::io(&spath, e))?;
    corpus.lexicon.save(&dir.join(LEXICON))?;
    corpus.embeddings.save(&dir.join(EMBEDDINGS))
}

/// Loads a corpus from its directory or from the path of its manifest.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let (dir, mpath): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.display().to_string(),
        source: e,
    })?;
    let spath = dir.join(SENTENCES);
    let stext = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let lines: Vec<&str> = stext.lines().collect();
    let mut splits: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    let mut dim = None;
    for split in SPLITS {
        let mut samples = Vec::new();
        for (i, entry) in manifest.get(split).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            let name = format!("{split}[{i}]");
            let fail = |detail: String| Error::Load {
                entry: name.clone(),
                detail,
            };
            let line = lines.get(entry.sentence_line).ok_or_else(|| {
                fail(format!(
                    "sentence index {} is out of range ({} lines in {SENTENCES})",
                    entry.sentence_line,
                    lines.len()
                ))
            })?;
            let sentence: Vec<String> = line.split_whitespace().map(String::from).collect();
            if sentence.is_empty() {
                return Err(fail(format!("sentence line {} is empty", entry.sentence_line)));
            }
            let frames = Tensor::<f32>::load_hfat(&dir.join(&entry.features)).map_err(|e| fail(e.to_string()))?;
            let (t, d) = frames.dims2().map_err(|_| fail(format!("features must be rank 2, got {:?}", frames.shape())))?;
            if t == 0 {
                return Err(fail("features hold zero frames".into()));
            }
            if *dim.get_or_insert(d) != d {
                return Err(fail(format!("feature width {d} differs from the corpus width {}", dim.unwrap())));
            }
            samples.push(Sample {
                frames,
                sentence,
                glosses: entry.glosses.clone(),
            });
        }
        splits.insert(split, samples);
    }
    Ok(Corpus {
        train: splits.remove("train").unwrap_or_default(),
        dev: splits.remove("dev").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
        lexicon: PosLexicon::load(&dir.join(LEXICON))?,
        embeddings: EmbeddingTable::load(&dir.join(EMBEDDINGS))?,
    })
}

/// Frames and target tokens of several samples, padded to common lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the samples in the source slice.
    pub indices: Vec<usize>,
    /// `[B, T_max, D_in]`, zero-padded.
    pub frames: Tensor<f32>,
    pub frame_mask: Vec<Vec<bool>>,
    /// `<bos> … <eos>` padded with `<pad>`.
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn frame_len(&self, i: usize) -> usize {
        self.frame_mask[i].iter().filter(|&&m| m).count()
    }

    /// Valid frames of sample `i`, `[T*_i, D_in]`.
    pub fn sample_frames(&self, i: usize) -> Tensor<f32> {
        let (tmax, d) = (self.frames.shape()[1], self.frames.shape()[2]);
        let t = self.frame_len(i);
        let start = i * tmax * d;
        Tensor::new(&[t, d], self.frames.data()[start..start + t * d].to_vec()).expect("consistent batch")
    }

    /// Valid tokens of sample `i`.
    pub fn sample_tokens(&self, i: usize) -> &[usize] {
        let n = self.token_mask[i].iter().filter(|&&m| m).count();
        &self.tokens[i][..n]
    }
}

/// Groups samples into padded batches; the order is a deterministic
/// function of `seed` when `shuffle` is set.
pub fn make_batches(
    samples: &[Sample],
    vocab: &TokenVocab,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        Rng::new(seed, 0x6261_7463).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let d = samples[idx[0]].frames.shape()[1];
            let tmax = idx.iter().map(|&i| samples[i].frames.shape()[0]).max().unwrap_or(0);
            let mut frames = vec![0f32; idx.len() * tmax * d];
            let mut frame_mask = Vec::with_capacity(idx.len());
            let ids: Vec<Vec<usize>> = idx.iter().map(|&i| vocab.encode_target(&samples[i].sentence)).collect();
            let lmax = ids.iter().map(Vec::len).max().unwrap_or(0);
            for (b, &i) in idx.iter().enumerate() {
                let f = &samples[i].frames;
                if f.shape()[1] != d {
                    return Err(Error::shape("make_batches", f.shape(), &[f.shape()[0], d]));
                }
                let t = f.shape()[0];
                frames[b * tmax * d..b * tmax * d + t * d].copy_from_slice(f.data());
                frame_mask.push((0..tmax).map(|j| j < t).collect());
            }
            let token_mask = ids.iter().map(|s| (0..lmax).map(|j| j < s.len()).collect()).collect();
            let tokens = ids
                .into_iter()
                .map(|mut s| {
                    s.resize(lmax, PAD);
                    s
                })
                .collect();
            Ok(Batch {
                indices: idx.to_vec(),
                frames: Tensor::new(&[idx.len(), tmax, d], frames)?,
                frame_mask,
                tokens,
                token_mask,
            })
        })
        .collect()
}
