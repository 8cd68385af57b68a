//! Synthetic tokenized cohorts with nine tagged sections and a planted label rule.
//!
//! Every sample renders the same template: `[CLS]` followed by nine sections of five
//! tokens each (`tag number unit slot slot`). The label is a fixed function of the
//! polarity words placed in the signal slots of two or three designated sections; the
//! other sections carry neutral words and polarity distractors.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SEQ_LEN: usize = 512;
pub const VOCAB_SIZE: usize = 1024;
pub const CLS: u32 = 0;
pub const PAD: u32 = 1;
pub const UNK: u32 = 2;
/// Tokens per section: the tag plus four slots.
pub const SECTION_LEN: usize = 5;
pub const N_SECTIONS: usize = 9;
/// Non-pad length of every generated sample, including `[CLS]`.
pub const TEMPLATE_LEN: usize = 1 + N_SECTIONS * SECTION_LEN;

const VOCAB_SEED: u64 = 0x5eed_0f_70c3;
const N_NUMBERS: usize = 200;
const N_DESCRIPTORS: usize = 48;
const DISTRACTOR_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubgroupTag {
    Dem,
    Vs,
    Cdt,
    Cct,
    Avlt1,
    Cfa,
    Avlt2,
    Anart,
    Faq,
}

impl SubgroupTag {
    pub const ALL: [SubgroupTag; 9] = [
        SubgroupTag::Dem,
        SubgroupTag::Vs,
        SubgroupTag::Cdt,
        SubgroupTag::Cct,
        SubgroupTag::Avlt1,
        SubgroupTag::Cfa,
        SubgroupTag::Avlt2,
        SubgroupTag::Anart,
        SubgroupTag::Faq,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Upper-case code used in span columns.
    pub fn code(self) -> &'static str {
        [
            "DEM", "VS", "CDT", "CCT", "AVLT1", "CFA", "AVLT2", "ANART", "FAQ",
        ][self.index()]
    }

    /// Column heading used in subgroup reports.
    pub fn heading(self) -> &'static str {
        [
            "Dem", "VS", "CDT", "CCT", "AVLT1", "CFA", "AVLT2", "ANART", "FAQ",
        ][self.index()]
    }

    /// Section word that opens the section in rendered text.
    pub fn word(self) -> &'static str {
        [
            "dem", "vs", "cdt", "cct", "avlt1", "cfa", "avlt2", "anart", "faq",
        ][self.index()]
    }

    pub fn parse(code: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.code() == code)
    }
}

impl fmt::Display for SubgroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSet {
    Binary,
    ThreeClass,
}

impl ClassSet {
    pub fn n_classes(self) -> usize {
        match self {
            ClassSet::Binary => 2,
            ClassSet::ThreeClass => 3,
        }
    }

    /// Label assigned to a planted score in {-4, -2, 0, 2, 4}.
    pub fn label_of(self, score: i32) -> usize {
        match self {
            ClassSet::Binary => usize::from(score > 0),
            ClassSet::ThreeClass => match score {
                s if s < 0 => 0,
                0 => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Iid,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub tag: SubgroupTag,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub chars: String,
    pub label: usize,
    pub spans: Vec<Span>,
}

impl Sample {
    /// Number of non-pad tokens, `[CLS]` included.
    pub fn len(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 1
    }

    /// Subgroup tag of a token position, if it lies in a span.
    pub fn tag_at(&self, pos: usize) -> Option<SubgroupTag> {
        self.spans
            .iter()
            .find(|s| s.start <= pos && pos < s.end)
            .map(|s| s.tag)
    }

    /// The rendered text of the tokens at `positions`, space separated.
    pub fn words_at(&self, positions: &[usize]) -> String {
        let v = vocab();
        positions
            .iter()
            .map(|&p| v.word(self.tokens[p]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn validate(&self, row: usize) -> Result<()> {
        let bad = |d: String| Err(Error::Validation(format!("row {row}: {d}")));
        if self.tokens.len() != SEQ_LEN || self.tokens[0] != CLS {
            return bad("token sequence must start with [CLS] and have length 512".into());
        }
        let mut prev_end = 1;
        let mut seen = [false; 9];
        for s in &self.spans {
            if s.start < prev_end || s.end <= s.start || s.end > SEQ_LEN {
                return bad(format!(
                    "span {}:{}-{} out of order or range",
                    s.tag, s.start, s.end
                ));
            }
            if std::mem::replace(&mut seen[s.tag.index()], true) {
                return bad(format!("subgroup {} appears twice", s.tag));
            }
            prev_end = s.end;
        }
        Ok(())
    }
}

/// Sections whose signal slots decide the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plant {
    /// Carries two signal slots with double weight.
    pub primary: SubgroupTag,
    /// Each carries one signal slot.
    pub secondary: [SubgroupTag; 2],
}

impl Plant {
    pub fn tags(&self) -> [SubgroupTag; 3] {
        [self.primary, self.secondary[0], self.secondary[1]]
    }

    /// Token positions of the label-deciding slots.
    pub fn signal_positions(&self) -> Vec<usize> {
        let mut v = vec![
            section_start(self.primary) + 3,
            section_start(self.primary) + 4,
            section_start(self.secondary[0]) + 3,
            section_start(self.secondary[1]) + 3,
        ];
        v.sort_unstable();
        v
    }

    /// Boolean mask over the full sequence marking the signal slots.
    pub fn signal_mask(&self) -> Vec<bool> {
        let mut m = vec![false; SEQ_LEN];
        for p in self.signal_positions() {
            m[p] = true;
        }
        m
    }
}

/// First token position (the tag) of a section in the fixed layout.
pub fn section_start(tag: SubgroupTag) -> usize {
    1 + SECTION_LEN * tag.index()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub seed: u64,
    pub n: usize,
    pub class_set: ClassSet,
    pub distribution: Distribution,
    pub split: Split,
    pub vocab_hash: String,
    pub plant: Option<Plant>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub distribution: Distribution,
    pub class_set: ClassSet,
    pub seed: u64,
    pub plant: Option<Plant>,
}

/// Stratified index sets: a held-out test fifth, then an 80/20 train/validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn meta(&self) -> CohortMeta {
        CohortMeta {
            seed: self.seed,
            n: self.samples.len(),
            class_set: self.class_set,
            distribution: self.distribution,
            split: self.split,
            vocab_hash: vocab().hash().to_string(),
            plant: self.plant,
        }
    }

    pub fn partition(&self, seed: u64) -> Partition {
        let mut r = rng::rng(rng::derive(seed, 0x5917));
        let mut p = Partition {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for c in 0..self.class_set.n_classes() {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.samples[i].label == c)
                .collect();
            idx.shuffle(&mut r);
            let n_test = (idx.len() as f64 * 0.2).round() as usize;
            let rest = idx.len() - n_test;
            let n_val = (rest as f64 * 0.2).round() as usize;
            p.test.extend_from_slice(&idx[..n_test]);
            p.val.extend_from_slice(&idx[n_test..n_test + n_val]);
            p.train.extend_from_slice(&idx[n_test + n_val..]);
        }
        p.train.sort_unstable();
        p.val.sort_unstable();
        p.test.sort_unstable();
        p
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Cohort {
        Cohort {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            split,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Cohort {
        Cohort {
            samples: Vec::new(),
            split: self.split,
            distribution: self.distribution,
            class_set: self.class_set,
            seed: self.seed,
            plant: self.plant,
        }
    }

    /// Counts of each vocabulary id over all non-pad, non-`[CLS]` tokens.
    pub fn token_counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; VOCAB_SIZE];
        for s in &self.samples {
            for &t in &s.tokens[1..s.len()] {
                c[t as usize] += 1.0;
            }
        }
        c
    }
}

/// Fixed word list shared by every cohort.
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    hash: String,
    numbers: Vec<u32>,
    positive: Vec<u32>,
    negative: Vec<u32>,
    units: Vec<u32>,
    descriptors: Vec<u32>,
}

pub fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(Vocab::build)
}

impl Vocab {
    fn build() -> Self {
        let mut words: Vec<String> = ["[CLS]", "[PAD]", "[UNK]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(SubgroupTag::ALL.iter().map(|t| t.word().to_string()));
        let numbers_at = words.len();
        words.extend((0..N_NUMBERS).map(|i| i.to_string()));
        let positive_at = words.len();
        words.extend(["elevated", "increased", "high", "raised", "heightened"].map(String::from));
        let negative_at = words.len();
        words.extend(["normal", "typical", "low", "reduced", "usual"].map(String::from));
        let units_at = words.len();
        words.extend(
            [
                "pts", "sec", "mm", "words", "items", "errors", "trials", "ratio",
            ]
            .map(String::from),
        );
        words.extend(
            [
                "age", "sex", "edu", "years", "score", "test", "result", "total", "male", "female",
            ]
            .map(String::from),
        );
        words.extend(["##s", "##ed", "##ing", "##ly", "##er"].map(String::from));
        let descriptors_at = words.len();

        const ONSETS: [&str; 14] = [
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
        ];
        const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
        let mut r = rng::rng(VOCAB_SEED);
        let mut index: HashMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        while words.len() < VOCAB_SIZE {
            let syll = r.gen_range(2..=3);
            let w: String = (0..syll)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS[r.gen_range(0..ONSETS.len())],
                        NUCLEI[r.gen_range(0..NUCLEI.len())]
                    )
                })
                .collect();
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len() as u32);
                words.push(w);
            }
        }
        let hash = hex::encode(&Sha256::digest(words.join("\n").as_bytes())[..8]);
        let range = |a: usize, n: usize| (a as u32..(a + n) as u32).collect::<Vec<_>>();
        Self {
            numbers: range(numbers_at, N_NUMBERS),
            positive: range(positive_at, 5),
            negative: range(negative_at, 5),
            units: range(units_at, 8),
            descriptors: range(descriptors_at, N_DESCRIPTORS),
            words,
            index,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Greedy longest-match word pieces; a word with no full cover maps to `[UNK]`.
    fn pieces(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.id(word) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut found = Vec::new();
        while start < chars.len() {
            let mut hit = None;
            for end in (start + 1..=chars.len()).rev() {
                let piece: String = chars[start..end].iter().collect();
                let key = if start == 0 {
                    piece
                } else {
                    format!("##{piece}")
                };
                if let Some(id) = self.id(&key) {
                    hit = Some((id, end));
                    break;
                }
            }
            match hit {
                Some((id, end)) => {
                    found.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(found);
    }

    /// `[CLS]` + word pieces of the whitespace-split text, truncated to 511 content
    /// tokens and padded to 512. A leading literal `[CLS]` in the text is skipped.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = vec![CLS];
        let mut words = text.split_whitespace().peekable();
        if words.peek() == Some(&"[CLS]") {
            words.next();
        }
        for w in words {
            self.pieces(w, &mut out);
            if out.len() >= SEQ_LEN {
                break;
            }
        }
        out.truncate(SEQ_LEN);
        out.resize(SEQ_LEN, PAD);
        out
    }

    /// Text of the non-pad tokens, starting with `[CLS]`.
    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    vocab().tokenize(text)
}

/// Picks an index with probability proportional to `w`.
fn weighted(r: &mut Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

struct Style {
    synonym_weights: [f64; 5],
    descriptor_weights: Vec<f64>,
    unit_weights: Vec<f64>,
    number_range: (usize, usize),
}

impl Style {
    fn of(d: Distribution) -> Self {
        let zipf = |n: usize, rev: bool| -> Vec<f64> {
            (0..n)
                .map(|i| 1.0 / (1.0 + if rev { n - 1 - i } else { i } as f64))
                .collect()
        };
        match d {
            Distribution::Iid => Style {
                synonym_weights: [0.4, 0.3, 0.2, 0.07, 0.03],
                descriptor_weights: zipf(N_DESCRIPTORS, false),
                unit_weights: zipf(8, false),
                number_range: (40, 100),
            },
            Distribution::Ood => Style {
                synonym_weights: [0.05, 0.1, 0.2, 0.3, 0.35],
                descriptor_weights: zipf(N_DESCRIPTORS, true),
                unit_weights: zipf(8, true),
                number_range: (60, 140),
            },
        }
    }
}

/// Polarity triples `(primary, secondary_a, secondary_b)` whose score maps to `label`.
fn combos_for(class_set: ClassSet, label: usize) -> Vec<[i32; 3]> {
    let mut v = Vec::new();
    for p in [1, -1] {
        for a in [1, -1] {
            for b in [1, -1] {
                if class_set.label_of(2 * p + a + b) == label {
                    v.push([p, a, b]);
                }
            }
        }
    }
    v
}

pub fn generate_cohort(
    seed: u64,
    n: usize,
    class_set: ClassSet,
    distribution: Distribution,
) -> Result<Cohort> {
    let c = class_set.n_classes();
    if n < 10 * c {
        return Err(Error::Config(format!(
            "need at least {} samples for {c} classes, got {n}",
            10 * c
        )));
    }
    let v = vocab();
    let style = Style::of(distribution);

    let mut tags = SubgroupTag::ALL.to_vec();
    tags.shuffle(&mut rng::rng(rng::derive(seed, 0x91a7)));
    let plant = Plant {
        primary: tags[0],
        secondary: [tags[1], tags[2]],
    };

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng::rng(rng::derive(seed, 0x1abe)));

    let stream = match distribution {
        Distribution::Iid => 0x11d,
        Distribution::Ood => 0x00d,
    };
    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::rng(rng::derive(rng::derive(seed, stream), i as u64));
        let combos = combos_for(class_set, label);
        let pol = combos[r.gen_range(0..combos.len())];
        let signal = |r: &mut Rng, polarity: i32| {
            let pool = if polarity > 0 {
                &v.positive
            } else {
                &v.negative
            };
            pool[weighted(r, &style.synonym_weights)]
        };
        let filler = |r: &mut Rng| {
            if r.gen::<f64>() < DISTRACTOR_RATE {
                let polarity = if r.gen::<bool>() { 1 } else { -1 };
                signal(r, polarity)
            } else {
                v.descriptors[weighted(r, &style.descriptor_weights)]
            }
        };
        let mut tokens = vec![CLS];
        let mut spans = Vec::with_capacity(N_SECTIONS);
        for tag in SubgroupTag::ALL {
            let start = tokens.len();
            tokens.push(v.id(tag.word()).expect("tag word in vocabulary"));
            tokens.push(v.numbers[r.gen_range(style.number_range.0..style.number_range.1)]);
            tokens.push(v.units[weighted(&mut r, &style.unit_weights)]);
            if tag == plant.primary {
                tokens.push(signal(&mut r, pol[0]));
                tokens.push(signal(&mut r, pol[0]));
            } else if tag == plant.secondary[0] {
                tokens.push(signal(&mut r, pol[1]));
                tokens.push(filler(&mut r));
            } else if tag == plant.secondary[1] {
                tokens.push(signal(&mut r, pol[2]));
                tokens.push(filler(&mut r));
            } else {
                tokens.push(filler(&mut r));
                tokens.push(filler(&mut r));
            }
            spans.push(Span {
                tag,
                start,
                end: tokens.len(),
            });
        }
        let chars = v.render(&tokens);
        tokens.resize(SEQ_LEN, PAD);
        samples.push(Sample {
            tokens,
            chars,
            label,
            spans,
        });
    }
    Ok(Cohort {
        samples,
        split: Split::Full,
        distribution,
        class_set,
        seed,
        plant: Some(plant),
    })
}

fn format_spans(spans: &[Span]) -> String {
    spans
        .iter()
        .map(|s| format!("{}:{}-{}", s.tag, s.start, s.end))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_spans(text: &str, line: usize) -> Result<Vec<Span>> {
    let parse_err = |d: String| Error::Parse { line, detail: d };
    let mut out = Vec::new();
    for part in text.split(';').filter(|p| !p.is_empty()) {
        let (tag, range) = part
            .split_once(':')
            .ok_or_else(|| parse_err(format!("span '{part}' lacks ':'")))?;
        let (a, b) = range
            .split_once('-')
            .ok_or_else(|| parse_err(format!("span '{part}' lacks '-'")))?;
        let start = a
            .parse()
            .map_err(|_| parse_err(format!("bad span start '{a}'")))?;
        let end = b
            .parse()
            .map_err(|_| parse_err(format!("bad span end '{b}'")))?;
        let tag = SubgroupTag::parse(tag).ok_or_else(|| {
            Error::Validation(format!("row {line}: unknown subgroup tag '{tag}'"))
        })?;
        out.push(Span { tag, start, end });
    }
    Ok(out)
}

/// Sidecar metadata path next to a cohort CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn export_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["char", "label", "subgroup_spans"])
        .map_err(csv_err)?;
    for s in &cohort.samples {
        w.write_record([
            s.chars.as_str(),
            &s.label.to_string(),
            &format_spans(&s.spans),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    fs::write(
        meta_path(path),
        serde_json::to_string_pretty(&cohort.meta())?,
    )?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            detail: format!("{other:?}"),
        },
    }
}

/// Reads a cohort CSV; metadata comes from the sidecar JSON when present.
pub fn ingest_csv(path: &Path) -> Result<Cohort> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["char", "label", "subgroup_spans"] {
        return Err(Error::Parse {
            line: 1,
            detail: "header must be char,label,subgroup_spans".into(),
        });
    }
    let v = vocab();
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let chars = rec[0].to_string();
        let label: usize = rec[1].parse().map_err(|_| Error::Parse {
            line,
            detail: format!("bad label '{}'", &rec[1]),
        })?;
        let spans = parse_spans(&rec[2], line)?;
        let tokens = v.tokenize(&chars);
        let s = Sample {
            tokens,
            chars,
            label,
            spans,
        };
        s.validate(line)?;
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mp = meta_path(path);
    let meta: Option<CohortMeta> = if mp.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&mp)?)?)
    } else {
        None
    };
    if let Some(m) = &meta {
        if m.vocab_hash != v.hash() {
            return Err(Error::Validation(format!(
                "cohort was built with vocabulary {} but this build uses {}",
                m.vocab_hash,
                v.hash()
            )));
        }
    }
    let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0);
    let class_set = meta.as_ref().map_or(
        if max_label >= 2 {
            ClassSet::ThreeClass
        } else {
            ClassSet::Binary
        },
        |m| m.class_set,
    );
    if max_label >= class_set.n_classes() {
        return Err(Error::Validation(format!(
            "label {max_label} outside {class_set:?}"
        )));
    }
    Ok(Cohort {
        samples,
        split: meta.as_ref().map_or(Split::Full, |m| m.split),
        distribution: meta.as_ref().map_or(Distribution::Iid, |m| m.distribution),
        class_set,
        seed: meta.as_ref().map_or(0, |m| m.seed),
        plant: meta.and_then(|m| m.plant),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_has_fixed_size_and_reserved_ids() {
        let v = vocab();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.word(CLS), "[CLS]");
        assert_eq!(v.word(PAD), "[PAD]");
        assert_eq!(v.word(UNK), "[UNK]");
    }

    #[test]
    fn tokenize_pads_after_cls() {
        let t = tokenize("age 81");
        let v = vocab();
        assert_eq!(t.len(), SEQ_LEN);
        assert_eq!(&t[..3], &[CLS, v.id("age").unwrap(), v.id("81").unwrap()]);
        assert!(t[3..].iter().all(|&x| x == PAD));
    }

    #[test]
    fn tokenize_truncates_to_511_content_tokens() {
        let text: Vec<String> = (0..600).map(|i| (i % 200).to_string()).collect();
        let t = tokenize(&text.join(" "));
        assert_eq!(t.len(), SEQ_LEN);
        assert_eq!(t[511], vocab().id("110").unwrap());
        assert!(!t.contains(&PAD));
    }

    #[test]
    fn unknown_word_is_unk() {
        assert_eq!(tokenize("qqqqxyz")[1], UNK);
    }

    #[test]
    fn word_pieces_split_known_suffixes() {
        let v = vocab();
        let t = tokenize("tests");
        assert_eq!(&t[1..3], &[v.id("test").unwrap(), v.id("##s").unwrap()]);
    }

    #[test]
    fn three_class_labels_follow_score() {
        assert_eq!(ClassSet::ThreeClass.label_of(-4), 0);
        assert_eq!(ClassSet::ThreeClass.label_of(0), 1);
        assert_eq!(ClassSet::ThreeClass.label_of(2), 2);
        assert_eq!(ClassSet::Binary.label_of(0), 0);
        assert_eq!(ClassSet::Binary.label_of(2), 1);
    }

    #[test]
    fn too_few_samples_is_config_error() {
        assert!(matches!(
            generate_cohort(1, 19, ClassSet::Binary, Distribution::Iid),
            Err(Error::Config(_))
        ));
    }
}
