//! JSONL corpora, tokenization, and deterministic batching.
//!
//! SFT lines look like `{"prompt": "...", "answer": "..."}`; preference lines
//! like `{"prompt": "...", "chosen": "...", "rejected": "..."}`. Unknown
//! fields are ignored. The prompt is followed by a separator string (a
//! newline by default) before tokenization; answers are tokenized on their
//! own so the answer mask is exact.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{tokenize, Sample};
pub use crate::objectives::PreferencePair;

pub mod synthetic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Sft,
    Preference,
}

impl Schema {
    pub fn name(self) -> &'static str {
        match self {
            Schema::Sft => "sft",
            Schema::Preference => "preference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverLength {
    #[default]
    Reject,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeOptions {
    pub separator: String,
    pub context_len: usize,
    pub over_length: OverLength,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        Self {
            separator: "\n".into(),
            context_len: 256,
            over_length: OverLength::Reject,
        }
    }
}

impl TokenizeOptions {
    fn prompt_tokens(&self, prompt: &str) -> Vec<u32> {
        let mut t = tokenize(prompt);
        t.extend(tokenize(&self.separator));
        t
    }

    fn check_len(&self, total: usize) -> std::result::Result<(), String> {
        if total > self.context_len {
            Err(format!(
                "record is {total} tokens, longer than context length {}",
                self.context_len
            ))
        } else {
            Ok(())
        }
    }
}

impl SftRecord {
    pub fn to_sample(&self, opts: &TokenizeOptions) -> Result<Sample> {
        if self.answer.is_empty() {
            return Err(Error::InvalidValue("answer is empty".into()));
        }
        let sample = Sample::new(opts.prompt_tokens(&self.prompt), tokenize(&self.answer))?;
        opts.check_len(sample.total_len()).map_err(Error::InvalidValue)?;
        Ok(sample)
    }
}

impl PreferenceRecord {
    pub fn to_pair(&self, opts: &TokenizeOptions) -> Result<PreferencePair> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::InvalidValue("chosen and rejected must be non-empty".into()));
        }
        let pair = PreferencePair::new(
            opts.prompt_tokens(&self.prompt),
            tokenize(&self.chosen),
            tokenize(&self.rejected),
        )?;
        opts.check_len(pair.chosen.total_len().max(pair.rejected.total_len()))
            .map_err(Error::InvalidValue)?;
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corpus {
    Sft(Vec<SftRecord>),
    Preference(Vec<PreferenceRecord>),
}

/// A corpus after tokenization, index-aligned with its records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizedCorpus {
    Sft(Vec<Sample>),
    Preference(Vec<PreferencePair>),
}

impl TokenizedCorpus {
    pub fn len(&self) -> usize {
        match self {
            TokenizedCorpus::Sft(v) => v.len(),
            TokenizedCorpus::Preference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Schema {
        match self {
            TokenizedCorpus::Sft(_) => Schema::Sft,
            TokenizedCorpus::Preference(_) => Schema::Preference,
        }
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Sft(v) => v.len(),
            Corpus::Preference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Schema {
        match self {
            Corpus::Sft(_) => Schema::Sft,
            Corpus::Preference(_) => Schema::Preference,
        }
    }

    pub fn tokenize(&self, opts: &TokenizeOptions) -> Result<TokenizedCorpus> {
        let wrap = |i: usize, e: Error| Error::Record {
            path: "<corpus>".into(),
            line: i + 1,
            message: e.to_string(),
        };
        Ok(match self {
            Corpus::Sft(v) => TokenizedCorpus::Sft(
                v.iter()
                    .enumerate()
                    .map(|(i, r)| r.to_sample(opts).map_err(|e| wrap(i, e)))
                    .collect::<Result<_>>()?,
            ),
            Corpus::Preference(v) => TokenizedCorpus::Preference(
                v.iter()
                    .enumerate()
                    .map(|(i, r)| r.to_pair(opts).map_err(|e| wrap(i, e)))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// One JSON object per line, `\n`-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        match self {
            Corpus::Sft(v) => {
                for r in v {
                    out.push_str(&serde_json::to_string(r)?);
                    out.push('\n');
                }
            }
            Corpus::Preference(v) => {
                for r in v {
                    out.push_str(&serde_json::to_string(r)?);
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    /// SHA-256 of [`Corpus::to_jsonl`], hex encoded.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_jsonl()?.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in hash.iter() {
            write!(hex, "{b:02x}").expect("writing to a String");
        }
        Ok(hex)
    }
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str) -> std::result::Result<T, String> {
    serde_json::from_str(line).map_err(|e| {
        // serde_json reports "missing field `answer` at line 1 column 17";
        // the column refers to the single line, so keep just the message.
        let msg = e.to_string();
        match msg.find(" at line ") {
            Some(i) => msg[..i].to_owned(),
            None => msg,
        }
    })
}

/// Reads and validates a JSONL corpus. Blank lines are ignored; line
/// numbers in errors are 1-based.
pub fn load_corpus(path: &Path, schema: Schema, opts: &TokenizeOptions) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let record_err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sft = Vec::new();
    let mut pref = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let checked = match schema {
            Schema::Sft => parse_line::<SftRecord>(&line).and_then(|r| {
                r.to_sample(opts).map_err(|e| e.to_string())?;
                sft.push(r);
                Ok(())
            }),
            Schema::Preference => parse_line::<PreferenceRecord>(&line).and_then(|r| {
                r.to_pair(opts).map_err(|e| e.to_string())?;
                pref.push(r);
                Ok(())
            }),
        };
        if let Err(message) = checked {
            let over_length = message.contains("longer than context length");
            if over_length && opts.over_length == OverLength::Skip {
                log::warn!("{}:{lineno}: skipping: {message}", path.display());
                continue;
            }
            return Err(record_err(lineno, message));
        }
    }
    Ok(match schema {
        Schema::Sft => Corpus::Sft(sft),
        Schema::Preference => Corpus::Preference(pref),
    })
}

/// Guesses a JSONL corpus's schema from its first non-blank record: objects
/// with a `chosen` or `rejected` key are preference records.
pub fn detect_schema(path: &Path) -> Result<Schema> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let is_pref = value
            .as_object()
            .is_some_and(|o| o.contains_key("chosen") || o.contains_key("rejected"));
        return Ok(if is_pref { Schema::Preference } else { Schema::Sft });
    }
    Err(Error::EmptyCorpus)
}

/// Writes a corpus as JSONL, atomically.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, corpus.to_jsonl()?.as_bytes())
}

/// A slice of the corpus plus the record indices it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch<T> {
    pub items: Vec<T>,
    pub indices: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl Batch<Sample> {
    pub fn answer_masks(&self) -> Vec<Vec<bool>> {
        self.items.iter().map(Sample::answer_mask).collect()
    }
}

/// Shuffled record order for one epoch.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Splits a seeded permutation of `items` into batches of `batch_size`;
/// the last batch may be smaller.
pub fn make_batches<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Batch<T>>> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(Error::InvalidValue("batch_size must be positive".into()));
    }
    Ok(shuffled_indices(items.len(), seed)
        .chunks(batch_size)
        .map(|idx| Batch {
            items: idx.iter().map(|&i| items[i].clone()).collect(),
            indices: idx.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::detokenize;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_record() {
        let f = write_tmp("{\"prompt\":\"Q\",\"answer\":\"A\"}\n");
        let c = load_corpus(f.path(), Schema::Sft, &TokenizeOptions::default()).unwrap();
        assert_eq!(
            c,
            Corpus::Sft(vec![SftRecord {
                prompt: "Q".into(),
                answer: "A".into()
            }])
        );
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let f = write_tmp("{\"prompt\":\"Q\",\"answer\":\"A\"}\n{\"prompt\":\"Q\"}\n");
        let err = load_corpus(f.path(), Schema::Sft, &TokenizeOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Record { line: 2, .. }), "{msg}");
        assert!(msg.contains("answer"), "{msg}");
    }

    #[test]
    fn parse_error_reports_line() {
        let f = write_tmp("\n{not json\n");
        let err = load_corpus(f.path(), Schema::Sft, &TokenizeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Record { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_answer_rejected() {
        let f = write_tmp("{\"prompt\":\"Q\",\"answer\":\"\"}\n");
        assert!(load_corpus(f.path(), Schema::Sft, &TokenizeOptions::default()).is_err());
    }

    #[test]
    fn order_preserved() {
        let lines: String = (0..7)
            .map(|i| format!("{{\"prompt\":\"p{i}\",\"answer\":\"a{i}\"}}\n"))
            .collect();
        let f = write_tmp(&lines);
        let Corpus::Sft(v) = load_corpus(f.path(), Schema::Sft, &TokenizeOptions::default()).unwrap() else {
            panic!()
        };
        let answers: Vec<_> = v.iter().map(|r| r.answer.clone()).collect();
        assert_eq!(answers, (0..7).map(|i| format!("a{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn over_length_reject_or_skip() {
        let f = write_tmp("{\"prompt\":\"Q\",\"answer\":\"short\"}\n{\"prompt\":\"Q\",\"answer\":\"much too long here\"}\n");
        let mut opts = TokenizeOptions {
            context_len: 10,
            ..TokenizeOptions::default()
        };
        let err = load_corpus(f.path(), Schema::Sft, &opts).unwrap_err();
        assert!(matches!(err, Error::Record { line: 2, .. }));
        opts.over_length = OverLength::Skip;
        assert_eq!(load_corpus(f.path(), Schema::Sft, &opts).unwrap().len(), 1);
    }

    #[test]
    fn schema_detection() {
        let f = write_tmp("\n{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\"}\n");
        assert_eq!(detect_schema(f.path()).unwrap(), Schema::Preference);
        let f = write_tmp("{\"prompt\":\"p\",\"answer\":\"a\"}\n");
        assert_eq!(detect_schema(f.path()).unwrap(), Schema::Sft);
        assert!(matches!(detect_schema(write_tmp("\n").path()), Err(Error::EmptyCorpus)));
        assert!(matches!(detect_schema(write_tmp("nope\n").path()), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn preference_schema() {
        let f = write_tmp("{\"prompt\":\"Q\",\"chosen\":\"yes\",\"rejected\":\"no\"}\n");
        let c = load_corpus(f.path(), Schema::Preference, &TokenizeOptions::default()).unwrap();
        assert_eq!(c.schema(), Schema::Preference);
        let TokenizedCorpus::Preference(p) = c.tokenize(&TokenizeOptions::default()).unwrap() else {
            panic!()
        };
        assert_eq!(detokenize(p[0].chosen.answer_tokens()).unwrap(), "yes");
        assert_eq!(detokenize(p[0].prompt_tokens()).unwrap(), "Q\n");
        // An SFT line is not a preference record.
        let f = write_tmp("{\"prompt\":\"Q\",\"answer\":\"A\"}\n");
        assert!(load_corpus(f.path(), Schema::Preference, &TokenizeOptions::default()).is_err());
    }

    #[test]
    fn batch_sizes_and_partition() {
        let items: Vec<usize> = (0..130).collect();
        let batches = make_batches(&items, 64, 7).unwrap();
        let sizes: Vec<_> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, items);
        for b in &batches {
            assert_eq!(b.items, b.indices);
        }
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let items: Vec<usize> = (0..50).collect();
        assert_eq!(make_batches(&items, 8, 3).unwrap(), make_batches(&items, 8, 3).unwrap());
        assert_ne!(make_batches(&items, 8, 3).unwrap(), make_batches(&items, 8, 4).unwrap());
        assert!(matches!(make_batches::<usize>(&[], 8, 3), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn masks_cover_answers() {
        let s = SftRecord {
            prompt: "hi".into(),
            answer: "yo!".into(),
        }
        .to_sample(&TokenizeOptions::default())
        .unwrap();
        let batch = make_batches(&[s], 4, 0).unwrap().remove(0);
        assert_eq!(batch.answer_masks(), vec![vec![false, false, false, true, true, true]]);
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = Corpus::Sft(vec![SftRecord {
            prompt: "a".into(),
            answer: "b".into(),
        }]);
        let b = Corpus::Sft(vec![SftRecord {
            prompt: "a".into(),
            answer: "c".into(),
        }]);
        assert_eq!(a.digest().unwrap(), a.digest().unwrap());
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }
}
