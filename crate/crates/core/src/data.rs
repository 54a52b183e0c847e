//! Byte tokenisation, chunk plans, batching and the synthetic recall corpus.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::IGNORE_TARGET;

/// Byte-valued token sequence with a source tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u8>,
    pub origin: String,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u8>, origin: impl Into<String>) -> Self {
        TokenSeq {
            tokens,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().map(|&b| b as usize)
    }
}

pub fn tokenize_bytes(text: &[u8]) -> TokenSeq {
    TokenSeq::new(text.to_vec(), "bytes")
}

pub fn detokenize(seq: &TokenSeq) -> Vec<u8> {
    seq.tokens.clone()
}

/// Reads a file as raw bytes.
pub fn load_corpus_file(path: &Path) -> Result<TokenSeq> {
    let bytes = fs::read(path)?;
    Ok(TokenSeq::new(bytes, path.display().to_string()))
}

/// Partition of `n` tokens into `⌈n/c⌉` contiguous chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub n: usize,
    pub chunk_size: usize,
    pub chunks: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn count(&self) -> usize {
        self.chunks.len()
    }
}

pub fn split_chunks(n: usize, c: usize) -> Result<ChunkPlan> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if c < 2 {
        return Err(Error::Config(format!("chunk size must be at least 2, got {c}")));
    }
    let chunks = (0..n.div_ceil(c)).map(|m| m * c..((m + 1) * c).min(n)).collect();
    Ok(ChunkPlan {
        n,
        chunk_size: c,
        chunks,
    })
}

pub const KEY_MARKER: u8 = 0x01;
pub const QUERY_MARKER: u8 = 0x02;
const KEY_ALPHABET: std::ops::RangeInclusive<u8> = 0x30..=0x7A;
const FILLER_ALPHABET: std::ops::RangeInclusive<u8> = 0x20..=0x7E;

/// One long-range recall example. `seq` is
/// `[KEY, key…, filler…, QUERY, key…]`; `answer` spans the final copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallSample {
    pub seq: TokenSeq,
    pub answer: Range<usize>,
}

impl RecallSample {
    /// Everything up to and including the query marker.
    pub fn prompt(&self) -> &[u8] {
        &self.seq.tokens[..self.answer.start]
    }

    pub fn key(&self) -> &[u8] {
        &self.seq.tokens[self.answer.clone()]
    }
}

fn is_marker(b: u8) -> bool {
    b == KEY_MARKER || b == QUERY_MARKER
}

/// Deterministic recall corpus. `gap` should exceed the model's chunk size
/// so the key and its query land in different chunks (see
/// [`recall_crosses_chunks`]).
pub fn make_recall_corpus(seed: u64, key_len: usize, gap: usize, n_samples: usize) -> Result<Vec<RecallSample>> {
    if key_len == 0 {
        return Err(Error::Config("key_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let key: Vec<u8> = (0..key_len)
            .map(|_| loop {
                let b = rng.gen_range(KEY_ALPHABET);
                if !is_marker(b) {
                    break b;
                }
            })
            .collect();
        let mut tokens = Vec::with_capacity(2 * key_len + gap + 2);
        tokens.push(KEY_MARKER);
        tokens.extend_from_slice(&key);
        tokens.extend((0..gap).map(|_| rng.gen_range(FILLER_ALPHABET)));
        tokens.push(QUERY_MARKER);
        let start = tokens.len();
        tokens.extend_from_slice(&key);
        out.push(RecallSample {
            seq: TokenSeq::new(tokens, format!("recall:{seed}:{i}")),
            answer: start..start + key_len,
        });
    }
    Ok(out)
}

/// True when the key occurrence and the query marker fall in different chunks.
pub fn recall_crosses_chunks(gap: usize, chunk_size: usize) -> bool {
    gap > chunk_size
}

/// Writes one hex-encoded sample per line plus a `<path>.manifest` sidecar.
pub fn export_recall_corpus(
    path: &Path,
    samples: &[RecallSample],
    seed: u64,
    key_len: usize,
    gap: usize,
) -> Result<()> {
    let mut body = String::new();
    for s in samples {
        for b in &s.seq.tokens {
            write!(body, "{b:02x}").unwrap();
        }
        body.push('\n');
    }
    let manifest = format!(
        "format = chunklm-recall 1\nseed = {seed}\nkey_len = {key_len}\ngap = {gap}\nn_samples = {}\nanswer_offset = {}\n",
        samples.len(),
        key_len + gap + 2
    );
    fs::write(path, body)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Reads a corpus written by [`export_recall_corpus`].
pub fn import_recall_corpus(path: &Path) -> Result<Vec<RecallSample>> {
    let man_path = manifest_path(path);
    let man = crate::config::parse_flat(&fs::read_to_string(&man_path)?, &man_path)?;
    let key_len: usize = man
        .get("key_len")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(&man_path, "missing key_len"))?;
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.len() % 2 != 0 {
            return Err(Error::format(path, format!("line {}: odd hex length", i + 1)));
        }
        let tokens = (0..line.len())
            .step_by(2)
            .map(|j| u8::from_str_radix(&line[j..j + 2], 16))
            .collect::<std::result::Result<Vec<u8>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let start = tokens.len().checked_sub(key_len).ok_or_else(|| Error::format(path, "sample shorter than key"))?;
        out.push(RecallSample {
            seq: TokenSeq::new(tokens, format!("{}:{i}", path.display())),
            answer: start..start + key_len,
        });
    }
    Ok(out)
}

/// Inputs and next-token targets for one chunk position across a group of
/// sequences, row-major `[rows × width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkBatch {
    /// Index of the sequence group within the epoch.
    pub group: usize,
    pub chunk_index: usize,
    pub chunks_in_group: usize,
    pub seq_ids: Vec<u64>,
    pub width: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ChunkBatch {
    pub fn rows(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn is_first(&self) -> bool {
        self.chunk_index == 0
    }

    pub fn is_last(&self) -> bool {
        self.chunk_index + 1 == self.chunks_in_group
    }

    pub fn valid_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_TARGET).count()
    }
}

/// Builds every chunk of one sequence group. Rows shorter than the longest
/// are padded with token 0 and [`IGNORE_TARGET`]; the final chunk is as wide
/// as the longest remaining row.
pub fn group_chunks(corpus: &[TokenSeq], rows: &[usize], c: usize, group: usize) -> Vec<ChunkBatch> {
    let longest = rows.iter().map(|&r| corpus[r].len()).max().unwrap_or(0);
    let count = longest.div_ceil(c);
    (0..count)
        .map(|m| {
            let start = m * c;
            let width = c.min(longest - start);
            let mut inputs = Vec::with_capacity(rows.len() * width);
            let mut targets = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                let toks = &corpus[r].tokens;
                for p in start..start + width {
                    inputs.push(toks.get(p).map_or(0, |&b| b as usize));
                    targets.push(toks.get(p + 1).map_or(IGNORE_TARGET, |&b| b as usize));
                }
            }
            ChunkBatch {
                group,
                chunk_index: m,
                chunks_in_group: count,
                seq_ids: rows.iter().map(|&r| r as u64).collect(),
                width,
                inputs,
                targets,
            }
        })
        .collect()
}

/// Single pass over `corpus` in groups of `batch` sequences (the last group
/// may be smaller), yielding chunk batches in order.
pub struct Batcher<'a> {
    corpus: &'a [TokenSeq],
    order: Vec<usize>,
    batch: usize,
    chunk: usize,
    group: usize,
    pending: std::vec::IntoIter<ChunkBatch>,
}

pub fn batcher(corpus: &[TokenSeq], batch: usize, chunk: usize) -> Result<Batcher<'_>> {
    batcher_with_order(corpus, (0..corpus.len()).collect(), batch, chunk)
}

pub fn batcher_with_order(corpus: &[TokenSeq], order: Vec<usize>, batch: usize, chunk: usize) -> Result<Batcher<'_>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch == 0 || batch > corpus.len() {
        return Err(Error::Config(format!(
            "batch size {batch} invalid for a corpus of {} sequences",
            corpus.len()
        )));
    }
    if chunk < 2 {
        return Err(Error::Config(format!("chunk size must be at least 2, got {chunk}")));
    }
    if let Some((i, s)) = corpus.iter().enumerate().find(|(_, s)| s.len() < 2) {
        return Err(Error::Config(format!(
            "sequence {i} has {} tokens; next-token training needs at least 2",
            s.len()
        )));
    }
    Ok(Batcher {
        corpus,
        order,
        batch,
        chunk,
        group: 0,
        pending: Vec::new().into_iter(),
    })
}

impl Iterator for Batcher<'_> {
    type Item = ChunkBatch;

    fn next(&mut self) -> Option<ChunkBatch> {
        loop {
            if let Some(b) = self.pending.next() {
                return Some(b);
            }
            let start = self.group * self.batch;
            if start >= self.order.len() {
                return None;
            }
            let rows = &self.order[start..(start + self.batch).min(self.order.len())];
            self.pending = group_chunks(self.corpus, rows, self.chunk, self.group).into_iter();
            self.group += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_bytes(b"AB").tokens, vec![65, 66]);
        assert!(tokenize_bytes(b"").is_empty());
        assert_eq!(tokenize_bytes("é".as_bytes()).tokens, vec![195, 169]);
    }

    #[test]
    fn split_examples() {
        let p = split_chunks(10, 4).unwrap();
        assert_eq!(p.count(), 3);
        assert_eq!(p.chunks.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(split_chunks(7, 7).unwrap().count(), 1);
        let big = split_chunks(1_000_000, 1024).unwrap();
        assert_eq!(big.count(), 977);
        assert!(big.chunks[..976].iter().all(|r| r.len() == 1024));
        assert_eq!(big.chunks[976].len(), 1_000_000 - 976 * 1024);
        assert!(matches!(split_chunks(0, 4), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn recall_degenerate_gap() {
        let s = &make_recall_corpus(3, 4, 0, 1).unwrap()[0];
        assert_eq!(s.seq.len(), 10);
        assert_eq!(s.seq.tokens[5], QUERY_MARKER);
        assert_eq!(s.answer, 6..10);
        assert_eq!(s.key(), &s.seq.tokens[1..5]);
    }

    #[test]
    fn recall_structure_and_determinism() {
        let a = make_recall_corpus(7, 8, 4096, 3).unwrap();
        assert_eq!(a, make_recall_corpus(7, 8, 4096, 3).unwrap());
        for s in &a {
            assert_eq!(s.prompt().len(), 8 + 4096 + 2);
            assert_eq!(s.seq.tokens[0], KEY_MARKER);
            assert_eq!(*s.prompt().last().unwrap(), QUERY_MARKER);
            assert_eq!(s.key(), &s.seq.tokens[1..9]);
            assert!(s.key().iter().all(|b| KEY_ALPHABET.contains(b)));
            assert!(s.seq.tokens[9..8 + 4096 + 1].iter().all(|&b| !is_marker(b)));
        }
        assert!(recall_crosses_chunks(4096, 128));
        assert!(make_recall_corpus(1, 0, 10, 1).is_err());
    }

    #[test]
    fn recall_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recall.hex");
        let samples = make_recall_corpus(11, 5, 40, 4).unwrap();
        export_recall_corpus(&path, &samples, 11, 5, 40).unwrap();
        let back = import_recall_corpus(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.seq.tokens, b.seq.tokens);
            assert_eq!(a.answer, b.answer);
        }
    }

    #[test]
    fn shift_by_one_targets() {
        let corpus = vec![TokenSeq::new(vec![1, 2, 3, 4], "t")];
        let chunks: Vec<_> = batcher(&corpus, 1, 2).unwrap().collect();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].inputs, vec![1, 2]);
        assert_eq!(chunks[0].targets, vec![2, 3]);
        assert_eq!(chunks[1].inputs, vec![3, 4]);
        assert_eq!(chunks[1].targets, vec![4, IGNORE_TARGET]);
    }

    #[test]
    fn batcher_preconditions() {
        let short = vec![TokenSeq::new(vec![9], "t")];
        assert!(batcher(&short, 1, 4).is_err());
        let ok = vec![TokenSeq::new(vec![1, 2], "t")];
        assert!(batcher(&ok, 2, 4).is_err());
        assert!(matches!(batcher(&[], 1, 4), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn unequal_rows_are_mask_padded() {
        let corpus = vec![
            TokenSeq::new(vec![1, 2, 3, 4, 5, 6, 7], "a"),
            TokenSeq::new(vec![8, 9, 10], "b"),
        ];
        let chunks: Vec<_> = batcher(&corpus, 2, 4).unwrap().collect();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].width, 3);
        assert_eq!(chunks[0].targets[4..], [9, 10, IGNORE_TARGET, IGNORE_TARGET]);
        assert!(chunks[1].targets[3..].iter().all(|&t| t == IGNORE_TARGET));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn chunks_reconstruct_sequence(bytes in proptest::collection::vec(any::<u8>(), 1..300), c in 2usize..40) {
            let plan = split_chunks(bytes.len(), c).unwrap();
            prop_assert_eq!(plan.count(), bytes.len().div_ceil(c));
            let mut rebuilt = Vec::new();
            let mut expected_start = 0;
            for r in &plan.chunks {
                prop_assert_eq!(r.start, expected_start);
                expected_start = r.end;
                rebuilt.extend_from_slice(&bytes[r.clone()]);
            }
            prop_assert_eq!(rebuilt, bytes);
        }
    }
}
