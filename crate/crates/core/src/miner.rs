//! Significant-semantic mining.
//!
//! Offline pass: scan a POS-tagged corpus and count how often each
//! verb/noun/adjective appears as a whole vocabulary token, then keep every
//! token whose count reaches the k-th largest (ties included) as the
//! significant vocabulary. Online pass: for one tokenized caption, collect
//! the positions whose token is in that vocabulary.
//!
//! POS annotations are ingested from files rather than computed; a lexicon
//! tagger is provided for tests and the synthetic harness.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::tokenizer::{TokenSeq, Vocab};

/// Universal POS tag set (closed enumeration).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl PosTag {
    /// Verbs, nouns, and adjectives carry the significant semantics.
    pub fn is_significant(self) -> bool {
        matches!(self, PosTag::Verb | PosTag::Noun | PosTag::Adj)
    }
}

/// One POS-tagged caption: parallel word and tag lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosRecord {
    pub id: String,
    pub words: Vec<String>,
    pub tags: Vec<PosTag>,
}

/// A POS-tagged corpus loaded from `pos.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct PosCorpus {
    pub records: Vec<PosRecord>,
}

impl PosCorpus {
    pub fn new(records: Vec<PosRecord>) -> Result<Self> {
        for rec in &records {
            if rec.words.len() != rec.tags.len() {
                return Err(Error::Format(format!(
                    "record {}: {} words but {} tags",
                    rec.id,
                    rec.words.len(),
                    rec.tags.len()
                )));
            }
        }
        Ok(PosCorpus { records })
    }

    /// Load `pos.jsonl`: one `{"id","words","tags"}` object per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(jsonl::read_records(path)?)
    }

    /// Drop records whose (words, tags) pair duplicates an earlier record.
    pub fn dedup(self) -> Self {
        let mut seen = HashMap::new();
        let mut records = Vec::with_capacity(self.records.len());
        for rec in self.records {
            let key = (rec.words.clone(), rec.tags.clone());
            if seen.insert(key, ()).is_none() {
                records.push(rec);
            }
        }
        PosCorpus { records }
    }
}

/// An untagged caption record from `corpus.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
}

/// Per-vocabulary-id occurrence counts for significant-POS whole words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub vocab_hash: String,
}

impl FrequencyTable {
    pub fn zeros(vocab: &Vocab) -> Self {
        FrequencyTable {
            counts: vec![0; vocab.len()],
            vocab_hash: vocab.content_hash().to_string(),
        }
    }

    /// Element-wise addition; partial tables must come from the same vocab.
    pub fn merge(&mut self, other: &FrequencyTable) -> Result<()> {
        if self.vocab_hash != other.vocab_hash {
            return Err(Error::Consistency(format!(
                "cannot merge frequency tables for different vocabularies ({} vs {})",
                self.vocab_hash, other.vocab_hash
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Membership mask over vocabulary ids for the significant vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignificantVocab {
    pub mask: Vec<bool>,
    pub k_ss: usize,
    /// The realized cutoff: the k-th largest count in the table.
    pub threshold: u64,
    pub vocab_hash: String,
}

/// On-disk form of [`SignificantVocab`]: `sigvocab.json`.
#[derive(Debug, Serialize, Deserialize)]
struct SigVocabFile {
    k_ss: usize,
    threshold: u64,
    vocab_hash: String,
    ids: Vec<u32>,
}

impl SignificantVocab {
    pub fn contains(&self, id: u32) -> bool {
        self.mask.get(id as usize).copied().unwrap_or(false)
    }

    /// Ascending list of significant vocabulary ids.
    pub fn ids(&self) -> Vec<u32> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = SigVocabFile {
            k_ss: self.k_ss,
            threshold: self.threshold,
            vocab_hash: self.vocab_hash.clone(),
            ids: self.ids(),
        };
        serde_json::to_string_pretty(&file).expect("sigvocab serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Load `sigvocab.json` and rebuild the mask against `vocab`.
    ///
    /// Fails with a consistency error when the stored hash does not match.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SigVocabFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.vocab_hash != vocab.content_hash() {
            return Err(Error::Consistency(format!(
                "{} was mined against a different vocabulary",
                path.display()
            )));
        }
        let mut mask = vec![false; vocab.len()];
        for id in file.ids {
            let slot = mask.get_mut(id as usize).ok_or_else(|| {
                Error::Format(format!("significant id {id} out of range for V={}", vocab.len()))
            })?;
            *slot = true;
        }
        Ok(SignificantVocab {
            mask,
            k_ss: file.k_ss,
            threshold: file.threshold,
            vocab_hash: file.vocab_hash,
        })
    }
}

/// Per-caption positions of significant tokens, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenList {
    pub positions: Vec<usize>,
}

impl ChosenList {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Tag each word by lexicon lookup; absent words get `X`.
pub fn lexicon_pos_tag(words: &[String], lexicon: &HashMap<String, PosTag>) -> Vec<PosTag> {
    words
        .iter()
        .map(|w| lexicon.get(w).copied().unwrap_or(PosTag::X))
        .collect()
}

/// Offline counting pass over a tagged corpus.
///
/// A word contributes one count when its tag is VERB/NOUN/ADJ and its
/// lowercased form is a whole vocabulary token; everything else is ignored,
/// including significant-POS words absent from the vocabulary.
pub fn count_significant(corpus: &PosCorpus, vocab: &Vocab) -> FrequencyTable {
    let mut table = FrequencyTable::zeros(vocab);
    accumulate(&mut table, &corpus.records, vocab);
    table
}

fn accumulate(table: &mut FrequencyTable, records: &[PosRecord], vocab: &Vocab) {
    for rec in records {
        for (word, tag) in rec.words.iter().zip(&rec.tags) {
            if !tag.is_significant() {
                continue;
            }
            if let Some(id) = vocab.id_of(&word.to_lowercase()) {
                table.counts[id as usize] += 1;
            }
        }
    }
}

/// Parallel counting over contiguous record chunks, merged in chunk order.
///
/// Integer addition is associative, so the result is independent of the
/// worker count and equals [`count_significant`].
pub fn count_significant_parallel(corpus: &PosCorpus, vocab: &Vocab, workers: usize) -> FrequencyTable {
    let workers = workers.max(1);
    if workers == 1 || corpus.records.len() < 2 {
        return count_significant(corpus, vocab);
    }
    let chunk_size = corpus.records.len().div_ceil(workers);
    let partials: Vec<FrequencyTable> = std::thread::scope(|scope| {
        let handles: Vec<_> = corpus
            .records
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    let mut table = FrequencyTable::zeros(vocab);
                    accumulate(&mut table, chunk, vocab);
                    table
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("miner worker")).collect()
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for part in iter {
        total.merge(&part).expect("partials share one vocab");
    }
    total
}

/// Keep every token whose count reaches the k-th largest count.
///
/// The threshold is the value at rank `k_ss` of the descending count
/// multiset (duplicates counted), so ties at the cutoff are all kept and the
/// selection may exceed `k_ss`. Tokens with count zero are never selected:
/// when `k_ss` exceeds the nonzero support the threshold falls to zero and
/// would otherwise admit the entire vocabulary.
pub fn threshold_topk(freq: &FrequencyTable, k_ss: usize) -> Result<SignificantVocab> {
    if k_ss == 0 {
        return Err(Error::Argument("k_ss must be at least 1".to_string()));
    }
    let mut sorted = freq.counts.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let threshold = sorted.get(k_ss - 1).copied().unwrap_or(0);
    let mask: Vec<bool> = freq
        .counts
        .iter()
        .map(|&c| c > 0 && c >= threshold)
        .collect();
    let selected = mask.iter().filter(|&&m| m).count();
    let nonzero = freq.counts.iter().filter(|&&c| c > 0).count();
    debug_assert!(selected >= k_ss.min(nonzero));
    Ok(SignificantVocab {
        mask,
        k_ss,
        threshold,
        vocab_hash: freq.vocab_hash.clone(),
    })
}

/// Online pass: positions of a caption's significant tokens.
///
/// Scans content positions (non-special, non-pad) and keeps those whose
/// vocabulary id is in the significant mask, ascending.
pub fn build_chosen_list(seq: &TokenSeq, sig: &SignificantVocab, vocab: &Vocab) -> Result<ChosenList> {
    if sig.vocab_hash != vocab.content_hash() {
        return Err(Error::Consistency(
            "significant vocabulary was mined against a different vocabulary".to_string(),
        ));
    }
    let positions = seq
        .content_positions()
        .into_iter()
        .filter(|&i| sig.contains(seq.ids[i]))
        .collect();
    Ok(ChosenList { positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::wordpiece_tokenize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_vocab() -> Vocab {
        Vocab::from_tokens(
            [
                "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "boy", "plays", "plane", "land",
                "##ing", "red", "dog",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .unwrap()
    }

    fn record(id: &str, words: &[&str], tags: &[PosTag]) -> PosRecord {
        PosRecord {
            id: id.to_string(),
            words: words.iter().map(|s| s.to_string()).collect(),
            tags: tags.to_vec(),
        }
    }

    #[test]
    fn lexicon_tagging() {
        let lexicon: HashMap<String, PosTag> = [
            ("dog".to_string(), PosTag::Noun),
            ("runs".to_string(), PosTag::Verb),
            ("red".to_string(), PosTag::Adj),
        ]
        .into_iter()
        .collect();
        let words: Vec<String> = ["the", "dog", "runs"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            lexicon_pos_tag(&words, &lexicon),
            vec![PosTag::X, PosTag::Noun, PosTag::Verb]
        );
        assert_eq!(lexicon_pos_tag(&[], &lexicon), vec![]);
        let reds: Vec<String> = ["red", "red"].iter().map(|s| s.to_string()).collect();
        assert_eq!(lexicon_pos_tag(&reds, &lexicon), vec![PosTag::Adj, PosTag::Adj]);
    }

    #[test]
    fn counting_hand_trace() {
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record(
            "r0",
            &["a", "boy", "plays"],
            &[PosTag::Det, PosTag::Noun, PosTag::Verb],
        )])
        .unwrap();
        let table = count_significant(&corpus, &vocab);
        let boy = vocab.id_of("boy").unwrap() as usize;
        let plays = vocab.id_of("plays").unwrap() as usize;
        for (i, &c) in table.counts.iter().enumerate() {
            let expected = if i == boy || i == plays { 1 } else { 0 };
            assert_eq!(c, expected, "count for id {i}");
        }
    }

    #[test]
    fn empty_corpus_counts_nothing() {
        let vocab = test_vocab();
        let table = count_significant(&PosCorpus::default(), &vocab);
        assert!(table.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn significant_word_outside_vocab_is_ignored() {
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record(
            "r0",
            &["skateboarding"],
            &[PosTag::Verb],
        )])
        .unwrap();
        let table = count_significant(&corpus, &vocab);
        assert!(table.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn counting_lowercases_words() {
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record("r0", &["Boy"], &[PosTag::Noun])]).unwrap();
        let table = count_significant(&corpus, &vocab);
        assert_eq!(table.counts[vocab.id_of("boy").unwrap() as usize], 1);
    }

    #[test]
    fn mismatched_words_tags_is_format_error() {
        let result = PosCorpus::new(vec![record("r0", &["a", "boy"], &[PosTag::Det])]);
        assert!(matches!(result, Err(Error::Format(_))));
    }

    #[test]
    fn merge_rejects_foreign_vocab() {
        let vocab = test_vocab();
        let mut a = FrequencyTable::zeros(&vocab);
        let b = FrequencyTable {
            counts: vec![0; vocab.len()],
            vocab_hash: "somethingelse".to_string(),
        };
        assert!(matches!(a.merge(&b), Err(Error::Consistency(_))));
    }

    #[test]
    fn partitioned_counting_matches_single_pass() {
        let vocab = test_vocab();
        let sig_words = ["boy", "plays", "plane", "land", "red", "dog"];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<PosRecord> = (0..137)
            .map(|i| {
                let n = rng.gen_range(1..6);
                let words: Vec<&str> = (0..n)
                    .map(|_| sig_words[rng.gen_range(0..sig_words.len())])
                    .collect();
                let tags = vec![PosTag::Noun; n];
                record(&format!("r{i}"), &words, &tags)
            })
            .collect();
        let corpus = PosCorpus::new(records.clone()).unwrap();
        let single = count_significant(&corpus, &vocab);
        for workers in [1, 2, 3, 7, 64] {
            let parallel = count_significant_parallel(&corpus, &vocab, workers);
            assert_eq!(parallel, single, "workers={workers}");
        }

        // Arbitrary (non-contiguous) partitions merge to the same table.
        for split_seed in 0..5u64 {
            let mut split_rng = ChaCha8Rng::seed_from_u64(split_seed);
            let (mut left, mut right) = (Vec::new(), Vec::new());
            for rec in &records {
                if split_rng.gen::<bool>() {
                    left.push(rec.clone());
                } else {
                    right.push(rec.clone());
                }
            }
            let mut merged = count_significant(&PosCorpus::new(left).unwrap(), &vocab);
            merged
                .merge(&count_significant(&PosCorpus::new(right).unwrap(), &vocab))
                .unwrap();
            assert_eq!(merged, single, "split {split_seed}");
        }
    }

    fn table_with(counts: Vec<u64>) -> FrequencyTable {
        FrequencyTable {
            counts,
            vocab_hash: "test".to_string(),
        }
    }

    #[test]
    fn topk_keeps_ties_at_threshold() {
        let sig = threshold_topk(&table_with(vec![5, 3, 3, 1]), 2).unwrap();
        assert_eq!(sig.threshold, 3);
        assert_eq!(sig.mask, vec![true, true, true, false]);
    }

    #[test]
    fn topk_rank_one_is_maximum() {
        let sig = threshold_topk(&table_with(vec![5, 3, 3, 1]), 1).unwrap();
        assert_eq!(sig.threshold, 5);
        assert_eq!(sig.mask, vec![true, false, false, false]);
    }

    #[test]
    fn zero_counts_are_never_significant() {
        for k in [1, 3, 100] {
            let sig = threshold_topk(&table_with(vec![0, 0, 0]), k).unwrap();
            assert!(sig.mask.iter().all(|&m| !m), "k={k}");
        }
        // Threshold 0 (k beyond support) still only selects observed tokens.
        let sig = threshold_topk(&table_with(vec![4, 0, 1]), 100).unwrap();
        assert_eq!(sig.threshold, 0);
        assert_eq!(sig.mask, vec![true, false, true]);
    }

    #[test]
    fn topk_zero_is_argument_error() {
        assert!(matches!(
            threshold_topk(&table_with(vec![1]), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn growing_k_never_removes_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let counts: Vec<u64> = (0..40).map(|_| rng.gen_range(0..6)).collect();
            let table = table_with(counts);
            let mut prev = threshold_topk(&table, 1).unwrap();
            for k in 2..=45 {
                let next = threshold_topk(&table, k).unwrap();
                for i in 0..prev.mask.len() {
                    assert!(!prev.mask[i] || next.mask[i], "k={k} dropped id {i}");
                }
                prev = next;
            }
        }
    }

    #[test]
    fn chosen_list_trace() {
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record(
            "r0",
            &["a", "boy", "plays"],
            &[PosTag::Det, PosTag::Noun, PosTag::Verb],
        )])
        .unwrap();
        let table = count_significant(&corpus, &vocab);
        let sig = threshold_topk(&table, 5).unwrap();
        let seq = wordpiece_tokenize("a boy plays", &vocab, 8).unwrap();
        let chosen = build_chosen_list(&seq, &sig, &vocab).unwrap();
        // [CLS] a boy plays [SEP]: "boy" at 2, "plays" at 3.
        assert_eq!(chosen.positions, vec![2, 3]);
    }

    #[test]
    fn chosen_list_empty_when_nothing_significant() {
        let vocab = test_vocab();
        let sig = threshold_topk(&FrequencyTable::zeros(&vocab), 5).unwrap();
        let seq = wordpiece_tokenize("a boy plays", &vocab, 8).unwrap();
        let chosen = build_chosen_list(&seq, &sig, &vocab).unwrap();
        assert!(chosen.is_empty());
    }

    #[test]
    fn subword_membership_is_per_token() {
        // "landing" splits into land + ##ing; only the head piece "land"
        // can be significant, so only its position is chosen.
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record("r0", &["land"], &[PosTag::Verb])]).unwrap();
        let sig = threshold_topk(&count_significant(&corpus, &vocab), 1).unwrap();
        let seq = wordpiece_tokenize("landing", &vocab, 8).unwrap();
        assert_eq!(seq.ids[1], vocab.id_of("land").unwrap());
        assert_eq!(seq.ids[2], vocab.id_of("##ing").unwrap());
        let chosen = build_chosen_list(&seq, &sig, &vocab).unwrap();
        assert_eq!(chosen.positions, vec![1]);
    }

    #[test]
    fn chosen_list_rejects_foreign_sig_vocab() {
        let vocab = test_vocab();
        let mut sig = threshold_topk(&FrequencyTable::zeros(&vocab), 5).unwrap();
        sig.vocab_hash = "other".to_string();
        let seq = wordpiece_tokenize("a boy", &vocab, 8).unwrap();
        assert!(matches!(
            build_chosen_list(&seq, &sig, &vocab),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn sigvocab_file_round_trip() {
        let vocab = test_vocab();
        let corpus = PosCorpus::new(vec![record(
            "r0",
            &["boy", "plays", "red"],
            &[PosTag::Noun, PosTag::Verb, PosTag::Adj],
        )])
        .unwrap();
        let sig = threshold_topk(&count_significant(&corpus, &vocab), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.json");
        sig.save(&path).unwrap();
        let loaded = SignificantVocab::load(&path, &vocab).unwrap();
        assert_eq!(loaded, sig);

        let other = Vocab::from_tokens(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "zzz"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            SignificantVocab::load(&path, &other),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn dedup_drops_repeated_captions() {
        let a = record("a", &["boy"], &[PosTag::Noun]);
        let b = record("b", &["boy"], &[PosTag::Noun]);
        let c = record("c", &["dog"], &[PosTag::Noun]);
        let corpus = PosCorpus::new(vec![a, b, c]).unwrap().dedup();
        assert_eq!(corpus.records.len(), 2);
        assert_eq!(corpus.records[0].id, "a");
        assert_eq!(corpus.records[1].id, "c");
    }
}
