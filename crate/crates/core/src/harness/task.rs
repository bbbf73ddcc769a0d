use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{ensure, Error, Result};
use crate::transformer::{Mark, TokenSequence};

/// Smallest non-special token id.
pub const FIRST_CONTENT: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Each content token votes for class `(t-3) mod C`; the label is the strict winner.
    MajorityClass,
    /// Label 1 iff the bigram `(3, 4)` occurs.
    PatternContainment,
    /// `[CLS] premise [SEP] hypothesis [SEP]`. Tokens come in opposite pairs
    /// `(3,4), (5,6), ...`. Label 2 if some hypothesis token's opposite is in the
    /// premise, else 0 if every hypothesis token is in the premise, else 1.
    PairEntailment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Content tokens per sequence (the premise, for pair tasks).
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    /// Longest hypothesis, for pair tasks.
    #[serde(default = "default_hypothesis")]
    pub max_hypothesis: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::PairEntailment,
            vocab_size: 15,
            min_len: 2,
            max_len: 5,
            num_classes: 3,
            max_hypothesis: 1,
            train_size: 4000,
            dev_size: 500,
            seed: 0,
        }
    }
}

fn default_hypothesis() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

fn opposite(t: u32) -> u32 {
    FIRST_CONTENT + ((t - FIRST_CONTENT) ^ 1)
}

fn content(seq: &TokenSequence) -> impl Iterator<Item = u32> + '_ {
    seq.token_ids.iter().zip(&seq.marks).filter(|(_, &m)| m == Mark::Ordinary).map(|(&t, _)| t)
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        ensure!(self.min_len >= 1 && self.min_len <= self.max_len, "need 1 <= min_len <= max_len");
        ensure!(self.train_size > 0, "train_size must be positive");
        match self.kind {
            TaskKind::MajorityClass => {
                ensure!(self.num_classes >= 2, "majority-class needs at least 2 classes");
                ensure!(content >= self.num_classes, "vocabulary too small for {} classes", self.num_classes);
            }
            TaskKind::PatternContainment => {
                ensure!(self.num_classes == 2, "pattern-containment is binary");
                ensure!(self.min_len >= 2, "pattern-containment needs min_len >= 2");
                ensure!(content >= 3, "vocabulary too small");
            }
            TaskKind::PairEntailment => {
                ensure!(self.num_classes == 3, "pair-entailment has 3 classes");
                ensure!(content.is_multiple_of(2), "pair-entailment needs an even number of content tokens");
                ensure!(self.max_hypothesis >= 1, "max_hypothesis must be positive");
                ensure!(content / 2 >= self.max_len + self.max_hypothesis, "vocabulary too small for max_len {}", self.max_len);
            }
        }
        Ok(())
    }

    /// Longest sequence produced, special tokens included.
    pub fn max_seq_len(&self) -> usize {
        match self.kind {
            TaskKind::PairEntailment => self.max_len + self.max_hypothesis + 3,
            _ => self.max_len + 1,
        }
    }

    /// The label as a function of the tokens alone.
    pub fn label_of(&self, seq: &TokenSequence) -> usize {
        match self.kind {
            TaskKind::MajorityClass => {
                let mut votes = vec![0usize; self.num_classes];
                for t in content(seq) {
                    votes[(t - FIRST_CONTENT) as usize % self.num_classes] += 1;
                }
                let mut best = 0;
                for (c, &v) in votes.iter().enumerate() {
                    if v > votes[best] {
                        best = c;
                    }
                }
                best
            }
            TaskKind::PatternContainment => {
                let ids: Vec<u32> = content(seq).collect();
                usize::from(ids.windows(2).any(|w| w == [FIRST_CONTENT, FIRST_CONTENT + 1]))
            }
            TaskKind::PairEntailment => {
                let premise: Vec<u32> = content_of_segment(seq, 0);
                let hypothesis: Vec<u32> = content_of_segment(seq, 1);
                if hypothesis.iter().any(|&t| premise.contains(&opposite(t))) {
                    2
                } else if hypothesis.iter().all(|t| premise.contains(t)) {
                    0
                } else {
                    1
                }
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, label: usize) -> TokenSequence {
        let n = rng.random_range(self.min_len..=self.max_len);
        let token = |rng: &mut ChaCha8Rng| rng.random_range(FIRST_CONTENT..self.vocab_size as u32);
        match self.kind {
            TaskKind::MajorityClass => loop {
                let ids: Vec<u32> = (0..n).map(|_| token(rng)).collect();
                let seq = TokenSequence::single(&ids);
                let mut votes = vec![0usize; self.num_classes];
                for &t in &ids {
                    votes[(t - FIRST_CONTENT) as usize % self.num_classes] += 1;
                }
                let top = *votes.iter().max().unwrap();
                if votes[label] == top && votes.iter().filter(|&&v| v == top).count() == 1 {
                    return seq;
                }
            },
            TaskKind::PatternContainment => loop {
                let mut ids: Vec<u32> = (0..n).map(|_| token(rng)).collect();
                if label == 1 {
                    let at = rng.random_range(0..n - 1);
                    ids[at] = FIRST_CONTENT;
                    ids[at + 1] = FIRST_CONTENT + 1;
                }
                let seq = TokenSequence::single(&ids);
                if self.label_of(&seq) == label {
                    return seq;
                }
            },
            TaskKind::PairEntailment => {
                // Premise: distinct tokens, never both members of an opposite pair.
                let mut pairs: Vec<u32> = (0..((self.vocab_size as u32 - FIRST_CONTENT) / 2)).collect();
                pairs.shuffle(rng);
                let premise: Vec<u32> = pairs[..n].iter().map(|&p| FIRST_CONTENT + 2 * p + rng.random_range(0..2)).collect();
                let unused: Vec<u32> = pairs[n..].iter().map(|&p| FIRST_CONTENT + 2 * p + rng.random_range(0..2)).collect();
                let k = rng.random_range(1..=self.max_hypothesis);
                let mut hyp: Vec<u32> = Vec::with_capacity(k);
                let mut from_premise = premise.clone();
                from_premise.shuffle(rng);
                match label {
                    0 => hyp.extend(&from_premise[..k.min(n)]),
                    1 => {
                        // At least one unseen token, the rest possibly from the premise.
                        let fresh = rng.random_range(1..=k);
                        hyp.extend(&unused[..fresh]);
                        hyp.extend(&from_premise[..(k - fresh).min(n)]);
                    }
                    _ => {
                        hyp.push(opposite(from_premise[0]));
                        for i in 1..k {
                            hyp.push(if rng.random_bool(0.5) { from_premise[i.min(n - 1)] } else { unused[i] });
                        }
                    }
                }
                hyp.shuffle(rng);
                TokenSequence::pair(&premise, &hyp)
            }
        }
    }

    /// Train and dev splits; labels cycle through the classes so each split is balanced.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut split = |size: usize| -> Result<Vec<Example>> {
            let mut out = Vec::with_capacity(size);
            for i in 0..size {
                let label = i % self.num_classes;
                let seq = self.sample(&mut rng, label);
                if self.label_of(&seq) != label {
                    return Err(Error::contract(format!("generator produced a mislabelled sample for class {label}")));
                }
                out.push(Example { seq, label });
            }
            out.shuffle(&mut rng);
            Ok(out)
        };
        let train = split(self.train_size)?;
        let dev = split(self.dev_size)?;
        Ok(Dataset { train, dev })
    }
}

fn content_of_segment(seq: &TokenSequence, segment: u8) -> Vec<u32> {
    seq.token_ids
        .iter()
        .zip(&seq.marks)
        .zip(&seq.segment_ids)
        .filter(|((_, &m), &s)| m == Mark::Ordinary && s == segment)
        .map(|((&t, _), _)| t)
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::Input(format!("{}:{}: {err}", path.display(), i + 1)))?;
        out.push(e);
    }
    Ok(out)
}
