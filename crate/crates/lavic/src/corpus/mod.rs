//! Dataset model: catalog items, conversations, example expansion,
//! conversation-level splitting, and on-disk JSONL formats.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Catalog entry. `image_path` is relative to the catalog file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub image_path: String,
}

pub fn valid_item_id(id: &str) -> bool {
    id.len() == 10 && id.bytes().all(|b| b.is_ascii_alphanumeric())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Ordered turns plus ground truth per recommender turn (1-based turn index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub conv_id: String,
    pub turns: Vec<Utterance>,
    pub ground_truth: BTreeMap<usize, Vec<String>>,
}

impl Conversation {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Schema(format!("conversation {}: {msg}", self.conv_id)))
        };
        if self.turns.is_empty() {
            return fail("no turns".into());
        }
        if self.turns[0].speaker != Speaker::Seeker {
            return fail("first turn must be the seeker".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.text.trim().is_empty() {
                return fail(format!("turn {} is empty", i + 1));
            }
        }
        for &k in self.ground_truth.keys() {
            if k == 0 || k > self.turns.len() {
                return fail(format!("ground_truth key {k} out of range"));
            }
            if self.turns[k - 1].speaker != Speaker::Recommender {
                return fail(format!("ground_truth key {k} indexes a seeker turn"));
            }
        }
        Ok(())
    }

    /// Every ground-truth id must exist in the catalog.
    pub fn validate_against_catalog(&self, catalog: &[Item]) -> Result<()> {
        let ids: HashSet<&str> = catalog.iter().map(|i| i.item_id.as_str()).collect();
        for items in self.ground_truth.values() {
            for id in items {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "conversation {}: ground-truth item {id} not in catalog",
                        self.conv_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One recommendation instance: the context before a recommender turn and
/// exactly one ground-truth item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub conv_id: String,
    /// 1-based index of the recommender turn this example targets.
    pub turn: usize,
    pub context: Vec<Utterance>,
    pub ground_truth_item: String,
}

impl Example {
    /// Stable reference key used to align slates and predictions.
    pub fn example_ref(&self) -> String {
        format!("{}:{}:{}", self.conv_id, self.turn, self.ground_truth_item)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| Error::Schema(format!("serialize: {e}")))?;
        buf.push(b'\n');
    }
    crate::cli::write_atomic(path, &buf)
}

pub fn load_catalog(path: &Path) -> Result<Vec<Item>> {
    let items: Vec<Item> = read_jsonl(path)?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if !valid_item_id(&item.item_id) {
            return Err(Error::Integrity(format!(
                "item_id {:?} on line {} is not a 10-char alphanumeric id",
                item.item_id,
                i + 1
            )));
        }
        if let Some(_first) = seen.insert(&item.item_id, i + 1) {
            return Err(Error::Integrity(format!(
                "duplicate item_id {} on line {}",
                item.item_id,
                i + 1
            )));
        }
    }
    Ok(items)
}

pub fn write_catalog(path: &Path, items: &[Item]) -> Result<()> {
    write_jsonl(path, items)
}

pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let convs: Vec<Conversation> = read_jsonl(path)?;
    for c in &convs {
        c.validate()?;
    }
    Ok(convs)
}

pub fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    write_jsonl(path, convs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleAnswer {
    Yes,
    No,
    Uncertain,
}

/// Keep only conversations the oracle classifies as recommendation dialogues.
pub fn filter_recommendation_dialogues<F>(
    convs: &[Conversation],
    mut oracle: F,
) -> Result<Vec<Conversation>>
where
    F: FnMut(&Conversation) -> Result<OracleAnswer>,
{
    let mut kept = Vec::new();
    for c in convs {
        let answer = oracle(c).map_err(|e| {
            Error::Integrity(format!("filter oracle failed on {}: {e}", c.conv_id))
        })?;
        if answer == OracleAnswer::Yes {
            kept.push(c.clone());
        }
    }
    Ok(kept)
}

const REQUEST_CUES: [&str; 6] = [
    "recommend",
    "looking for",
    "suggest",
    "any good",
    "need",
    "what should",
];

/// Rule-based default oracle: the last utterance names a catalog item (by id
/// or title substring) and some earlier turn carries a request cue.
pub fn default_filter_oracle(catalog: &[Item]) -> impl FnMut(&Conversation) -> Result<OracleAnswer> + '_ {
    move |conv: &Conversation| {
        let Some(last) = conv.turns.last() else {
            return Ok(OracleAnswer::Uncertain);
        };
        let last_lower = last.text.to_lowercase();
        let names_item = catalog.iter().any(|item| {
            last.text.contains(&item.item_id) || last_lower.contains(&item.title.to_lowercase())
        });
        let has_cue = conv.turns[..conv.turns.len() - 1].iter().any(|t| {
            let lower = t.text.to_lowercase();
            REQUEST_CUES.iter().any(|cue| lower.contains(cue))
        });
        Ok(if names_item && has_cue {
            OracleAnswer::Yes
        } else {
            OracleAnswer::No
        })
    }
}

/// One example per (recommender turn, ground-truth item) pair; turns with an
/// empty ground-truth set emit nothing.
pub fn expand_examples(conv: &Conversation) -> Vec<Example> {
    let mut out = Vec::new();
    for (&k, items) in &conv.ground_truth {
        for id in items {
            out.push(Example {
                conv_id: conv.conv_id.clone(),
                turn: k,
                context: conv.turns[..k - 1].to_vec(),
                ground_truth_item: id.clone(),
            });
        }
    }
    out
}

/// Floor-based 8:1:1 split at conversation granularity; the remainder goes
/// to train. Deterministic for a given seed.
pub fn split_dataset(
    examples: &[Example],
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    // Conversation ids in first-seen order.
    let mut conv_ids: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for e in examples {
        if seen.insert(e.conv_id.as_str()) {
            conv_ids.push(&e.conv_id);
        }
    }
    let n = conv_ids.len();
    if n < 10 {
        return Err(Error::Schema(format!(
            "need at least 10 conversations for an 8:1:1 split, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = conv_ids.clone();
    shuffled.shuffle(&mut rng);
    let tenth = n / 10;
    let val: HashSet<&str> = shuffled[..tenth].iter().copied().collect();
    let test: HashSet<&str> = shuffled[tenth..2 * tenth].iter().copied().collect();

    let mut train_out = Vec::new();
    let mut val_out = Vec::new();
    let mut test_out = Vec::new();
    for e in examples {
        if val.contains(e.conv_id.as_str()) {
            val_out.push(e.clone());
        } else if test.contains(e.conv_id.as_str()) {
            test_out.push(e.clone());
        } else {
            train_out.push(e.clone());
        }
    }
    Ok((train_out, val_out, test_out))
}
