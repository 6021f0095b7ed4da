//! Text-only candidate retrieval (BM25 plus a toy embedding ranker) and
//! slate assembly: top-10, ground-truth injection by swapping the weakest
//! candidate, and a deterministic per-example shuffle.

use std::collections::HashMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::corpus::{Example, Item};
use crate::error::{Error, Result};
use crate::model::Vlm;

/// Lowercased alphanumeric terms.
pub fn tokenize_text(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

struct Doc {
    item_id: String,
    tf: HashMap<String, usize>,
    len: usize,
}

pub struct Bm25Index {
    docs: Vec<Doc>,
    df: HashMap<String, usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

pub fn build_bm25_index(catalog: &[Item], k1: f64, b: f64) -> Result<Bm25Index> {
    if catalog.is_empty() {
        return Err(Error::Schema("cannot index an empty catalog".into()));
    }
    let mut docs = Vec::with_capacity(catalog.len());
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut total_len = 0usize;
    for item in catalog {
        let terms = tokenize_text(&item.title);
        let mut tf: HashMap<String, usize> = HashMap::new();
        for t in &terms {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for t in tf.keys() {
            *df.entry(t.clone()).or_default() += 1;
        }
        total_len += terms.len();
        docs.push(Doc {
            item_id: item.item_id.clone(),
            tf,
            len: terms.len(),
        });
    }
    Ok(Bm25Index {
        avgdl: total_len as f64 / docs.len() as f64,
        docs,
        df,
        k1,
        b,
    })
}

impl Bm25Index {
    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query_terms: &[String], doc_idx: usize) -> f64 {
        let doc = &self.docs[doc_idx];
        let mut s = 0.0;
        for t in query_terms {
            let tf = doc.tf.get(t).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            let norm = tf * (self.k1 + 1.0)
                / (tf + self.k1 * (1.0 - self.b + self.b * doc.len as f64 / self.avgdl));
            s += self.idf(t) * norm;
        }
        s
    }
}

fn rank_scored(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Top-k items by BM25; descending score, ties broken by ascending item_id.
pub fn bm25_rank(index: &Bm25Index, query: &str, k: usize) -> Vec<(String, f64)> {
    let terms = tokenize_text(query);
    let scored = (0..index.docs.len())
        .map(|i| (index.docs[i].item_id.clone(), index.score(&terms, i)))
        .collect();
    rank_scored(scored, k)
}

/// Toy text encoder: mean of the LM byte embeddings, L2-normalized.
/// Any external encoder can substitute by implementing this signature.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Array1<f64>;
}

pub struct LmMeanEncoder<'a> {
    pub vlm: &'a Vlm,
}

impl TextEncoder for LmMeanEncoder<'_> {
    fn encode(&self, text: &str) -> Array1<f64> {
        let d = self.vlm.lcfg.d_lm;
        let mut acc = Array1::zeros(d);
        let bytes = text.as_bytes();
        if bytes.is_empty() {
            return acc;
        }
        for &b in bytes {
            acc += &self.vlm.params.lm.tok_emb.row(b as usize);
        }
        acc /= bytes.len() as f64;
        let norm = acc.dot(&acc).sqrt();
        if norm > 0.0 {
            acc /= norm;
        }
        acc
    }
}

/// Top-k by cosine similarity under the given encoder. A zero query or item
/// vector scores 0.
pub fn embed_rank(
    encoder: &dyn TextEncoder,
    catalog: &[Item],
    query: &str,
    k: usize,
) -> Vec<(String, f64)> {
    let q = encoder.encode(query);
    let qn = q.dot(&q).sqrt();
    let scored = catalog
        .iter()
        .map(|item| {
            let e = encoder.encode(&item.title);
            let en = e.dot(&e).sqrt();
            let sim = if qn > 0.0 && en > 0.0 {
                q.dot(&e) / (qn * en)
            } else {
                0.0
            };
            (item.item_id.clone(), sim)
        })
        .collect();
    rank_scored(scored, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSlate {
    pub example_ref: String,
    pub candidates: Vec<String>,
    pub ground_truth_index: usize,
    pub swapped: bool,
}

impl CandidateSlate {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.candidates.len() != k {
            return Err(Error::Integrity(format!(
                "slate {} has {} candidates, expected {k}",
                self.example_ref,
                self.candidates.len()
            )));
        }
        let mut sorted = self.candidates.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::Integrity(format!(
                "slate {} has duplicate candidates",
                self.example_ref
            )));
        }
        if self.ground_truth_index >= k {
            return Err(Error::Integrity(format!(
                "slate {} ground-truth index out of range",
                self.example_ref
            )));
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> &str {
        &self.candidates[self.ground_truth_index]
    }
}

/// Take the top-k of `ranked`; if the ground truth is missing, swap it in for
/// the lowest-ranked candidate; shuffle deterministically per example.
pub fn assemble_slate(
    example: &Example,
    ranked: &[(String, f64)],
    k: usize,
    global_seed: u64,
) -> Result<CandidateSlate> {
    if ranked.len() < k {
        return Err(Error::Schema(format!(
            "need at least {k} ranked items, got {}",
            ranked.len()
        )));
    }
    let gt = &example.ground_truth_item;
    if !ranked.iter().any(|(id, _)| id == gt) {
        return Err(Error::Integrity(format!(
            "ground truth {gt} of {} is not in the catalog ranking",
            example.example_ref()
        )));
    }
    let mut candidates: Vec<String> = ranked[..k].iter().map(|(id, _)| id.clone()).collect();
    let swapped = if candidates.contains(gt) {
        false
    } else {
        candidates[k - 1] = gt.clone();
        true
    };
    let example_ref = example.example_ref();
    let seed = derive_seed(global_seed, &format!("slate:{example_ref}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let ground_truth_index = candidates.iter().position(|c| c == gt).unwrap();
    let slate = CandidateSlate {
        example_ref,
        candidates,
        ground_truth_index,
        swapped,
    };
    slate.validate(k)?;
    Ok(slate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn items(titles: &[&str]) -> Vec<Item> {
        titles
            .iter()
            .enumerate()
            .map(|(i, t)| Item {
                item_id: format!("I{i:03}"),
                title: t.to_string(),
                image_path: String::new(),
            })
            .collect()
    }

    #[test]
    fn df_counts_documents_not_occurrences() {
        let idx = build_bm25_index(&items(&["shoe shoe shoe", "red shoe", "hat"]), 1.5, 0.75)
            .unwrap();
        assert_eq!(idx.df["shoe"], 2);
    }

    #[test]
    fn avgdl_is_mean_title_length() {
        let idx =
            build_bm25_index(&items(&["a b", "a b c d", "a b c d e f"]), 1.5, 0.75).unwrap();
        assert!((idx.avgdl - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_doc_fixture() {
        let idx = build_bm25_index(&items(&["red shoe", "blue shoe", "green hat"]), 1.5, 0.75)
            .unwrap();
        let ranked = bm25_rank(&idx, "red shoe", 3);
        // worked by hand: idf(red)=ln(2.5/1.5+1), idf(shoe)=ln(1.5/2.5+1),
        // dl=avgdl so the tf normalization is (k1+1)/(1+k1)=1
        let idf_red: f64 = (2.5f64 / 1.5 + 1.0).ln();
        let idf_shoe: f64 = (1.5f64 / 2.5 + 1.0).ln();
        assert_eq!(ranked[0].0, "I000");
        assert!((ranked[0].1 - (idf_red + idf_shoe)).abs() < 1e-9);
        assert_eq!(ranked[1].0, "I001");
        assert!((ranked[1].1 - idf_shoe).abs() < 1e-9);
        assert!((ranked[2].1 - 0.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_orders_by_item_id() {
        let idx = build_bm25_index(&items(&["b", "a", "c"]), 1.5, 0.75).unwrap();
        let ranked = bm25_rank(&idx, "zzz", 3);
        assert!(ranked.iter().all(|(_, s)| *s == 0.0));
        let ids: Vec<&str> = ranked.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["I000", "I001", "I002"]);
    }

    #[test]
    fn exact_title_query_ranks_first() {
        let idx = build_bm25_index(
            &items(&["red circle lamp", "blue circle lamp", "green desk"]),
            1.5,
            0.75,
        )
        .unwrap();
        let ranked = bm25_rank(&idx, "blue circle lamp", 3);
        assert_eq!(ranked[0].0, "I001");
    }

    #[test]
    fn permuted_catalog_scores_identically() {
        let cat = items(&["red shoe", "blue shoe", "green hat", "red hat"]);
        let mut permuted = cat.clone();
        permuted.reverse();
        let a = build_bm25_index(&cat, 1.5, 0.75).unwrap();
        let b = build_bm25_index(&permuted, 1.5, 0.75).unwrap();
        let mut ra = bm25_rank(&a, "red hat shoe", 4);
        let mut rb = bm25_rank(&b, "red hat shoe", 4);
        ra.sort_by(|x, y| x.0.cmp(&y.0));
        rb.sort_by(|x, y| x.0.cmp(&y.0));
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    /// Independent brute-force BM25 with no shared code paths.
    fn brute_force_score(titles: &[Vec<String>], query: &[String], d: usize, k1: f64, b: f64) -> f64 {
        let n = titles.len() as f64;
        let avgdl = titles.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
        let mut total = 0.0;
        for q in query {
            let df = titles.iter().filter(|t| t.contains(q)).count() as f64;
            let tf = titles[d].iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            total += idf * tf * (k1 + 1.0)
                / (tf + k1 * (1.0 - b + b * titles[d].len() as f64 / avgdl));
        }
        total
    }

    #[test]
    fn random_instances_match_brute_force() {
        let vocab = ["red", "blue", "shoe", "hat", "lamp", "desk", "old", "new"];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n_docs = rng.gen_range(2..=20);
            let cat: Vec<Item> = (0..n_docs)
                .map(|i| {
                    let len = rng.gen_range(1..=5);
                    let title: Vec<&str> =
                        (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
                    Item {
                        item_id: format!("I{i:03}"),
                        title: title.join(" "),
                        image_path: String::new(),
                    }
                })
                .collect();
            let qlen = rng.gen_range(1..=4);
            let query: Vec<String> = (0..qlen)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect();
            let idx = build_bm25_index(&cat, 1.5, 0.75).unwrap();
            let titles: Vec<Vec<String>> =
                cat.iter().map(|i| tokenize_text(&i.title)).collect();
            for d in 0..cat.len() {
                let ours = idx.score(&query, d);
                let brute = brute_force_score(&titles, &query, d, 1.5, 0.75);
                assert!((ours - brute).abs() < 1e-9, "doc {d}: {ours} vs {brute}");
            }
        }
    }

    fn example(gt: &str) -> Example {
        Example {
            conv_id: "C00001".into(),
            turn: 2,
            context: vec![],
            ground_truth_item: gt.into(),
        }
    }

    fn ranked_fixture(n: usize) -> Vec<(String, f64)> {
        (0..n).map(|i| (format!("I{i:03}"), (n - i) as f64)).collect()
    }

    #[test]
    fn no_swap_when_gt_in_top_k() {
        let slate = assemble_slate(&example("I003"), &ranked_fixture(20), 10, 0).unwrap();
        assert!(!slate.swapped);
        let mut expected: Vec<String> = (0..10).map(|i| format!("I{i:03}")).collect();
        let mut got = slate.candidates.clone();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
        assert_eq!(slate.ground_truth(), "I003");
    }

    #[test]
    fn swap_replaces_lowest_ranked() {
        let slate = assemble_slate(&example("I015"), &ranked_fixture(20), 10, 0).unwrap();
        assert!(slate.swapped);
        assert!(slate.candidates.contains(&"I015".to_string()));
        assert!(!slate.candidates.contains(&"I009".to_string()));
        // the rest of the top 10 survives
        for i in 0..9 {
            assert!(slate.candidates.contains(&format!("I{i:03}")));
        }
    }

    #[test]
    fn deterministic_shuffle_and_seed_sensitivity() {
        let ex = example("I003");
        let ranked = ranked_fixture(20);
        let a = assemble_slate(&ex, &ranked, 10, 5).unwrap();
        let b = assemble_slate(&ex, &ranked, 10, 5).unwrap();
        assert_eq!(a, b);
        let c = assemble_slate(&ex, &ranked, 10, 6).unwrap();
        assert_eq!(a.candidates.len(), c.candidates.len());
    }

    #[test]
    fn missing_gt_is_integrity_error() {
        match assemble_slate(&example("ZZZ"), &ranked_fixture(20), 10, 0) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn embed_rank_exact_title_first_and_scale_invariant() {
        let cat = items(&["red circle", "blue square", "green cross"]);
        let cfg = crate::config::RunConfig::default();
        let vlm = Vlm::init(&cfg.vision, &cfg.lm, 3);
        let enc = LmMeanEncoder { vlm: &vlm };
        let ranked = embed_rank(&enc, &cat, "blue square", 3);
        assert_eq!(ranked[0].0, "I001");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);

        struct Scaled<'a>(&'a LmMeanEncoder<'a>);
        impl TextEncoder for Scaled<'_> {
            fn encode(&self, text: &str) -> Array1<f64> {
                self.0.encode(text) * 3.0
            }
        }
        let scaled = embed_rank(&Scaled(&enc), &cat, "blue square", 3);
        let order: Vec<&str> = ranked.iter().map(|(i, _)| i.as_str()).collect();
        let order2: Vec<&str> = scaled.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(order, order2);
    }
}
