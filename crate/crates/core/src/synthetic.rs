//! Seeded toy corpora for smoke tests, gradient checks and sanity runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledExample, RawEdge};

const FILLER: &[&str] = &[
    "the", "a", "movie", "plot", "was", "quite", "very", "and", "it", "story", "actor", "scene", "of", "to", "in",
    "with", "felt", "long", "some", "this",
];

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Two-class keyword task: class `pos` iff the sentence contains "great".
pub fn keyword_task(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=7);
            let mut toks: Vec<String> = (0..len).map(|_| FILLER.choose(&mut rng).unwrap().to_string()).collect();
            let positive = i % 2 == 0;
            if positive {
                let at = rng.gen_range(0..len);
                toks[at] = "great".into();
            }
            LabeledExample::classification(if positive { "pos" } else { "neg" }, toks)
        })
        .collect()
}

/// Tagging task: tag `U` for capitalised tokens, `L` otherwise. About a
/// third of tokens are capitalised, independent of the word.
pub fn case_tagging(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words(40);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..=10);
            let mut toks = Vec::with_capacity(len);
            let mut tags = Vec::with_capacity(len);
            for _ in 0..len {
                let w = vocab.choose(&mut rng).unwrap();
                if rng.gen_bool(1.0 / 3.0) {
                    toks.push(w.to_uppercase());
                    tags.push("U".to_string());
                } else {
                    toks.push(w.clone());
                    tags.push("L".to_string());
                }
            }
            LabeledExample::tagging(toks, tags)
        })
        .collect()
}

/// Long-range task: `same` iff the first and last of `len` tokens are equal.
/// End tokens come from `end_vocab` words and the middle from `filler_vocab`
/// other words, so no bag-of-words feature separates the classes. Classes
/// alternate.
pub fn pairing_task(n: usize, len: usize, end_vocab: usize, filler_vocab: usize, seed: u64) -> Vec<LabeledExample> {
    assert!(len >= 2 && end_vocab >= 2 && filler_vocab >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ends: Vec<String> = (0..end_vocab).map(|i| format!("e{i}")).collect();
    let fillers: Vec<String> = (0..filler_vocab).map(|i| format!("f{i}")).collect();
    (0..n)
        .map(|i| {
            let mut toks: Vec<String> = (0..len).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
            let first = rng.gen_range(0..end_vocab);
            let same = i % 2 == 0;
            let last = if same {
                first
            } else {
                (first + rng.gen_range(1..end_vocab)) % end_vocab
            };
            toks[0] = ends[first].clone();
            toks[len - 1] = ends[last].clone();
            LabeledExample::classification(if same { "same" } else { "diff" }, toks)
        })
        .collect()
}

/// Four-token examples carrying POS tags and a dependency arc, for each
/// task kind: `(classification, tagging, pair)`.
pub fn four_token_examples() -> (LabeledExample, LabeledExample, LabeledExample) {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let decorate = |ex: &mut LabeledExample| {
        for s in std::iter::once(&mut ex.sentence).chain(ex.sentence_b.as_mut()) {
            s.pos_tags = Some(toks("NNP VBZ DT NN"));
            s.edges = vec![
                RawEdge {
                    head: 1,
                    dep: 0,
                    rel: "nsubj".into(),
                },
                RawEdge {
                    head: 1,
                    dep: 3,
                    rel: "obj".into(),
                },
            ];
        }
    };
    let mut c = LabeledExample::classification("pos", toks("Ann likes the film"));
    let mut t = LabeledExample::tagging(toks("Ann likes the film"), toks("B-PER O O B-MISC"));
    let mut p = LabeledExample::pair("entail", toks("Ann likes the film"), toks("Bob sees a show"));
    for ex in [&mut c, &mut t, &mut p] {
        decorate(ex);
    }
    (c, t, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExampleKind;

    #[test]
    fn generators_are_seeded_and_well_formed() {
        assert_eq!(keyword_task(20, 1), keyword_task(20, 1));
        for ex in keyword_task(20, 1) {
            assert_eq!(ex.class() == Some("pos"), ex.tokens().iter().any(|t| t == "great"));
        }
        for ex in case_tagging(30, 2) {
            ex.validate().unwrap();
            for (t, g) in ex.tokens().iter().zip(ex.tags().unwrap()) {
                assert_eq!(g == "U", t.starts_with('W'));
            }
        }
        let p = pairing_task(10, 20, 4, 8, 3);
        for ex in &p {
            let t = ex.tokens();
            assert_eq!(t.len(), 20);
            assert_eq!(ex.class() == Some("same"), t[0] == t[19]);
        }
        let (c, t, q) = four_token_examples();
        assert_eq!(
            [c.kind(), t.kind(), q.kind()],
            [ExampleKind::Classification, ExampleKind::Tagging, ExampleKind::Pair]
        );
        for ex in [c, t, q] {
            ex.validate().unwrap();
        }
    }
}
