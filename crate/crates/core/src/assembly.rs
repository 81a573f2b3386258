//! Token sequence assembly.
//!
//! The three semantic sources (caption, object metadata, retrieved
//! concepts) are lowercased word tokens in one fixed-length sequence
//! with per-position provenance: caption first, then per object its
//! class words followed by attribute words, then concept words grouped
//! by anchor. On overflow, knowledge tokens are dropped from the end
//! first, then whole objects from the end; only a caption longer than
//! the budget is hard-truncated.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Sample};
use crate::detector::ObjectMeta;
use crate::error::{Error, Result};
use crate::knowledge::AnchorSet;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Splits text into lowercase word tokens. Kept behind a trait so a
/// subword tokenizer can be dropped in without touching assembly.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(|t| t.to_lowercase()).collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    WhitespaceTokenizer.tokenize(text)
}

/// Bijective token-to-id map with four fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds from an arbitrary token stream: tokens with frequency
    /// >= `min_count` get ids in (frequency desc, lexicographic) order
    /// starting at 4; everything else maps to UNK.
    pub fn from_token_stream<I>(tokens: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token.as_ref().to_string()).or_insert(0) += 1;
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = vec![
            PAD_TOKEN.into(),
            BOS_TOKEN.into(),
            EOS_TOKEN.into(),
            UNK_TOKEN.into(),
        ];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    /// One token per line, line number = id - 4. Reserved ids are
    /// implicit and not written.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let display = path.as_ref().display().to_string();
        let mut file = File::create(path.as_ref()).map_err(|e| Error::io(&display, e))?;
        for token in &self.id_to_token[RESERVED..] {
            writeln!(file, "{token}").map_err(|e| Error::io(&display, e))?;
        }
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let display = path.as_ref().display().to_string();
        let file = File::open(path.as_ref()).map_err(|e| Error::io(&display, e))?;
        let mut id_to_token: Vec<String> = vec![
            PAD_TOKEN.into(),
            BOS_TOKEN.into(),
            EOS_TOKEN.into(),
            UNK_TOKEN.into(),
        ];
        for line in BufReader::new(file).lines() {
            let token = line.map_err(|e| Error::io(&display, e))?;
            id_to_token.push(token);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// Builds the vocabulary over a split's captions, explanations, and
/// inline object labels.
pub fn build_vocab(corpus: &DatasetSplit, min_count: usize) -> Vocabulary {
    Vocabulary::from_token_stream(split_token_stream(corpus), min_count)
}

/// All word tokens of a split in deterministic order.
pub fn split_token_stream(corpus: &DatasetSplit) -> Vec<String> {
    let mut tokens = Vec::new();
    for sample in &corpus.samples {
        tokens.extend(tokenize(&sample.caption));
        if let Some(explanation) = &sample.explanation {
            tokens.extend(tokenize(explanation));
        }
        for obj in &sample.objects {
            tokens.extend(tokenize(&obj.class));
            tokens.extend(tokenize(&obj.attribute));
        }
    }
    tokens
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    Caption,
    ObjClass,
    ObjAttr,
    Knowledge,
    Pad,
}

/// The assembled model input: exactly `n_max` positions of token ids
/// with provenance tags, object grouping, and knowledge-to-anchor
/// links (`(knowledge position, anchored source position)` pairs).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<SourceTag>,
    pub object_of: Vec<Option<usize>>,
    pub anchor_links: Vec<(usize, usize)>,
    pub true_len: usize,
}

impl TokenSequence {
    pub fn n_max(&self) -> usize {
        self.ids.len()
    }

    pub fn active(&self) -> std::ops::Range<usize> {
        0..self.true_len
    }

    /// Checks the structural invariants; used by tests and debug builds.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n_max = self.ids.len();
        if self.tags.len() != n_max || self.object_of.len() != n_max {
            return Err("field lengths disagree".into());
        }
        if self.true_len > n_max {
            return Err("true_len exceeds n_max".into());
        }
        for i in 0..n_max {
            let is_pad = self.tags[i] == SourceTag::Pad;
            if (i >= self.true_len) != is_pad {
                return Err(format!("position {i}: pad tag inconsistent with true_len"));
            }
            if is_pad && self.ids[i] != PAD_ID {
                return Err(format!("position {i}: pad position with non-pad id"));
            }
        }
        let mut last_rank = 0u8;
        for i in 0..self.true_len {
            let rank = match self.tags[i] {
                SourceTag::Caption => 0,
                SourceTag::ObjClass | SourceTag::ObjAttr => 1,
                SourceTag::Knowledge => 2,
                SourceTag::Pad => return Err("pad before true_len".into()),
            };
            if rank < last_rank {
                return Err(format!("position {i}: source order violated"));
            }
            last_rank = rank;
        }
        for &(k, a) in &self.anchor_links {
            if k >= self.true_len || a >= self.true_len {
                return Err(format!("anchor link ({k},{a}) past true_len"));
            }
            if self.tags[k] != SourceTag::Knowledge {
                return Err(format!("anchor link source {k} is not a knowledge token"));
            }
            if !matches!(
                self.tags[a],
                SourceTag::Caption | SourceTag::ObjClass | SourceTag::ObjAttr
            ) {
                return Err(format!("anchor link target {a} has tag {:?}", self.tags[a]));
            }
        }
        Ok(())
    }
}

/// Assembly input with the caption already optional so ablations can
/// drop whole sources; see [`assemble`] for the full-sample contract.
#[derive(Clone, Debug, Default)]
pub struct AssemblyParts {
    pub caption_tokens: Vec<String>,
    pub objects: Vec<ObjectMeta>,
    pub anchors: AnchorSet,
    /// Index-aligned with `anchors.anchors`.
    pub neighbors: Vec<Vec<String>>,
}

/// Assembles a sample's sources into a [`TokenSequence`]. Errors if
/// the caption is empty; ablations that drop the caption go through
/// [`assemble_parts`] directly.
pub fn assemble(
    sample: &Sample,
    objects: &[ObjectMeta],
    anchors: &AnchorSet,
    neighbors: &[Vec<String>],
    vocab: &Vocabulary,
    n_max: usize,
) -> Result<TokenSequence> {
    let caption_tokens = tokenize(&sample.caption);
    if caption_tokens.is_empty() {
        return Err(Error::Assembly(format!(
            "sample '{}' has an empty caption",
            sample.id
        )));
    }
    assemble_parts(
        &AssemblyParts {
            caption_tokens,
            objects: objects.to_vec(),
            anchors: anchors.clone(),
            neighbors: neighbors.to_vec(),
        },
        vocab,
        n_max,
    )
}

/// Lower-level assembly over explicit parts. Requires `n_max >= 8` and
/// at least one token across all sources.
pub fn assemble_parts(
    parts: &AssemblyParts,
    vocab: &Vocabulary,
    n_max: usize,
) -> Result<TokenSequence> {
    if n_max < 8 {
        return Err(Error::Assembly(format!("n_max {n_max} below minimum 8")));
    }
    if parts.neighbors.len() != parts.anchors.anchors.len() {
        return Err(Error::Assembly(
            "neighbors not aligned with anchors".into(),
        ));
    }

    // caption block, hard-truncated only when it alone overflows
    let caption: Vec<&String> = parts.caption_tokens.iter().take(n_max).collect();
    let cap_len = caption.len();

    // object block: whole objects from the end are dropped until the
    // prefix fits
    struct ObjTokens {
        class_len: usize,
        words: Vec<String>,
    }
    let mut obj_blocks = Vec::new();
    let mut obj_total = 0usize;
    for obj in &parts.objects {
        let class_words = tokenize(&obj.class);
        let attr_words = tokenize(&obj.attribute);
        let mut words = class_words.clone();
        words.extend(attr_words);
        if words.is_empty() {
            continue;
        }
        if cap_len + obj_total + words.len() > n_max {
            break;
        }
        obj_total += words.len();
        obj_blocks.push(ObjTokens {
            class_len: class_words.len(),
            words,
        });
    }

    // knowledge block fills whatever room is left, token by token
    let mut budget = n_max - cap_len - obj_total;
    struct KnowToken {
        word: String,
        anchor_idx: usize,
    }
    let mut know_tokens = Vec::new();
    'outer: for (anchor_idx, concepts) in parts.neighbors.iter().enumerate() {
        for concept in concepts {
            for word in tokenize(concept) {
                if budget == 0 {
                    break 'outer;
                }
                know_tokens.push(KnowToken {
                    word,
                    anchor_idx,
                });
                budget -= 1;
            }
        }
    }

    // materialize positions
    let mut ids = Vec::with_capacity(n_max);
    let mut tags = Vec::with_capacity(n_max);
    let mut object_of = Vec::with_capacity(n_max);
    for token in &caption {
        ids.push(vocab.id(token));
        tags.push(SourceTag::Caption);
        object_of.push(None);
    }
    let obj_base = ids.len();
    for (obj_idx, block) in obj_blocks.iter().enumerate() {
        for (w, word) in block.words.iter().enumerate() {
            ids.push(vocab.id(word));
            tags.push(if w < block.class_len {
                SourceTag::ObjClass
            } else {
                SourceTag::ObjAttr
            });
            object_of.push(Some(obj_idx));
        }
    }
    let mut anchor_links = Vec::new();
    for kt in &know_tokens {
        let pos = ids.len();
        ids.push(vocab.id(&kt.word));
        tags.push(SourceTag::Knowledge);
        object_of.push(None);
        let anchor = &parts.anchors.anchors[kt.anchor_idx];
        let (lo, hi) = anchor.span;
        let offset = match anchor.kind {
            crate::knowledge::SourceKind::Caption => 0,
            crate::knowledge::SourceKind::Object => obj_base,
        };
        for s in lo..hi {
            let target = offset + s;
            // targets that fell to truncation produce no link
            let in_caption = anchor.kind == crate::knowledge::SourceKind::Caption
                && target < cap_len;
            let in_objects = anchor.kind == crate::knowledge::SourceKind::Object
                && target < obj_base + obj_total;
            if in_caption || in_objects {
                anchor_links.push((pos, target));
            }
        }
    }

    let true_len = ids.len();
    ids.resize(n_max, PAD_ID);
    tags.resize(n_max, SourceTag::Pad);
    object_of.resize(n_max, None);

    let seq = TokenSequence {
        ids,
        tags,
        object_of,
        anchor_links,
        true_len,
    };
    debug_assert!(seq.check_invariants().is_ok(), "{:?}", seq.check_invariants());
    if true_len == 0 {
        return Err(Error::Assembly("no tokens in any source".into()));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{Anchor, SourceKind};

    fn sample(caption: &str) -> Sample {
        Sample {
            id: "s".into(),
            caption: caption.into(),
            objects: vec![],
            explanation: None,
            image_ref: None,
        }
    }

    fn vocab_over(words: &[&str]) -> Vocabulary {
        Vocabulary::from_token_stream(words.iter().copied(), 1)
    }

    #[test]
    fn vocab_min_count_and_reserved() {
        let v = Vocabulary::from_token_stream(["a", "a", "b"], 1);
        assert_eq!(v.len(), 6); // 4 reserved + a + b
        assert_eq!(v.id("a"), 4); // most frequent first
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);

        let v2 = Vocabulary::from_token_stream(["a", "a", "b"], 2);
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_deterministic_across_builds() {
        let tokens = ["z", "m", "z", "a", "m", "z"];
        let v1 = Vocabulary::from_token_stream(tokens, 1);
        let v2 = Vocabulary::from_token_stream(tokens, 1);
        assert_eq!(v1, v2);
        // frequency desc then lexicographic: z(3), m(2), a(1)
        assert_eq!(v1.id("z"), 4);
        assert_eq!(v1.id("m"), 5);
        assert_eq!(v1.id("a"), 6);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::from_token_stream(["dog", "cat", "dog"], 1);
        let f = tempfile::NamedTempFile::new().unwrap();
        v.write_to(f.path()).unwrap();
        let reloaded = Vocabulary::read_from(f.path()).unwrap();
        assert_eq!(v, reloaded);
        let content = std::fs::read_to_string(f.path()).unwrap();
        // line number = id - 4
        assert_eq!(content, "dog\ncat\n");
    }

    #[test]
    fn caption_only_padding() {
        let v = vocab_over(&["a", "b"]);
        let seq = assemble(
            &sample("a b"),
            &[],
            &AnchorSet::default(),
            &[],
            &v,
            8,
        )
        .unwrap();
        assert_eq!(seq.true_len, 2);
        assert_eq!(seq.ids[..2], [v.id("a"), v.id("b")]);
        assert!(seq.ids[2..].iter().all(|&id| id == PAD_ID));
        assert_eq!(seq.tags[0], SourceTag::Caption);
        assert_eq!(seq.tags[2], SourceTag::Pad);
        seq.check_invariants().unwrap();
    }

    #[test]
    fn object_class_then_attribute_order() {
        let v = vocab_over(&["a", "dog", "brown"]);
        let objects = [ObjectMeta::new("dog", "brown", 0.9)];
        let seq = assemble(&sample("a"), &objects, &AnchorSet::default(), &[], &v, 8).unwrap();
        assert_eq!(
            &seq.tags[..4],
            &[
                SourceTag::Caption,
                SourceTag::ObjClass,
                SourceTag::ObjAttr,
                SourceTag::Pad
            ]
        );
        assert_eq!(seq.object_of[1], Some(0));
        assert_eq!(seq.object_of[2], Some(0));
        assert_eq!(seq.true_len, 3);
    }

    #[test]
    fn empty_caption_errors() {
        let v = vocab_over(&[]);
        let err = assemble(&sample("   "), &[], &AnchorSet::default(), &[], &v, 8).unwrap_err();
        assert!(err.to_string().contains("empty caption"));
    }

    fn knowledge_fixture() -> (AnchorSet, Vec<Vec<String>>) {
        let anchors = AnchorSet {
            anchors: vec![Anchor {
                label: "light".into(),
                span: (1, 2),
                kind: SourceKind::Caption,
            }],
        };
        let neighbors = vec![vec!["bright".to_string()]];
        (anchors, neighbors)
    }

    #[test]
    fn knowledge_token_links_to_anchor_span() {
        let v = vocab_over(&["red", "light", "bright"]);
        let (anchors, neighbors) = knowledge_fixture();
        let seq = assemble(&sample("red light"), &[], &anchors, &neighbors, &v, 8).unwrap();
        assert_eq!(seq.true_len, 3);
        assert_eq!(seq.tags[2], SourceTag::Knowledge);
        assert_eq!(seq.anchor_links, vec![(2, 1)]);
        seq.check_invariants().unwrap();
    }

    #[test]
    fn overflow_drops_knowledge_first() {
        // caption (4) + object (4) exactly fills n_max = 8; the
        // knowledge token must vanish along with its links
        let v = vocab_over(&["a", "b", "c", "d", "big", "red", "fire", "truck", "bright"]);
        let objects = [ObjectMeta::new("big red", "fire truck", 0.9)];
        let (anchors, neighbors) = knowledge_fixture();
        let seq = assemble(&sample("a b c d"), &objects, &anchors, &neighbors, &v, 8).unwrap();
        assert_eq!(seq.true_len, 8);
        assert!(seq.anchor_links.is_empty());
        assert!(seq.tags.iter().all(|&t| t != SourceTag::Knowledge));
        seq.check_invariants().unwrap();
    }

    #[test]
    fn overflow_drops_whole_objects_from_end() {
        let v = vocab_over(&["a", "b", "c", "d", "e", "f", "dog", "cat", "x", "y"]);
        let objects = [
            ObjectMeta::new("dog", "x y", 0.9),  // 3 tokens, fits
            ObjectMeta::new("cat", "", 0.8),     // would exceed 8
        ];
        let seq = assemble(&sample("a b c d e f"), &objects, &AnchorSet::default(), &[], &v, 9)
            .unwrap();
        // 6 caption + 3 object-0 tokens = 9; object 1 dropped whole
        assert_eq!(seq.true_len, 9);
        assert_eq!(seq.object_of[6], Some(0));
        assert_eq!(seq.object_of[8], Some(0));
        assert!(seq.ids[..9].iter().all(|&id| id != v.id("cat")));
    }

    #[test]
    fn oversized_caption_hard_truncates() {
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let caption = words.join(" ");
        let v = Vocabulary::from_token_stream(words.iter().map(String::as_str), 1);
        let seq = assemble(&sample(&caption), &[], &AnchorSet::default(), &[], &v, 8).unwrap();
        assert_eq!(seq.true_len, 8);
        assert!(seq.tags[..8].iter().all(|&t| t == SourceTag::Caption));
    }

    #[test]
    fn multi_word_concept_one_position_per_word() {
        let v = vocab_over(&["red", "light", "warning", "sign"]);
        let anchors = AnchorSet {
            anchors: vec![Anchor {
                label: "red light".into(),
                span: (0, 2),
                kind: SourceKind::Caption,
            }],
        };
        let neighbors = vec![vec!["warning sign".to_string()]];
        let seq = assemble(&sample("red light"), &[], &anchors, &neighbors, &v, 8).unwrap();
        assert_eq!(seq.true_len, 4);
        assert_eq!(seq.tags[2], SourceTag::Knowledge);
        assert_eq!(seq.tags[3], SourceTag::Knowledge);
        // both words link to both span tokens
        assert_eq!(
            seq.anchor_links,
            vec![(2, 0), (2, 1), (3, 0), (3, 1)]
        );
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = vocab_over(&["a"]);
        let seq = assemble(&sample("a zzz"), &[], &AnchorSet::default(), &[], &v, 8).unwrap();
        assert_eq!(seq.ids[1], UNK_ID);
    }

    #[test]
    fn always_exactly_n_max_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = vocab_over(&["a", "b", "c", "dog", "red"]);
        for _ in 0..100 {
            let cap_n = rng.gen_range(1..=12);
            let caption: Vec<String> = (0..cap_n).map(|i| format!("t{}", i % 5)).collect();
            let n_obj = rng.gen_range(0..4);
            let objects: Vec<ObjectMeta> = (0..n_obj)
                .map(|i| ObjectMeta::new(format!("dog{i}"), "red", 0.5))
                .collect();
            let parts = AssemblyParts {
                caption_tokens: caption,
                objects,
                anchors: AnchorSet::default(),
                neighbors: vec![],
            };
            let n_max = rng.gen_range(8..=16);
            let seq = assemble_parts(&parts, &v, n_max).unwrap();
            assert_eq!(seq.ids.len(), n_max);
            assert_eq!(seq.tags.len(), n_max);
            seq.check_invariants().unwrap();
        }
    }
}
