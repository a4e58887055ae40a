//! Label tries and restrictive greedy decoding over them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{argmax_among, CacheSegment, Model, Session};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<u32, usize>,
    /// Label completed at this node.
    terminal: Option<usize>,
    /// Some label in this subtree; the only one if `reachable == 1`.
    any_label: usize,
    reachable: usize,
}

/// Prefix tree over label token sequences, each ending in the separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrie {
    labels: Vec<String>,
    sequences: Vec<Vec<u32>>,
    nodes: Vec<Node>,
}

impl LabelTrie {
    /// Builds from explicit token sequences (separator already appended).
    pub fn from_sequences(labels: Vec<String>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Trie("label set is empty".into()));
        }
        if labels.len() != sequences.len() {
            return Err(Error::Trie(format!(
                "{} labels but {} sequences",
                labels.len(),
                sequences.len()
            )));
        }
        let mut nodes = vec![Node::default()];
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Trie(format!(
                    "label `{}` has an empty token sequence",
                    labels[i]
                )));
            }
            let mut at = 0;
            nodes[0].reachable += 1;
            nodes[0].any_label = i;
            for &tok in seq {
                if let Some(other) = nodes[at].terminal {
                    return Err(collision(&labels[other], &labels[i]));
                }
                at = match nodes[at].children.get(&tok) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.insert(tok, next);
                        next
                    }
                };
                nodes[at].reachable += 1;
                nodes[at].any_label = i;
            }
            if let Some(other) = nodes[at].terminal {
                return Err(if labels[other] == labels[i] {
                    Error::Trie(format!("label `{}` appears twice", labels[i]))
                } else {
                    collision(&labels[other], &labels[i])
                });
            }
            if !nodes[at].children.is_empty() {
                let other = nodes[at].any_label;
                let other = (0..i).find(|&j| sequences[j].starts_with(seq)).unwrap_or(other);
                return Err(collision(&labels[i], &labels[other]));
            }
            nodes[at].terminal = Some(i);
        }
        Ok(Self {
            labels,
            sequences,
            nodes,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, label: usize) -> &[u32] {
        &self.sequences[label]
    }

    /// Longest label sequence, in tokens.
    pub fn max_depth(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn collision(short: &str, long: &str) -> Error {
    Error::Trie(format!(
        "label `{short}` is a prefix of label `{long}` even with the separator appended"
    ))
}

/// Trie over `tokenize(label) + separator` for each label.
pub fn build_label_trie(labels: &[String], tokenizer: &dyn Tokenizer, separator: u32) -> Result<LabelTrie> {
    build_label_trie_with(labels, tokenizer, separator, |l| l.to_string())
}

/// Like [`build_label_trie`], tokenizing `render(label)` instead of the bare
/// label (e.g. with the template's leading space).
pub fn build_label_trie_with(
    labels: &[String],
    tokenizer: &dyn Tokenizer,
    separator: u32,
    render: impl Fn(&str) -> String,
) -> Result<LabelTrie> {
    let sequences = labels
        .iter()
        .map(|l| {
            let mut s = tokenizer.encode(&render(l));
            s.push(separator);
            s
        })
        .collect();
    LabelTrie::from_sequences(labels.to_vec(), sequences)
}

/// Greedy decoding restricted to the trie: at each node, the argmax among
/// the node's children is taken. Stops as soon as only one label remains
/// reachable. Returns the label index.
pub fn constrained_decode(
    model: &Model,
    segments: &[&CacheSegment],
    task_tokens: &[u32],
    task_positions: &[usize],
    trie: &LabelTrie,
) -> Result<usize> {
    let mut at = 0;
    if trie.nodes[at].reachable == 1 {
        return Ok(trie.nodes[at].any_label);
    }
    let mut session = Session::start(model, segments, task_tokens, task_positions)?;
    loop {
        let node = &trie.nodes[at];
        let candidates: Vec<u32> = node.children.keys().copied().collect();
        let token = argmax_among(session.logits(), &candidates)
            .ok_or_else(|| Error::Trie(format!("child token outside the model vocabulary at node {at}")))?;
        at = node.children[&token];
        let next = &trie.nodes[at];
        if let Some(label) = next.terminal {
            return Ok(label);
        }
        if next.reachable == 1 {
            return Ok(next.any_label);
        }
        session.push(token)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ByteTokenizer;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_single_token_labels() {
        let t = build_label_trie(&strings(&["a", "b"]), &ByteTokenizer, 10).unwrap();
        assert_eq!(t.node_count(), 5);
        assert_eq!(t.max_depth(), 2);
        assert_eq!(t.sequence(1), &[u32::from(b'b'), 10]);
    }

    #[test]
    fn shared_prefix_then_branch() {
        let t = build_label_trie(&strings(&["cat", "car", "dog"]), &ByteTokenizer, 10).unwrap();
        // root → c → a → {t→\n, r→\n}; root → d → o → g → \n
        assert_eq!(t.node_count(), 1 + 2 + 2 + 2 + 4);
        let c = t.nodes[0].children[&u32::from(b'c')];
        let a = t.nodes[c].children[&u32::from(b'a')];
        assert_eq!(t.nodes[a].children.len(), 2);
        assert_eq!(t.nodes[a].reachable, 2);
    }

    #[test]
    fn prefix_collision_names_both_labels() {
        let err = build_label_trie(&strings(&["cat", "category"]), &ByteTokenizer, u32::from(b'e')).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`cat`") && msg.contains("`category`"), "{msg}");
        let err = build_label_trie(&strings(&["category", "cat"]), &ByteTokenizer, u32::from(b'e')).unwrap_err();
        assert!(err.to_string().contains("`category`"));
        // a newline separator keeps them apart
        assert!(build_label_trie(&strings(&["cat", "category"]), &ByteTokenizer, 10).is_ok());
        assert!(build_label_trie(&strings(&["x", "x"]), &ByteTokenizer, 10).is_err());
        assert!(build_label_trie(&[], &ByteTokenizer, 10).is_err());
    }
}
