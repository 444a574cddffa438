//! Bracketed constituency trees.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(s: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push(Tok::Open);
                i += 1;
            }
            b')' => {
                out.push(Tok::Close);
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.push(Tok::Atom(&s[start..i]));
            }
        }
    }
    out
}

/// Number of closing brackets that immediately follow each leaf of a
/// bracketed parse such as `(NP (DT The) (NN planet))`. The preterminal's own
/// bracket counts, so every leaf gets at least 1.
pub fn closing_nodes(bracketed: &str, leaf_count: usize) -> Result<Vec<u32>> {
    let toks = lex(bracketed);
    let mut counts: Vec<u32> = Vec::with_capacity(leaf_count);
    let mut depth: i64 = 0;
    let mut counting = false;
    let mut saw_node = false;
    for (i, tok) in toks.iter().enumerate() {
        match tok {
            Tok::Open => {
                depth += 1;
                saw_node = true;
                counting = false;
            }
            Tok::Close => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::Tree(format!("unbalanced ')' at token {i}")));
                }
                if counting {
                    *counts.last_mut().expect("counting implies a leaf") += 1;
                }
            }
            Tok::Atom(atom) => {
                let is_label = i > 0 && toks[i - 1] == Tok::Open;
                if is_label {
                    continue;
                }
                // A leaf must be the single child of a preterminal `(TAG leaf)`.
                let preterminal = i >= 2 && toks[i - 2] == Tok::Open && matches!(toks[i - 1], Tok::Atom(_));
                if !preterminal || toks.get(i + 1) != Some(&Tok::Close) {
                    return Err(Error::Tree(format!("leaf {atom:?} is not wrapped in a preterminal")));
                }
                counts.push(0);
                counting = true;
            }
        }
    }
    if depth != 0 {
        return Err(Error::Tree(format!("{depth} unclosed bracket(s)")));
    }
    if !saw_node {
        return Err(Error::Tree("no bracketed node".into()));
    }
    if counts.len() != leaf_count {
        return Err(Error::Tree(format!(
            "tree has {} leaves, expected {leaf_count}",
            counts.len()
        )));
    }
    Ok(counts)
}

/// A constituency tree whose leaves hang under preterminals.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseTree {
    Phrase { label: String, children: Vec<ParseTree> },
    Leaf { tag: String, word: String },
}

impl ParseTree {
    pub fn phrase(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree::Phrase {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(tag: impl Into<String>, word: impl Into<String>) -> Self {
        ParseTree::Leaf {
            tag: tag.into(),
            word: word.into(),
        }
    }

    pub fn to_bracketed(&self) -> String {
        let mut s = String::new();
        self.write_bracketed(&mut s);
        s
    }

    fn write_bracketed(&self, out: &mut String) {
        match self {
            ParseTree::Leaf { tag, word } => {
                out.push('(');
                out.push_str(tag);
                out.push(' ');
                out.push_str(word);
                out.push(')');
            }
            ParseTree::Phrase { label, children } => {
                out.push('(');
                out.push_str(label);
                for c in children {
                    out.push(' ');
                    c.write_bracketed(out);
                }
                out.push(')');
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ParseTree::Leaf { .. } => 1,
            ParseTree::Phrase { children, .. } => children.iter().map(ParseTree::leaf_count).sum(),
        }
    }

    /// Total number of bracketed nodes (phrases and preterminals).
    pub fn node_count(&self) -> usize {
        match self {
            ParseTree::Leaf { .. } => 1,
            ParseTree::Phrase { children, .. } => 1 + children.iter().map(ParseTree::node_count).sum::<usize>(),
        }
    }

    /// Closing-node count per leaf, computed on the tree structure: a leaf
    /// closes its preterminal plus every ancestor of which it is the last leaf.
    pub fn ncn(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.leaf_count());
        self.collect_ncn(&mut out);
        out
    }

    fn collect_ncn(&self, out: &mut Vec<u32>) {
        match self {
            ParseTree::Leaf { .. } => out.push(1),
            ParseTree::Phrase { children, .. } => {
                for c in children {
                    c.collect_ncn(out);
                }
                if !children.is_empty() {
                    *out.last_mut().expect("non-empty phrase has a leaf") += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(
            closing_nodes("(NP (DT The) (JJ sixth) (NN planet))", 3).unwrap(),
            [1, 1, 2]
        );
        assert_eq!(closing_nodes("(X a)", 1).unwrap(), [1]);
        assert_eq!(closing_nodes("(A (B (C x) (D y)))", 2).unwrap(), [1, 3]);
    }

    #[test]
    fn sentence_level_counts() {
        let s = "(S (NP (DT The) (JJ sixth) (NN planet)) (VP (VBD was) (ADJP (NP (CD ten) (NNS times)) (JJR larger))))";
        assert_eq!(closing_nodes(s, 7).unwrap(), [1, 1, 2, 1, 1, 2, 4]);
    }

    #[test]
    fn malformed_trees() {
        assert!(closing_nodes("(A (B x)", 1).is_err());
        assert!(closing_nodes("(A (B x)))", 1).is_err());
        assert!(closing_nodes("(A (B x))", 2).is_err());
        assert!(closing_nodes("(A x y)", 2).is_err());
        assert!(closing_nodes("", 0).is_err());
    }

    #[test]
    fn unlabelled_root_is_accepted() {
        assert_eq!(closing_nodes("( (S (NN a) (VB b)))", 2).unwrap(), [1, 3]);
    }

    #[test]
    fn tree_rendering_and_walk() {
        let t = ParseTree::phrase(
            "NP",
            vec![
                ParseTree::leaf("DT", "The"),
                ParseTree::leaf("JJ", "sixth"),
                ParseTree::leaf("NN", "planet"),
            ],
        );
        assert_eq!(t.to_bracketed(), "(NP (DT The) (JJ sixth) (NN planet))");
        assert_eq!(t.ncn(), [1, 1, 2]);
        assert_eq!(t.node_count(), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_tree() -> impl Strategy<Value = ParseTree> {
            let leaf = "[a-z]{1,4}".prop_map(|w| ParseTree::leaf("T", w));
            leaf.prop_recursive(5, 40, 4, |inner| {
                proptest::collection::vec(inner, 1..4).prop_map(|c| ParseTree::phrase("P", c))
            })
        }

        /// Independent walker: for each leaf, count the nodes whose span ends at it.
        fn spans(t: &ParseTree, start: usize, ends: &mut Vec<usize>) -> usize {
            match t {
                ParseTree::Leaf { .. } => {
                    ends.push(start);
                    start + 1
                }
                ParseTree::Phrase { children, .. } => {
                    let mut pos = start;
                    for c in children {
                        pos = spans(c, pos, ends);
                    }
                    ends.push(pos - 1);
                    pos
                }
            }
        }

        proptest! {
            #[test]
            fn scan_matches_tree_walk(t in arb_tree()) {
                let n = t.leaf_count();
                let scanned = closing_nodes(&t.to_bracketed(), n).unwrap();
                let mut ends = Vec::new();
                spans(&t, 0, &mut ends);
                let mut oracle = vec![0u32; n];
                for e in ends {
                    oracle[e] += 1;
                }
                prop_assert_eq!(&scanned, &oracle);
                prop_assert_eq!(scanned.iter().map(|&c| c as usize).sum::<usize>(), t.node_count());
                prop_assert_eq!(t.ncn(), scanned);
            }
        }
    }
}
