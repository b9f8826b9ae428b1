//! Child → parent code hierarchy.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Vocabulary};

/// Nodes `0..C` are the vocabulary codes; internal concepts follow in order
/// of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub labels: Vec<String>,
    pub parents: Vec<Vec<usize>>,
    pub n_codes: usize,
}

/// Per-code ancestor lists (self included, ascending node order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestryIndex {
    pub n_nodes: usize,
    pub ancestors: Vec<Vec<usize>>,
}

impl AncestryIndex {
    pub fn n_codes(&self) -> usize {
        self.ancestors.len()
    }

    /// Every code is its own only ancestor.
    pub fn flat(n_codes: usize) -> Self {
        Self { n_nodes: n_codes, ancestors: (0..n_codes).map(|i| vec![i]).collect() }
    }
}

impl Ontology {
    pub fn from_edges(vocab: &Vocabulary, edges: &[(String, String)]) -> Result<Self, DataError> {
        let mut labels: Vec<String> = vocab.labels().to_vec();
        let mut index: HashMap<String, usize> = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let mut node = |l: &str, labels: &mut Vec<String>| -> usize {
            if let Some(&i) = index.get(l) {
                return i;
            }
            labels.push(l.to_owned());
            index.insert(l.to_owned(), labels.len() - 1);
            labels.len() - 1
        };
        let mut pairs = Vec::with_capacity(edges.len());
        for (c, p) in edges {
            if c == p {
                return Err(DataError::Cycle { child: c.clone(), parent: p.clone() });
            }
            let ci = node(c, &mut labels);
            let pi = node(p, &mut labels);
            pairs.push((ci, pi));
        }
        let n = labels.len();
        let mut parents = vec![Vec::new(); n];
        let mut has_child = vec![false; n];
        for (c, p) in pairs {
            if !parents[c].contains(&p) {
                parents[c].push(p);
            }
            has_child[p] = true;
        }
        for (i, l) in labels.iter().enumerate().skip(vocab.len()) {
            if !has_child[i] {
                return Err(DataError::Validation(format!("ontology leaf {l:?} is not in the vocabulary")));
            }
        }
        let ont = Self { labels, parents, n_codes: vocab.len() };
        ont.check_acyclic()?;
        Ok(ont)
    }

    pub fn node_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    fn check_acyclic(&self) -> Result<(), DataError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.n_nodes();
        let mut state = vec![0u8; n];
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            state[root] = 1;
            while let Some(top) = stack.last_mut() {
                let v = top.0;
                if top.1 < self.parents[v].len() {
                    let p = self.parents[v][top.1];
                    top.1 += 1;
                    match state[p] {
                        0 => {
                            state[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => {
                            return Err(DataError::Cycle {
                                child: self.labels[v].clone(),
                                parent: self.labels[p].clone(),
                            })
                        }
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// All nodes reachable from `node` along parent edges, including itself.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(&self.parents[v]);
            }
        }
        seen.into_iter().collect()
    }

    pub fn ancestry_index(&self) -> AncestryIndex {
        AncestryIndex { n_nodes: self.n_nodes(), ancestors: (0..self.n_codes).map(|i| self.ancestors(i)).collect() }
    }
}

pub fn parse_ontology<R: std::io::Read>(reader: R, vocab: &Vocabulary) -> Result<Ontology, DataError> {
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: n, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (c, p) = line
            .split_once('\t')
            .ok_or_else(|| DataError::Parse { line: n, msg: "expected child<TAB>parent".into() })?;
        let (c, p) = (c.trim(), p.trim());
        if c.is_empty() || p.is_empty() {
            return Err(DataError::Parse { line: n, msg: "empty node label".into() });
        }
        edges.push((c.to_owned(), p.to_owned()));
    }
    Ontology::from_edges(vocab, &edges)
}

pub fn load_ontology(path: &Path, vocab: &Vocabulary) -> Result<Ontology, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_ontology(f, vocab)
}
