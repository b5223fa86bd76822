//! Imagination trees: the imagined states built between two real actions,
//! rooted at the real state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("node {node} refers to parent {parent}, which does not precede it")]
    DanglingParent { node: usize, parent: usize },
    #[error("node {0} has no parent; only node 0 may be the root")]
    ExtraRoot(usize),
    #[error("node 0 must be the root")]
    RootHasParent,
    #[error("tree has no nodes")]
    Empty,
}

/// Rooted tree stored as parent pointers; node 0 is the real state and
/// nodes are numbered in creation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImaginationTree {
    parents: Vec<Option<usize>>,
}

impl Default for ImaginationTree {
    fn default() -> Self {
        Self::new()
    }
}

impl ImaginationTree {
    /// A lone root.
    pub fn new() -> Self {
        Self { parents: vec![None] }
    }

    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<Self, TreeError> {
        match parents.first() {
            None => return Err(TreeError::Empty),
            Some(Some(_)) => return Err(TreeError::RootHasParent),
            Some(None) => {}
        }
        for (node, p) in parents.iter().enumerate().skip(1) {
            match *p {
                None => return Err(TreeError::ExtraRoot(node)),
                Some(parent) if parent >= node => return Err(TreeError::DanglingParent { node, parent }),
                Some(_) => {}
            }
        }
        Ok(Self { parents })
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    /// True when only the root is present.
    pub fn is_empty(&self) -> bool {
        self.parents.len() == 1
    }

    pub fn add_child(&mut self, parent: usize) -> Result<usize, TreeError> {
        let node = self.parents.len();
        if parent >= node {
            return Err(TreeError::DanglingParent { node, parent });
        }
        self.parents.push(Some(parent));
        Ok(node)
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(node))
            .map(|(i, _)| i)
    }

    pub fn depth(&self, mut node: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parents[node] {
            node = p;
            d += 1;
        }
        d
    }

    pub fn max_depth(&self) -> usize {
        (0..self.len()).map(|n| self.depth(n)).max().unwrap_or(0)
    }

    /// Nodes from the root down to `node`, inclusive.
    pub fn path_to(&self, mut node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while let Some(p) = self.parents[node] {
            path.push(p);
            node = p;
        }
        path.reverse();
        path
    }

    /// Every imagined node hangs directly off the root.
    pub fn is_star(&self) -> bool {
        self.parents.iter().skip(1).all(|p| *p == Some(0))
    }

    /// No node has more than one child.
    pub fn is_path(&self) -> bool {
        let mut child_count = vec![0usize; self.len()];
        for p in self.parents.iter().flatten() {
            child_count[*p] += 1;
        }
        child_count.iter().all(|&c| c <= 1)
    }

    /// Canonical string that is equal for two trees iff they are isomorphic
    /// as rooted trees with unordered children. A leaf is `()`.
    pub fn canonical_shape(&self) -> String {
        let mut codes: Vec<String> = vec![String::new(); self.len()];
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); self.len()];
        for (n, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                kids[*p].push(n);
            }
        }
        // Children always have larger indices than parents.
        for n in (0..self.len()).rev() {
            let mut child_codes: Vec<&str> = kids[n].iter().map(|&k| codes[k].as_str()).collect();
            child_codes.sort_unstable();
            let mut s = String::with_capacity(2 + child_codes.iter().map(|c| c.len()).sum::<usize>());
            s.push('(');
            child_codes.iter().for_each(|c| s.push_str(c));
            s.push(')');
            codes[n] = s;
        }
        std::mem::take(&mut codes[0])
    }
}

/// Count trees by canonical shape; most frequent first, ties by shape.
pub fn shape_histogram<'a>(trees: impl IntoIterator<Item = &'a ImaginationTree>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in trees {
        *counts.entry(t.canonical_shape()).or_default() += 1;
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
