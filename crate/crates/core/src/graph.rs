//! Undirected simple graphs, spanning trees and a union-find helper.
//!
//! Nodes are `0..size`. Edges are stored as `(i, j)` with `i < j`.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Canonical orientation of an undirected pair.
#[inline]
pub fn pair(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; returns false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            core::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Undirected simple graph on labeled nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl Graph {
    pub fn empty(size: usize) -> Self {
        Self { adjacency: vec![BTreeSet::new(); size] }
    }

    pub fn from_edges(size: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(size);
        for &(i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn size(&self) -> usize {
        self.adjacency.len()
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.size();
        if i >= n || j >= n {
            return Err(Error::DimensionMismatch { expected: n, found: i.max(j) + 1 });
        }
        if i == j {
            return Err(Error::InvalidInput(alloc::format!("self-loop on node {i}")));
        }
        self.adjacency[i].insert(j);
        self.adjacency[j].insert(i);
        Ok(())
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i).is_some_and(|s| s.contains(&j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().copied()
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, adj) in self.adjacency.iter().enumerate() {
            out.extend(adj.range(i + 1..).map(|&j| (i, j)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        let n = self.size();
        if n == 0 {
            return true;
        }
        let mut ds = DisjointSet::new(n);
        let mut components = n;
        for (i, j) in self.edges() {
            if ds.union(i, j) {
                components -= 1;
            }
        }
        components == 1
    }

    /// Induced subgraph on `nodes`, relabeled `0..nodes.len()` in the given order.
    pub fn induced(&self, nodes: &[usize]) -> Graph {
        let mut g = Graph::empty(nodes.len());
        for (a, &u) in nodes.iter().enumerate() {
            for (b, &v) in nodes.iter().enumerate().skip(a + 1) {
                if self.has_edge(u, v) {
                    g.adjacency[a].insert(b);
                    g.adjacency[b].insert(a);
                }
            }
        }
        g
    }

    /// Relabels node `old` to `order.position(old)`; `order` must be a permutation.
    pub fn permuted(&self, order: &[usize]) -> Graph {
        self.induced(order)
    }
}

/// A spanning tree over `0..size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanningTree {
    size: usize,
    edges: Vec<(usize, usize)>,
}

impl SpanningTree {
    /// Validates that `edges` form a spanning tree on `size` nodes.
    pub fn new(size: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if size < 1 {
            return Err(Error::InvalidInput("spanning tree needs at least one node".into()));
        }
        if edges.len() != size - 1 {
            return Err(Error::InvalidInput(alloc::format!(
                "spanning tree on {size} nodes needs {} edges, got {}",
                size - 1,
                edges.len()
            )));
        }
        let mut ds = DisjointSet::new(size);
        let mut canon = Vec::with_capacity(edges.len());
        for (i, j) in edges {
            if i >= size || j >= size || i == j {
                return Err(Error::InvalidInput(alloc::format!("invalid tree edge ({i}, {j})")));
            }
            if !ds.union(i, j) {
                return Err(Error::InvalidInput(alloc::format!("edge ({i}, {j}) closes a cycle")));
            }
            canon.push(pair(i, j));
        }
        canon.sort_unstable();
        Ok(Self { size, edges: canon })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&pair(i, j)).is_ok()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == node || b == node).count()
    }

    pub fn to_graph(&self) -> Graph {
        let mut g = Graph::empty(self.size);
        for &(i, j) in &self.edges {
            g.adjacency[i].insert(j);
            g.adjacency[j].insert(i);
        }
        g
    }

    /// Decodes a Prüfer sequence (entries in `0..size`, length `size - 2`).
    pub fn from_prufer(size: usize, code: &[usize]) -> Result<Self> {
        if size < 2 || code.len() != size - 2 || code.iter().any(|&c| c >= size) {
            return Err(Error::InvalidInput("malformed Prüfer sequence".into()));
        }
        let mut degree = vec![1usize; size];
        for &c in code {
            degree[c] += 1;
        }
        let mut edges = Vec::with_capacity(size - 1);
        let mut leaves: BTreeSet<usize> = (0..size).filter(|&v| degree[v] == 1).collect();
        for &c in code {
            let leaf = *leaves.iter().next().expect("a tree always has a leaf");
            leaves.remove(&leaf);
            edges.push(pair(leaf, c));
            degree[c] -= 1;
            if degree[c] == 1 {
                leaves.insert(c);
            }
        }
        let mut rest = leaves.into_iter();
        let (u, v) = (rest.next().unwrap(), rest.next().unwrap());
        edges.push(pair(u, v));
        Self::new(size, edges)
    }
}
