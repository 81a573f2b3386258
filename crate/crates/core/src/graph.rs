//! Multi-source semantic graph construction and normalization.
//!
//! Nodes are the positions of a [`TokenSequence`]; edges come from four
//! rules plus self-loops on every active position:
//!
//! * R1 — consecutive caption tokens;
//! * R2 — class tokens to attribute tokens of the same object;
//! * R3 — each object's first class token to the caption token whose
//!   encoder row is most cosine-similar (ties to the lowest caption
//!   index; zero-norm rows score 0);
//! * R4 — knowledge tokens to the tokens of their anchor span.
//!
//! `Full` wires every active pair; `SelfLoops` keeps nodes isolated
//! (the graph-bypass ablation).

use serde::{Deserialize, Serialize};

use crate::assembly::{SourceTag, TokenSequence};
use crate::num::{real, Real};
use crate::tensor::{cosine, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// The four rule-based edge types plus self-loops.
    #[default]
    Rules,
    /// Complete graph over active positions.
    Full,
    /// Self-loops only; the pipeline also bypasses the GCN in this mode.
    SelfLoops,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeRule {
    R1,
    R2,
    R3,
    R4,
    SelfLoop,
}

impl EdgeRule {
    pub fn label(self) -> &'static str {
        match self {
            EdgeRule::R1 => "R1",
            EdgeRule::R2 => "R2",
            EdgeRule::R3 => "R3",
            EdgeRule::R4 => "R4",
            EdgeRule::SelfLoop => "SELF",
        }
    }
}

/// Symmetric binary adjacency over `n_max` positions; only the first
/// `n` (active) positions carry entries. `edges` records one entry per
/// (rule, pair) with `i <= j`, for inspection output.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    n_max: usize,
    n: usize,
    adj: Vec<u8>,
    edges: Vec<(usize, usize, EdgeRule)>,
}

impl SemanticGraph {
    fn empty(n_max: usize, n: usize) -> Self {
        SemanticGraph {
            n_max,
            n,
            adj: vec![0; n_max * n_max],
            edges: Vec::new(),
        }
    }

    fn connect(&mut self, i: usize, j: usize, rule: EdgeRule) {
        debug_assert!(i < self.n && j < self.n);
        self.adj[i * self.n_max + j] = 1;
        self.adj[j * self.n_max + i] = 1;
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        if !self.edges.contains(&(lo, hi, rule)) {
            self.edges.push((lo, hi, rule));
        }
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n_max + j] != 0
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Active node count (= the sequence's `true_len`).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_edge(i, j)).count()
    }

    pub fn nonzeros(&self) -> usize {
        self.adj.iter().filter(|&&v| v != 0).count()
    }

    /// Labeled edges sorted by (i, j, rule), one line per rule so an
    /// edge produced by two rules appears twice.
    pub fn labeled_edges(&self) -> Vec<(usize, usize, EdgeRule)> {
        let mut edges = self.edges.clone();
        edges.sort();
        edges
    }

    pub fn count_rule(&self, rule: EdgeRule) -> usize {
        self.edges.iter().filter(|(_, _, r)| *r == rule).count()
    }
}

/// Builds the adjacency for a sequence. `h` supplies the node
/// representations R3 compares; its row count must equal the
/// sequence's `n_max`.
pub fn build_graph<R: Real>(seq: &TokenSequence, h: &Matrix<R>, mode: GraphMode) -> SemanticGraph {
    assert_eq!(h.rows(), seq.n_max(), "encoder rows must match n_max");
    let n = seq.true_len;
    let mut graph = SemanticGraph::empty(seq.n_max(), n);

    for i in 0..n {
        graph.connect(i, i, EdgeRule::SelfLoop);
    }

    match mode {
        GraphMode::SelfLoops => return graph,
        GraphMode::Full => {
            for i in 0..n {
                for j in (i + 1)..n {
                    graph.connect(i, j, EdgeRule::R1);
                }
            }
            return graph;
        }
        GraphMode::Rules => {}
    }

    let caption: Vec<usize> = (0..n).filter(|&i| seq.tags[i] == SourceTag::Caption).collect();

    // R1: adjacent caption tokens
    for w in caption.windows(2) {
        if w[1] == w[0] + 1 {
            graph.connect(w[0], w[1], EdgeRule::R1);
        }
    }

    // R2: class <-> attribute within one object
    let object_ids: Vec<usize> = {
        let mut ids: Vec<usize> = (0..n).filter_map(|i| seq.object_of[i]).collect();
        ids.dedup();
        ids
    };
    for &obj in &object_ids {
        let class_pos: Vec<usize> = (0..n)
            .filter(|&i| seq.object_of[i] == Some(obj) && seq.tags[i] == SourceTag::ObjClass)
            .collect();
        let attr_pos: Vec<usize> = (0..n)
            .filter(|&i| seq.object_of[i] == Some(obj) && seq.tags[i] == SourceTag::ObjAttr)
            .collect();
        for &c in &class_pos {
            for &a in &attr_pos {
                graph.connect(c, a, EdgeRule::R2);
            }
        }
        // R3: first class token to the most similar caption token
        if let (Some(&first_class), false) = (class_pos.first(), caption.is_empty()) {
            let mut best = caption[0];
            let mut best_sim = R::neg_infinity();
            for &c in &caption {
                let sim = cosine(h.row(first_class), h.row(c));
                if sim > best_sim {
                    best_sim = sim;
                    best = c;
                }
            }
            graph.connect(first_class, best, EdgeRule::R3);
        }
    }

    // R4: knowledge tokens to their anchor span tokens
    for &(k, a) in &seq.anchor_links {
        graph.connect(k, a, EdgeRule::R4);
    }

    graph
}

/// Symmetric degree normalization `Ã = D^{-1/2} A D^{-1/2}` over the
/// active nodes; pad rows and columns stay zero. Self-loops guarantee
/// every active degree is at least 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency<R: Real> {
    pub mat: Matrix<R>,
    pub n: usize,
}

pub fn normalize<R: Real>(graph: &SemanticGraph) -> NormalizedAdjacency<R> {
    let n_max = graph.n_max();
    let n = graph.n();
    let inv_sqrt_deg: Vec<R> = (0..n)
        .map(|i| real::<R>(graph.degree(i) as f64).sqrt().recip())
        .collect();
    let mut mat = Matrix::zeros(n_max, n_max);
    for i in 0..n {
        for j in 0..n {
            if graph.has_edge(i, j) {
                mat.set(i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]);
            }
        }
    }
    NormalizedAdjacency { mat, n }
}

/// Largest-magnitude eigenvalue estimate by power iteration over the
/// active block; used to check the spectral bound of `Ã`.
pub fn spectral_radius<R: Real>(adj: &NormalizedAdjacency<R>, iterations: usize) -> R {
    let n = adj.n;
    if n == 0 {
        return R::zero();
    }
    let mut v = vec![real::<R>(1.0 / (n as f64).sqrt()); n];
    let mut lambda = R::zero();
    for _ in 0..iterations {
        let mut next = vec![R::zero(); n];
        for (i, nv) in next.iter_mut().enumerate() {
            let row = adj.mat.row(i);
            *nv = v.iter().zip(&row[..n]).map(|(&a, &b)| a * b).sum();
        }
        let norm = crate::tensor::norm(&next);
        if norm == R::zero() {
            return R::zero();
        }
        for x in &mut next {
            *x /= norm;
        }
        lambda = norm;
        v = next;
    }
    lambda
}
