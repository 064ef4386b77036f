//! Matrix/graph correspondence: König digraphs, path weights through a
//! concatenation of two digraphs, and the augmented line digraph that the
//! Factormer consumes.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Bipartite weighted digraph from `m` row nodes to `n` column nodes.
/// Zero entries have no edge; edges are kept sorted by `(source, target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KonigDigraph {
    num_row_nodes: usize,
    num_col_nodes: usize,
    edges: Vec<Edge>,
}

impl KonigDigraph {
    pub fn new(num_row_nodes: usize, num_col_nodes: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if num_row_nodes == 0 || num_col_nodes == 0 {
            return Err(Error::dims("KonigDigraph::new", "graph needs at least one node per side"));
        }
        for e in &edges {
            if e.source >= num_row_nodes || e.target >= num_col_nodes {
                return Err(Error::IndexOutOfRange {
                    row: e.source,
                    col: e.target,
                    rows: num_row_nodes,
                    cols: num_col_nodes,
                });
            }
            if e.weight == 0.0 || !e.weight.is_finite() {
                return Err(Error::Format(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.source, e.target, e.weight
                )));
            }
        }
        edges.sort_by_key(|e| (e.source, e.target));
        if edges
            .windows(2)
            .any(|w| (w[0].source, w[0].target) == (w[1].source, w[1].target))
        {
            return Err(Error::Format("duplicate edge".into()));
        }
        Ok(Self {
            num_row_nodes,
            num_col_nodes,
            edges,
        })
    }

    pub fn num_row_nodes(&self) -> usize {
        self.num_row_nodes
    }

    pub fn num_col_nodes(&self) -> usize {
        self.num_col_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weight(&self, source: usize, target: usize) -> Option<f64> {
        self.edges
            .binary_search_by_key(&(source, target), |e| (e.source, e.target))
            .ok()
            .map(|k| self.edges[k].weight)
    }

    pub fn out_edges(&self, source: usize) -> &[Edge] {
        let lo = self.edges.partition_point(|e| e.source < source);
        let hi = self.edges.partition_point(|e| e.source <= source);
        &self.edges[lo..hi]
    }
}

pub fn matrix_to_konig(m: &DenseMatrix) -> KonigDigraph {
    let mut edges = Vec::new();
    for i in 0..m.rows() {
        for (j, &w) in m.row(i).iter().enumerate() {
            if w != 0.0 {
                edges.push(Edge {
                    source: i,
                    target: j,
                    weight: w,
                });
            }
        }
    }
    KonigDigraph {
        num_row_nodes: m.rows(),
        num_col_nodes: m.cols(),
        edges,
    }
}

pub fn konig_to_matrix(g: &KonigDigraph) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(g.num_row_nodes, g.num_col_nodes);
    for e in &g.edges {
        m.set(e.source, e.target, e.weight);
    }
    m
}

/// The digraph of the transposed matrix.
pub fn reverse_edges(g: &KonigDigraph) -> KonigDigraph {
    let mut edges: Vec<Edge> = g
        .edges
        .iter()
        .map(|e| Edge {
            source: e.target,
            target: e.source,
            weight: e.weight,
        })
        .collect();
    edges.sort_by_key(|e| (e.source, e.target));
    KonigDigraph {
        num_row_nodes: g.num_col_nodes,
        num_col_nodes: g.num_row_nodes,
        edges,
    }
}

/// Sum of path weights from row node `i` of `gw` to column node `j` of `gh`
/// in the graph obtained by gluing the column nodes of `gw` to the row nodes
/// of `gh`. Equals `(W Hᵀ)[i, j]` when `gw = G(W)` and `gh = G(Hᵀ)`.
pub fn concat_path_weight(gw: &KonigDigraph, gh: &KonigDigraph, i: usize, j: usize) -> Result<f64> {
    if gw.num_col_nodes != gh.num_row_nodes {
        return Err(Error::dims(
            "concat_path_weight",
            format!("{} shared nodes vs {}", gw.num_col_nodes, gh.num_row_nodes),
        ));
    }
    if i >= gw.num_row_nodes || j >= gh.num_col_nodes {
        return Err(Error::IndexOutOfRange {
            row: i,
            col: j,
            rows: gw.num_row_nodes,
            cols: gh.num_col_nodes,
        });
    }
    Ok(gw
        .out_edges(i)
        .iter()
        .filter_map(|first| gh.weight(first.target, j).map(|w| first.weight * w))
        .sum())
}

/// Augmented line digraph of a factorization `V ≈ W Hᵀ`: row nodes carry
/// rows of `W`, column nodes carry rows of `H`, and the complete bipartite
/// edge set carries the entries of `V` (zeros included).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    row_features: DenseMatrix,
    col_features: DenseMatrix,
    edge_values: DenseMatrix,
}

impl FactorGraph {
    pub fn row_features(&self) -> &DenseMatrix {
        &self.row_features
    }

    pub fn col_features(&self) -> &DenseMatrix {
        &self.col_features
    }

    pub fn edge_values(&self) -> &DenseMatrix {
        &self.edge_values
    }

    pub fn rank(&self) -> usize {
        self.row_features.cols()
    }
}

pub fn build_factor_graph(v: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix) -> Result<FactorGraph> {
    if w.rows() != v.rows() || h.rows() != v.cols() || w.cols() != h.cols() {
        return Err(Error::dims(
            "build_factor_graph",
            format!(
                "V {}x{}, W {}x{}, H {}x{}",
                v.rows(),
                v.cols(),
                w.rows(),
                w.cols(),
                h.rows(),
                h.cols()
            ),
        ));
    }
    Ok(FactorGraph {
        row_features: w.clone(),
        col_features: h.clone(),
        edge_values: v.clone(),
    })
}

/// `R = W Hᵀ − V`.
pub fn residual(g: &FactorGraph) -> DenseMatrix {
    g.row_features
        .matmul_unchecked(&g.col_features.transpose())
        .sub(&g.edge_values)
        .expect("FactorGraph shapes are validated at construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_has_no_edges() {
        let g = matrix_to_konig(&DenseMatrix::zeros(2, 2));
        assert_eq!((g.num_row_nodes(), g.num_col_nodes()), (2, 2));
        assert!(g.edges().is_empty());
        assert_eq!(konig_to_matrix(&KonigDigraph::new(2, 3, vec![]).unwrap()), DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn diagonal_matrix_edges() {
        let m = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let g = matrix_to_konig(&m);
        let edges: Vec<_> = g.edges().iter().map(|e| (e.source, e.target, e.weight)).collect();
        assert_eq!(edges, vec![(0, 0, 1.0), (1, 1, 2.0)]);
    }

    #[test]
    fn reverse_single_edge() {
        let g = KonigDigraph::new(
            1,
            2,
            vec![Edge {
                source: 0,
                target: 1,
                weight: 5.0,
            }],
        )
        .unwrap();
        let r = reverse_edges(&g);
        assert_eq!((r.num_row_nodes(), r.num_col_nodes()), (2, 1));
        assert_eq!(r.weight(1, 0), Some(5.0));
        assert_eq!(reverse_edges(&r), g);
    }

    #[test]
    fn graph_validation() {
        let bad = Edge {
            source: 0,
            target: 0,
            weight: 0.0,
        };
        assert!(KonigDigraph::new(1, 1, vec![bad]).is_err());
        let oob = Edge {
            source: 3,
            target: 0,
            weight: 1.0,
        };
        assert!(matches!(KonigDigraph::new(1, 1, vec![oob]), Err(Error::IndexOutOfRange { .. })));
        let e = Edge {
            source: 0,
            target: 0,
            weight: 1.0,
        };
        assert!(KonigDigraph::new(1, 1, vec![e, e]).is_err());
    }

    #[test]
    fn isolated_source_has_zero_path_weight() {
        let w = DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let ht = DenseMatrix::from_rows(&[[3.0], [4.0]]).unwrap();
        let (gw, gh) = (matrix_to_konig(&w), matrix_to_konig(&ht));
        assert_eq!(concat_path_weight(&gw, &gh, 0, 0).unwrap(), 0.0);
        assert_eq!(concat_path_weight(&gw, &gh, 1, 0).unwrap(), 11.0);
        assert!(concat_path_weight(&gw, &gh, 2, 0).is_err());
    }

    #[test]
    fn factor_graph_shapes() {
        let v = DenseMatrix::filled(3, 2, 1.0);
        let w = DenseMatrix::filled(3, 1, 1.0);
        let h = DenseMatrix::filled(2, 1, 1.0);
        let g = build_factor_graph(&v, &w, &h).unwrap();
        assert_eq!(g.rank(), 1);
        assert_eq!(residual(&g), DenseMatrix::zeros(3, 2));
        let h3 = DenseMatrix::filled(2, 3, 1.0);
        let w2 = DenseMatrix::filled(3, 2, 1.0);
        assert!(build_factor_graph(&v, &w2, &h3).is_err());
        let zero_w = DenseMatrix::zeros(3, 1);
        let g = build_factor_graph(&v, &zero_w, &h).unwrap();
        assert_eq!(residual(&g), v.scale(-1.0));
    }
}
