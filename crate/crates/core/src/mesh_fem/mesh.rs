use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Boundary segment classification: `Root` is the bottom side `y = 0`,
/// `Ext` the other three sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Root,
    Ext,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Root => "root",
            BoundaryTag::Ext => "ext",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

/// Triangulated unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    nodes: Vec<[T; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    subdivisions: usize,
}

/// Structured right-triangle mesh with `n` cells per side.
///
/// Node `(i, j)` sits at `(i/n, j/n)` with index `j (n+1) + i`; every cell is
/// split along its lower-left to upper-right diagonal.
pub fn build_unit_square_mesh<T: Real>(n: usize) -> Result<Mesh<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "mesh needs at least one subdivision per side".into(),
        ));
    }
    let stride = n + 1;
    let h = T::one() / T::lit(n as f64);
    let mut nodes = Vec::with_capacity(stride * stride);
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([T::lit(i as f64) * h, T::lit(j as f64) * h]);
        }
    }
    let id = |i: usize, j: usize| j * stride + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mut boundary_edges = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary_edges.push(BoundaryEdge {
            nodes: [id(i, 0), id(i + 1, 0)],
            tag: BoundaryTag::Root,
        });
    }
    for j in 0..n {
        boundary_edges.push(BoundaryEdge {
            nodes: [id(n, j), id(n, j + 1)],
            tag: BoundaryTag::Ext,
        });
    }
    for i in (0..n).rev() {
        boundary_edges.push(BoundaryEdge {
            nodes: [id(i + 1, n), id(i, n)],
            tag: BoundaryTag::Ext,
        });
    }
    for j in (0..n).rev() {
        boundary_edges.push(BoundaryEdge {
            nodes: [id(0, j + 1), id(0, j)],
            tag: BoundaryTag::Ext,
        });
    }
    Ok(Mesh {
        nodes,
        triangles,
        boundary_edges,
        subdivisions: n,
    })
}

impl<T: Real> Mesh<T> {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[[T; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Cells per side.
    pub fn subdivisions(&self) -> usize {
        self.subdivisions
    }

    pub fn signed_area(&self, t: usize) -> T {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])) * T::lit(0.5)
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> T {
        let (p, q) = (self.nodes[e.nodes[0]], self.nodes[e.nodes[1]]);
        ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
    }

    /// Largest index distance between two nodes sharing a triangle.
    pub fn bandwidth(&self) -> usize {
        self.triangles
            .iter()
            .map(|t| {
                let mx = t.iter().max().unwrap();
                let mn = t.iter().min().unwrap();
                mx - mn
            })
            .max()
            .unwrap_or(0)
    }

    /// Checks positive orientation, unique tagging, and the unit root length.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.triangles.len() {
            if !(self.signed_area(t) > T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} has non-positive signed area"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.boundary_edges {
            let key = (e.nodes[0].min(e.nodes[1]), e.nodes[0].max(e.nodes[1]));
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!(
                    "boundary edge {key:?} tagged twice"
                )));
            }
        }
        let root = self.root_length();
        if (root - T::one()).abs() > T::lit(1e-12) {
            return Err(Error::InvalidArgument(format!(
                "root boundary length {root} differs from 1"
            )));
        }
        Ok(())
    }

    pub fn root_length(&self) -> T {
        self.boundary_edges
            .iter()
            .filter(|e| e.tag == BoundaryTag::Root)
            .fold(T::zero(), |acc, e| acc + self.edge_length(e))
    }

    /// Node indices on the horizontal row closest to height `y`, sorted by x.
    pub fn row_nearest(&self, y: T) -> Vec<usize> {
        let n = self.subdivisions;
        let j = (y * T::lit(n as f64)).round().to_f64_lossy().clamp(0.0, n as f64) as usize;
        (0..=n).map(|i| j * (n + 1) + i).collect()
    }

    /// Plain-text listing: `v x y`, `t a b c`, `e a b tag`, one per line.
    pub fn write_listing<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# mesh subdivisions={} nodes={} triangles={} boundary_edges={}",
            self.subdivisions,
            self.nodes.len(),
            self.triangles.len(),
            self.boundary_edges.len()
        )?;
        for p in &self.nodes {
            writeln!(w, "v {:.16e} {:.16e}", p[0], p[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t[0], t[1], t[2])?;
        }
        for e in &self.boundary_edges {
            writeln!(w, "e {} {} {}", e.nodes[0], e.nodes[1], e.tag.as_str())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_for_small_meshes() {
        let m1 = build_unit_square_mesh::<f64>(1).unwrap();
        assert_eq!(m1.num_nodes(), 4);
        assert_eq!(m1.triangles().len(), 2);
        let roots = m1
            .boundary_edges()
            .iter()
            .filter(|e| e.tag == BoundaryTag::Root)
            .count();
        assert_eq!(roots, 1);

        let m2 = build_unit_square_mesh::<f64>(2).unwrap();
        assert_eq!(m2.num_nodes(), 9);
        assert_eq!(m2.triangles().len(), 8);
    }

    #[test]
    fn fifty_subdivisions_give_2601_dof() {
        let m = build_unit_square_mesh::<f64>(50).unwrap();
        assert_eq!(m.num_nodes(), 2601);
        assert_eq!(m.triangles().len(), 2 * 50 * 50);
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(matches!(
            build_unit_square_mesh::<f64>(0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invariants_hold() {
        for n in [1, 3, 8] {
            let m = build_unit_square_mesh::<f64>(n).unwrap();
            m.validate().unwrap();
            assert_eq!(m.boundary_edges().len(), 4 * n);
            for e in m.boundary_edges() {
                let both_bottom = e.nodes.iter().all(|&k| m.nodes()[k][1] == 0.0);
                assert_eq!(both_bottom, e.tag == BoundaryTag::Root);
            }
        }
    }

    #[test]
    fn listing_has_one_line_per_entity() {
        let m = build_unit_square_mesh::<f64>(2).unwrap();
        let mut buf = Vec::new();
        m.write_listing(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 9 + 8 + 8);
        assert_eq!(text.lines().filter(|l| l.ends_with("root")).count(), 2);
    }

    #[test]
    fn midline_row() {
        let m = build_unit_square_mesh::<f64>(4).unwrap();
        let row = m.row_nearest(0.5);
        assert_eq!(row.len(), 5);
        assert!(row.iter().all(|&k| m.nodes()[k][1] == 0.5));
    }
}
