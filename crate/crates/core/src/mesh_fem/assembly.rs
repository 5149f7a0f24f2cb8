use nalgebra::DVector;

use super::mesh::{BoundaryEdge, BoundaryTag, Mesh};
use crate::error::{check_len, Error, Result};
use crate::linalg::{BandedCholesky, BandedSym};
use crate::scalar::Real;

/// Conductivity-weighted stiffness plus Robin boundary mass, and the root
/// boundary load.
#[derive(Debug, Clone)]
pub struct AssembledSystem<T> {
    pub stiffness: BandedSym<T>,
    pub rhs: DVector<T>,
}

/// P1 stiffness of triangle `t`: `∫ ∇φ_a · ∇φ_b`.
pub fn local_stiffness<T: Real>(mesh: &Mesh<T>, t: usize) -> [[T; 3]; 3] {
    let tri = mesh.triangles()[t];
    let p = tri.map(|k| mesh.nodes()[k]);
    let area = mesh.signed_area(t);
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let scale = T::one() / (T::lit(4.0) * area);
    let mut k = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) * scale;
        }
    }
    k
}

/// Consistent P1 mass of triangle `t`.
pub fn local_mass<T: Real>(mesh: &Mesh<T>, t: usize) -> [[T; 3]; 3] {
    let a = mesh.signed_area(t) / T::lit(12.0);
    let mut m = [[a; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = a * T::lit(2.0);
    }
    m
}

fn scatter_triangle<T: Real>(out: &mut BandedSym<T>, tri: [usize; 3], local: &[[T; 3]; 3], w: T) {
    for i in 0..3 {
        for j in 0..=i {
            // off-diagonal pairs are added once; storage is symmetric
            out.add(tri[i], tri[j], local[i][j] * w);
        }
    }
}

fn scatter_edge<T: Real>(out: &mut BandedSym<T>, mesh: &Mesh<T>, e: &BoundaryEdge, w: T) {
    let len = mesh.edge_length(e) * w / T::lit(6.0);
    let [a, b] = e.nodes;
    out.add(a, a, len * T::lit(2.0));
    out.add(b, b, len * T::lit(2.0));
    out.add(a, b, len);
}

/// Unweighted stiffness matrix `∫ ∇φ_i · ∇φ_j`.
pub fn stiffness_matrix<T: Real>(mesh: &Mesh<T>) -> BandedSym<T> {
    let mut k = BandedSym::zeros(mesh.num_nodes(), mesh.bandwidth());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        scatter_triangle(&mut k, *tri, &local_stiffness(mesh, t), T::one());
    }
    k
}

/// Consistent mass matrix `∫ φ_i φ_j`.
pub fn mass_matrix<T: Real>(mesh: &Mesh<T>) -> BandedSym<T> {
    let mut m = BandedSym::zeros(mesh.num_nodes(), mesh.bandwidth());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        scatter_triangle(&mut m, *tri, &local_mass(mesh, t), T::one());
    }
    m
}

/// Row-sum lumped mass (one third of each adjacent triangle's area).
pub fn lumped_mass<T: Real>(mesh: &Mesh<T>) -> DVector<T> {
    let mut m = DVector::zeros(mesh.num_nodes());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let a = mesh.signed_area(t) / T::lit(3.0);
        for &k in tri {
            m[k] += a;
        }
    }
    m
}

/// Boundary mass `∫_Γ φ_i φ_j` over edges whose tag passes `filter`.
pub fn boundary_mass<T: Real>(mesh: &Mesh<T>, filter: impl Fn(BoundaryTag) -> bool) -> BandedSym<T> {
    let mut m = BandedSym::zeros(mesh.num_nodes(), mesh.bandwidth());
    for e in mesh.boundary_edges().iter().filter(|e| filter(e.tag)) {
        scatter_edge(&mut m, mesh, e, T::one());
    }
    m
}

pub(crate) fn root_load<T: Real>(mesh: &Mesh<T>) -> DVector<T> {
    let mut f = DVector::zeros(mesh.num_nodes());
    for e in mesh
        .boundary_edges()
        .iter()
        .filter(|e| e.tag == BoundaryTag::Root)
    {
        let half = mesh.edge_length(e) * T::lit(0.5);
        f[e.nodes[0]] += half;
        f[e.nodes[1]] += half;
    }
    f
}

pub(crate) fn check_conductivity<T: Real>(mesh: &Mesh<T>, u: &DVector<T>) -> Result<()> {
    check_len("conductivity vector", mesh.num_nodes(), u.len())?;
    if let Some((node, v)) = u.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
        return Err(Error::NonEllipticCoefficient {
            node,
            value: v.to_f64_lossy(),
        });
    }
    Ok(())
}

pub(crate) fn assemble_with<T: Real>(
    mesh: &Mesh<T>,
    locals: &[[[T; 3]; 3]],
    u: &DVector<T>,
    biot: T,
) -> Result<AssembledSystem<T>> {
    check_conductivity(mesh, u)?;
    let third = T::one() / T::lit(3.0);
    let mut k = BandedSym::zeros(mesh.num_nodes(), mesh.bandwidth());
    for (tri, local) in mesh.triangles().iter().zip(locals) {
        let ubar = (u[tri[0]] + u[tri[1]] + u[tri[2]]) * third;
        scatter_triangle(&mut k, *tri, local, ubar);
    }
    for e in mesh
        .boundary_edges()
        .iter()
        .filter(|e| e.tag == BoundaryTag::Ext)
    {
        scatter_edge(&mut k, mesh, e, biot);
    }
    Ok(AssembledSystem {
        stiffness: k,
        rhs: root_load(mesh),
    })
}

/// Assembles `K(u) = Σ_T ū_T K_T + Bi · M_ext` and the unit-flux root load.
pub fn assemble_system<T: Real>(mesh: &Mesh<T>, u: &DVector<T>, biot: T) -> Result<AssembledSystem<T>> {
    if !(biot > T::zero()) {
        return Err(Error::InvalidArgument(format!("Biot number {biot} must be positive")));
    }
    let locals: Vec<_> = (0..mesh.triangles().len())
        .map(|t| local_stiffness(mesh, t))
        .collect();
    assemble_with(mesh, &locals, u, biot)
}

pub(crate) fn factor_and_solve<T: Real>(sys: &AssembledSystem<T>) -> Result<(BandedCholesky<T>, DVector<T>)> {
    let chol = sys.stiffness.cholesky()?;
    let s = chol.solve(&sys.rhs);
    if s.iter().any(|v| !v.finite()) {
        return Err(Error::SingularSystem("non-finite state".into()));
    }
    Ok((chol, s))
}

/// Direct banded Cholesky solve of `K s = f`.
pub fn solve_state<T: Real>(sys: &AssembledSystem<T>) -> Result<DVector<T>> {
    factor_and_solve(sys).map(|(_, s)| s)
}
