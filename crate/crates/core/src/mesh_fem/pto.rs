use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::assembly::{assemble_with, factor_and_solve, local_stiffness, root_load, AssembledSystem};
use super::mesh::{BoundaryTag, Mesh};
use crate::error::{check_len, Error, Result};
use crate::forward::ForwardMap;
use crate::linalg::BandedCholesky;
use crate::scalar::Real;

pub const DEFAULT_BIOT: f64 = 0.5;
pub const DEFAULT_SENSOR_COUNT: usize = 10;

/// Heat-conduction parameter-to-observable map: nodal conductivity to the
/// temperature at the sensor nodes.
#[derive(Debug, Clone)]
pub struct PtoOperator<T: Real> {
    mesh: Mesh<T>,
    biot: T,
    sensor_nodes: Vec<usize>,
    load_vector: DVector<T>,
    locals: Vec<[[T; 3]; 3]>,
}

impl<T: Real> PtoOperator<T> {
    pub fn new(mesh: Mesh<T>, biot: T, sensor_nodes: Vec<usize>) -> Result<Self> {
        if !(biot > T::zero()) {
            return Err(Error::InvalidArgument(format!("Biot number {biot} must be positive")));
        }
        if sensor_nodes.is_empty() {
            return Err(Error::InvalidArgument("at least one sensor is required".into()));
        }
        let mut seen = vec![false; mesh.num_nodes()];
        for &s in &sensor_nodes {
            if s >= mesh.num_nodes() {
                return Err(Error::InvalidArgument(format!("sensor node {s} out of range")));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::InvalidArgument(format!("sensor node {s} repeated")));
            }
        }
        let locals = (0..mesh.triangles().len())
            .map(|t| local_stiffness(&mesh, t))
            .collect();
        let load_vector = root_load(&mesh);
        Ok(Self {
            mesh,
            biot,
            sensor_nodes,
            load_vector,
            locals,
        })
    }

    /// Draws `count` distinct sensor nodes uniformly with a seeded generator.
    pub fn with_random_sensors(mesh: Mesh<T>, biot: T, count: usize, seed: u64) -> Result<Self> {
        if count > mesh.num_nodes() {
            return Err(Error::InvalidArgument(format!(
                "{count} sensors requested on {} nodes",
                mesh.num_nodes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sensors = sample(&mut rng, mesh.num_nodes(), count).into_vec();
        Self::new(mesh, biot, sensors)
    }

    pub fn mesh(&self) -> &Mesh<T> {
        &self.mesh
    }

    pub fn biot(&self) -> T {
        self.biot
    }

    pub fn sensor_nodes(&self) -> &[usize] {
        &self.sensor_nodes
    }

    pub fn load_vector(&self) -> &DVector<T> {
        &self.load_vector
    }

    pub fn assemble(&self, u: &DVector<T>) -> Result<AssembledSystem<T>> {
        assemble_with(&self.mesh, &self.locals, u, self.biot)
    }

    /// Nodal temperature field for conductivity `u`.
    pub fn state(&self, u: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.factor(u)?.1)
    }

    fn factor(&self, u: &DVector<T>) -> Result<(BandedCholesky<T>, DVector<T>)> {
        factor_and_solve(&self.assemble(u)?)
    }

    pub fn observe(&self, s: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.sensor_nodes.len(), self.sensor_nodes.iter().map(|&k| s[k]))
    }

    // g_j = -λᵀ (∂K/∂u_j) s, with ∂K/∂u_j = Σ_{T ∋ j} K_T / 3
    fn sensitivity(&self, lambda: &DVector<T>, s: &DVector<T>) -> DVector<T> {
        let third = T::one() / T::lit(3.0);
        let mut g = DVector::zeros(self.mesh.num_nodes());
        for (tri, k) in self.mesh.triangles().iter().zip(&self.locals) {
            let mut c = T::zero();
            for a in 0..3 {
                let mut ks = T::zero();
                for b in 0..3 {
                    ks += k[a][b] * s[tri[b]];
                }
                c += lambda[tri[a]] * ks;
            }
            let contrib = -c * third;
            for &v in tri {
                g[v] += contrib;
            }
        }
        g
    }

    fn scatter_sensors(&self, w: &DVector<T>) -> DVector<T> {
        let mut b = DVector::zeros(self.mesh.num_nodes());
        for (&k, &wk) in self.sensor_nodes.iter().zip(w.iter()) {
            b[k] += wk;
        }
        b
    }

    fn pullback(&self, chol: &BandedCholesky<T>, s: &DVector<T>, w: &DVector<T>) -> DVector<T> {
        let lambda = chol.solve(&self.scatter_sensors(w));
        self.sensitivity(&lambda, s)
    }

    /// Exterior boundary node set (used by tests and reporting).
    pub fn boundary_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .mesh
            .boundary_edges()
            .iter()
            .filter(|e| e.tag == tag)
            .flat_map(|e| e.nodes)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl<T: Real> ForwardMap<T> for PtoOperator<T> {
    fn input_dim(&self) -> usize {
        self.mesh.num_nodes()
    }

    fn output_dim(&self) -> usize {
        self.sensor_nodes.len()
    }

    fn apply(&self, u: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.observe(&self.state(u)?))
    }

    fn vjp(&self, u: &DVector<T>, w: &DVector<T>) -> Result<DVector<T>> {
        check_len("observation cotangent", self.sensor_nodes.len(), w.len())?;
        let (chol, s) = self.factor(u)?;
        Ok(self.pullback(&chol, &s, w))
    }

    fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>> {
        let (chol, s) = self.factor(u)?;
        let q = self.sensor_nodes.len();
        let mut jac = DMatrix::zeros(q, self.mesh.num_nodes());
        for i in 0..q {
            let mut e = DVector::zeros(q);
            e[i] = T::one();
            jac.row_mut(i).copy_from(&self.pullback(&chol, &s, &e).transpose());
        }
        Ok(jac)
    }

    fn apply_and_pullback(
        &self,
        u: &DVector<T>,
        weight: &dyn Fn(&DVector<T>) -> DVector<T>,
    ) -> Result<(DVector<T>, DVector<T>)> {
        let (chol, s) = self.factor(u)?;
        let y = self.observe(&s);
        let w = weight(&y);
        check_len("observation cotangent", self.sensor_nodes.len(), w.len())?;
        Ok((y, self.pullback(&chol, &s, &w)))
    }

    fn requires_positive_input(&self) -> bool {
        true
    }
}
