//! P1 surface finite elements: mass, stiffness, lumped mass and the smoothing penalty.
//!
//! Vector-valued functions with `d` channels are stored channel-major: the
//! coefficient vector is `(c_1 | c_2 | ... | c_d)`, each block of length `κ`
//! holding nodal values. Channels never couple through the penalty.

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sparse::CsrMatrix;

/// Nodal coefficients of a (possibly vector-valued) function, channel-major.
pub type Coefficients = DVector<f64>;

#[derive(Debug, Clone)]
pub struct FemSystem {
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    lumped: Vec<f64>,
    lumped_inv: Vec<f64>,
    channels: usize,
    nodes: usize,
    total_area: f64,
}

/// Closed-form P1 element matrices for one triangle: area plus the
/// cotangent weights `cot(angle opposite edge k)` for the edges (1,2), (2,0), (0,1).
fn element(p: [Vector3<f64>; 3]) -> (f64, [f64; 3]) {
    let area = 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
    let mut cot = [0.0; 3];
    for k in 0..3 {
        let a = p[(k + 1) % 3] - p[k];
        let b = p[(k + 2) % 3] - p[k];
        cot[k] = a.dot(&b) / a.cross(&b).norm();
    }
    (area, cot)
}

pub fn assemble(mesh: &TriMesh, channels: usize) -> Result<FemSystem> {
    if channels == 0 {
        return Err(Error::InvalidConfig("channel count must be at least 1".into()));
    }
    let n = mesh.node_count();
    let mut mt = Vec::with_capacity(9 * mesh.triangles().len());
    let mut at = Vec::with_capacity(9 * mesh.triangles().len());
    let mut total_area = 0.0;
    for tri in mesh.triangles() {
        let p = tri.map(|i| Vector3::from(mesh.nodes()[i]));
        let (area, cot) = element(p);
        total_area += area;
        for a in 0..3 {
            for b in 0..3 {
                let m = if a == b { area / 6.0 } else { area / 12.0 };
                mt.push((tri[a], tri[b], m));
            }
        }
        for k in 0..3 {
            let (i, j) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let w = 0.5 * cot[k];
            at.push((i, j, -w));
            at.push((j, i, -w));
            at.push((i, i, w));
            at.push((j, j, w));
        }
    }
    let mass = CsrMatrix::from_triplets(n, n, mt);
    let stiffness = CsrMatrix::from_triplets(n, n, at);
    let lumped = mass.row_sums();
    if let Some(j) = lumped.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidMesh(format!("node {j} has no incident triangle")));
    }
    let lumped_inv = lumped.iter().map(|v| 1.0 / v).collect();
    Ok(FemSystem { mass, stiffness, lumped, lumped_inv, channels, nodes: n, total_area })
}

impl FemSystem {
    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Diagonal of the lumped mass matrix.
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `d·κ`, the length of a coefficient vector.
    pub fn dim(&self) -> usize {
        self.channels * self.nodes
    }

    pub fn total_area(&self) -> f64 {
        self.total_area
    }

    /// Same matrices, different channel count.
    pub fn with_channels(&self, channels: usize) -> FemSystem {
        FemSystem { channels, ..self.clone() }
    }

    pub fn check_len(&self, c: &Coefficients) -> Result<()> {
        if c.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient vector has length {}, expected {} ({} channels x {} nodes)",
                c.len(),
                self.dim(),
                self.channels,
                self.nodes
            )));
        }
        Ok(())
    }

    fn blockwise(&self, c: &Coefficients, mut f: impl FnMut(&[f64], &mut [f64])) -> Coefficients {
        let mut out = DVector::zeros(c.len());
        for (src, dst) in c.as_slice().chunks(self.nodes).zip(out.as_mut_slice().chunks_mut(self.nodes)) {
            f(src, dst);
        }
        out
    }

    /// Block-diagonal `M c`.
    pub fn mass_apply(&self, c: &Coefficients) -> Coefficients {
        self.blockwise(c, |x, y| self.mass.mul_into(x, y))
    }

    /// Block-diagonal `A c`.
    pub fn stiffness_apply(&self, c: &Coefficients) -> Coefficients {
        self.blockwise(c, |x, y| self.stiffness.mul_into(x, y))
    }

    /// Block-diagonal `M̃⁻¹ c`.
    pub fn lumped_inv_apply(&self, c: &Coefficients) -> Coefficients {
        self.blockwise(c, |x, y| {
            for ((yi, xi), w) in y.iter_mut().zip(x).zip(&self.lumped_inv) {
                *yi = xi * w;
            }
        })
    }

    /// Block-diagonal `M̃^{-1/2} c`.
    pub fn lumped_inv_sqrt_apply(&self, c: &Coefficients) -> Coefficients {
        self.blockwise(c, |x, y| {
            for ((yi, xi), w) in y.iter_mut().zip(x).zip(&self.lumped_inv) {
                *yi = xi * w.sqrt();
            }
        })
    }

    /// `A c` per channel with the channel mean removed first. Since `A 𝟙 = 0` this is
    /// the same product, but large constant parts no longer leave rounding residue.
    pub fn stiffness_apply_centered(&self, c: &Coefficients) -> Coefficients {
        let mut shifted = vec![0.0; self.nodes];
        self.blockwise(c, |x, y| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            for (s, v) in shifted.iter_mut().zip(x) {
                *s = v - mean;
            }
            self.stiffness.mul_into(&shifted, y);
        })
    }

    fn penalty_unchecked(&self, c: &Coefficients) -> Coefficients {
        let mut tmp = vec![0.0; self.nodes];
        let ac = self.stiffness_apply_centered(c);
        self.blockwise(&ac, |x, y| {
            tmp.copy_from_slice(x);
            for (t, w) in tmp.iter_mut().zip(&self.lumped_inv) {
                *t *= w;
            }
            self.stiffness.mul_into(&tmp, y);
        })
    }

    /// Diagonal of the lumped penalty `A M̃⁻¹ A`, repeated per channel.
    pub fn penalty_diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.nodes];
        // A is symmetric, so (A M̃⁻¹ A)_jj = Σ_k A_jk² / M̃_kk
        for (j, dj) in diag.iter_mut().enumerate() {
            *dj = self.stiffness.row(j).map(|(k, v)| v * v * self.lumped_inv[k]).sum();
        }
        diag.iter().cycle().take(self.dim()).copied().collect()
    }

    /// Penalty quadratic form `cᵀ A M̃⁻¹ A c`, summed over channels.
    pub fn penalty_energy(&self, c: &Coefficients) -> Result<f64> {
        self.check_len(c)?;
        let ac = self.stiffness_apply_centered(c);
        Ok(ac.iter().zip(self.lumped_inv.iter().cycle()).map(|(v, w)| v * v * w).sum())
    }

    /// `‖c‖_M`.
    pub fn m_norm(&self, c: &Coefficients) -> f64 {
        self.mass_apply(c).dot(c).max(0.0).sqrt()
    }

    /// View of channel `q` of `c`.
    pub fn channel<'a>(&self, c: &'a Coefficients, q: usize) -> &'a [f64] {
        &c.as_slice()[q * self.nodes..(q + 1) * self.nodes]
    }
}

/// Applies the lumped penalty `A M̃⁻¹ A` to every channel block.
pub fn penalty_apply(sys: &FemSystem, c: &Coefficients) -> Result<Coefficients> {
    sys.check_len(c)?;
    Ok(sys.penalty_unchecked(c))
}

/// `Σ_q c_qᵀ A c_q`, the discrete squared gradient norm.
pub fn gradient_energy(sys: &FemSystem, c: &Coefficients) -> Result<f64> {
    sys.check_len(c)?;
    Ok(sys.stiffness_apply_centered(c).dot(c).max(0.0))
}

/// `Σ_q c1_qᵀ M c2_q`, the discrete L² inner product.
pub fn l2_inner(sys: &FemSystem, c1: &Coefficients, c2: &Coefficients) -> Result<f64> {
    sys.check_len(c1)?;
    sys.check_len(c2)?;
    Ok(sys.mass_apply(c2).dot(c1))
}
