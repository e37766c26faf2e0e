//! Sparse variational Gaussian process layers.
//!
//! A layer holds M inducing inputs `z` and a *whitened* Gaussian posterior:
//! with `K_zz = L L^T`, the inducing function values are `u = mu(z) + L v`
//! and the variational distribution is `q(v) = N(m, S)` against the prior
//! `p(v) = N(0, I)`. `S` is parameterized by its Cholesky factor (packed
//! strictly-lower part plus a softplus-constrained diagonal). All output
//! dimensions of a layer share the kernel and `S`; only the means differ.
//! The posterior marginal at inputs `x` is
//!
//! ```text
//! mean = mu(x) + A^T m,                        A = L^-1 k(z, x)
//! var  = k(x, x) - colsumsq(A) + colsumsq(L_s^T A)
//! KL   = 0.5 (P tr(S) + |m|_F^2 - P M - P log det S)
//! ```
//!
//! The whitening keeps every term bounded regardless of how
//! ill-conditioned `K_zz` is (`A^T A` is dominated by `k(x, x)`), which is
//! what makes gradient training stable when inducing points sit on densely
//! sampled inputs. The plain entry points ([`SvgpLayer::marginal`],
//! [`SvgpLayer::kl_to_prior`], sampling) are thin wrappers that evaluate
//! the tape graph on constant leaves, which makes tape-vs-plain agreement
//! structural rather than something to maintain by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    positive_transform, positive_transform_inverse, KernelSpec, MeanFunctionSpec,
};
use crate::math::{DenseMatrix, RngStream, TriSide};
use crate::tape::{NodeId, Tape};

/// Lower bound applied to posterior marginal variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Diagonal Gaussian marginals of a layer at a batch of inputs.
///
/// The variance is per point, shared by all output dimensions (they share
/// kernel and variational covariance).
#[derive(Debug, Clone)]
pub struct MarginalGaussians {
    pub mean: DenseMatrix,
    pub variance: Vec<f64>,
}

impl MarginalGaussians {
    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }

    /// Reparametrized draw with externally supplied standard normal noise
    /// of the same shape as the mean.
    pub fn sample_with(&self, eps: &DenseMatrix) -> Result<DenseMatrix> {
        if eps.shape() != self.mean.shape() {
            return Err(Error::dims(
                "sample_with",
                format!("noise {:?} vs mean {:?}", eps.shape(), self.mean.shape()),
            ));
        }
        let mut out = self.mean.clone();
        for i in 0..out.rows() {
            let sd = self.variance[i].sqrt();
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + sd * eps.get(i, j));
            }
        }
        Ok(out)
    }

    /// Reparametrized draw using fresh noise from `rng`.
    pub fn sample(&self, rng: &mut RngStream) -> DenseMatrix {
        let eps = rng.std_normal_matrix(self.mean.rows(), self.mean.cols());
        self.sample_with(&eps).expect("matching shape by construction")
    }
}

/// Tape handles for one layer's trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub z: NodeId,
    pub m: NodeId,
    pub s_strict: NodeId,
    pub s_diag_raw: NodeId,
    pub kernel: KernelNodes,
}

/// Kernel hyperparameter handles, raw (pre-softplus) space.
#[derive(Debug, Clone, Copy)]
pub enum KernelNodes {
    SquaredExponential { variance_raw: NodeId, lengthscales_raw: NodeId },
    White { variance_raw: NodeId },
}

/// Marginal mean (`N x P`) and clamped variance (`N x 1`) nodes.
#[derive(Debug, Clone, Copy)]
pub struct MarginalNodes {
    pub mean: NodeId,
    pub variance: NodeId,
}

/// Everything the objective needs from one layer at one batch.
#[derive(Debug, Clone, Copy)]
pub struct LayerGraph {
    pub marginal: MarginalNodes,
    pub kl: NodeId,
}

/// Build the marginal and KL nodes for one layer evaluated at `x`.
pub fn build_layer(
    tape: &mut Tape,
    nodes: &LayerNodes,
    mean: MeanFunctionSpec,
    x: NodeId,
    out_dim: usize,
) -> Result<LayerGraph> {
    let n = tape.value(x).rows();
    let m_count = tape.value(nodes.z).rows();
    let (kzz, kzx, kdiag) = match nodes.kernel {
        KernelNodes::SquaredExponential { variance_raw, lengthscales_raw } => {
            let v = tape.softplus(variance_raw);
            let ls = tape.softplus(lengthscales_raw);
            let kzz = tape.gram_se(v, ls, nodes.z, nodes.z)?;
            let kzx = tape.gram_se(v, ls, nodes.z, x)?;
            let kdiag = tape.se_diag(v, n)?;
            (kzz, kzx, kdiag)
        }
        KernelNodes::White { variance_raw } => {
            let v = tape.softplus(variance_raw);
            let kzz = tape.gram_white(v, nodes.z, nodes.z)?;
            let kzx = tape.gram_white(v, nodes.z, x)?;
            let kdiag = tape.se_diag(v, n)?;
            (kzz, kzx, kdiag)
        }
    };
    let l = tape.cholesky(kzz)?;
    // A = L^-1 K_zx, shared by mean and variance.
    let a = tape.tri_solve(l, kzx, TriSide::Lower)?;
    if mean == MeanFunctionSpec::Identity && tape.value(x).cols() != out_dim {
        return Err(Error::dims(
            "identity mean",
            format!("input dim {} vs output dim {out_dim}", tape.value(x).cols()),
        ));
    }
    let mean_part = tape.matmul(a, nodes.m, true, false)?;
    let mean_node = match mean {
        MeanFunctionSpec::Zero => mean_part,
        MeanFunctionSpec::Identity => tape.add(mean_part, x)?,
    };
    // var = k_diag - colsumsq(A) + colsumsq(L_s^T A).
    let a_ss = tape.col_sum_sq(a);
    let s_diag = tape.softplus(nodes.s_diag_raw);
    let ls_mat = tape.assemble_lower(nodes.s_strict, s_diag)?;
    let u = tape.matmul(ls_mat, a, true, false)?;
    let u_ss = tape.col_sum_sq(u);
    let partial = tape.sub(kdiag, a_ss)?;
    let var = tape.add(partial, u_ss)?;
    let var = tape.clamp_min(var, VARIANCE_FLOOR);

    // KL(q(v) || N(0, I)), summed over the P independent output
    // dimensions sharing S: 0.5 (P tr(S) + |m|_F^2 - P M - P log det S).
    // The kernel does not appear: that is the point of whitening.
    let trace_term = tape.sum_sq(ls_mat);
    let mahal = tape.sum_sq(nodes.m);
    let ld_s = tape.log_det_chol(ls_mat)?;
    let p = out_dim as f64;
    let t1 = tape.scale_const(trace_term, p);
    let t2 = tape.scale_const(ld_s, -p);
    let partial = tape.add(t1, mahal)?;
    let partial = tape.add(partial, t2)?;
    let shifted = tape.add_const(partial, -p * m_count as f64);
    let kl = tape.scale_const(shifted, 0.5);

    Ok(LayerGraph { marginal: MarginalNodes { mean: mean_node, variance: var }, kl })
}

/// Reparametrized sample node: `mean + sqrt(var) * eps`, row-broadcast.
pub fn sample_nodes(tape: &mut Tape, marginal: &MarginalNodes, eps: NodeId) -> Result<NodeId> {
    let sd = tape.sqrt(marginal.variance);
    let scaled = tape.mul_col_vec(eps, sd)?;
    tape.add(marginal.mean, scaled)
}

/// One sparse variational GP layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvgpLayer {
    kernel: KernelSpec,
    mean: MeanFunctionSpec,
    /// Inducing inputs, `M x D_in`.
    z: DenseMatrix,
    /// Whitened variational means, `M x P_out` (coordinates of
    /// `q(v) = N(m, S)` with `u = mu(z) + chol(K_zz) v`).
    m: DenseMatrix,
    /// Packed strictly-lower part of the whitened covariance factor,
    /// length `M (M - 1) / 2`, row-major.
    s_strict: Vec<f64>,
    /// Raw (pre-softplus) diagonal of the covariance factor, length `M`.
    s_diag_raw: Vec<f64>,
}

impl SvgpLayer {
    /// Layer with `q(v) = N(0, I)` at the given inducing inputs — in the
    /// whitened coordinates that is exactly the prior.
    pub fn new(
        kernel: KernelSpec,
        mean: MeanFunctionSpec,
        z: DenseMatrix,
        out_dim: usize,
    ) -> Result<Self> {
        kernel.validate(z.cols())?;
        if z.rows() == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(
                "layer needs at least one inducing point and one output dimension".to_string(),
            ));
        }
        if mean == MeanFunctionSpec::Identity && z.cols() != out_dim {
            return Err(Error::dims(
                "identity mean",
                format!("input dim {} vs output dim {out_dim}", z.cols()),
            ));
        }
        let m_count = z.rows();
        Ok(SvgpLayer {
            kernel,
            mean,
            m: DenseMatrix::zeros(m_count, out_dim),
            s_strict: vec![0.0; m_count * (m_count - 1) / 2],
            s_diag_raw: vec![positive_transform_inverse(1.0); m_count],
            z,
        })
    }

    /// Layer whose inducing inputs are a random subset of `x` rows (drawn
    /// without replacement); exact duplicate rows are nudged apart so
    /// `K_zz` stays comfortably invertible.
    pub fn init_from_inputs(
        kernel: KernelSpec,
        mean: MeanFunctionSpec,
        x: &DenseMatrix,
        num_inducing: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if num_inducing == 0 || num_inducing > x.rows() {
            return Err(Error::InvalidConfig(format!(
                "cannot place {num_inducing} inducing points on {} inputs",
                x.rows()
            )));
        }
        let idx = rng.sample_indices(x.rows(), num_inducing);
        let mut z = DenseMatrix::zeros(num_inducing, x.cols());
        for (r, &i) in idx.iter().enumerate() {
            z.row_mut(r).copy_from_slice(x.row(i));
        }
        nudge_duplicate_rows(&mut z, rng);
        SvgpLayer::new(kernel, mean, z, out_dim)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mean_spec(&self) -> MeanFunctionSpec {
        self.mean
    }

    pub fn inducing_inputs(&self) -> &DenseMatrix {
        &self.z
    }

    pub fn variational_mean(&self) -> &DenseMatrix {
        &self.m
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.m.cols()
    }

    /// Lower-triangular factor of the variational covariance.
    pub fn s_factor(&self) -> DenseMatrix {
        let n = self.num_inducing();
        let mut l = DenseMatrix::zeros(n, n);
        let mut p = 0;
        for i in 0..n {
            for j in 0..i {
                l.set(i, j, self.s_strict[p]);
                p += 1;
            }
            l.set(i, i, positive_transform(self.s_diag_raw[i]));
        }
        l
    }

    /// Overwrite the variational posterior in whitened coordinates.
    /// `s_lower` must be lower triangular with a strictly positive
    /// diagonal.
    pub fn set_variational(&mut self, m: DenseMatrix, s_lower: &DenseMatrix) -> Result<()> {
        let n = self.num_inducing();
        if m.shape() != (n, self.out_dim()) || s_lower.shape() != (n, n) {
            return Err(Error::dims(
                "set_variational",
                format!(
                    "m {:?} (want {:?}), s {:?} (want {n}x{n})",
                    m.shape(),
                    (n, self.out_dim()),
                    s_lower.shape()
                ),
            ));
        }
        for i in 0..n {
            if s_lower.get(i, i) <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "covariance factor diagonal must be positive, got {} at {i}",
                    s_lower.get(i, i)
                )));
            }
            for j in (i + 1)..n {
                if s_lower.get(i, j) != 0.0 {
                    return Err(Error::InvalidConfig(
                        "covariance factor must be lower triangular".to_string(),
                    ));
                }
            }
        }
        let mut p = 0;
        for i in 0..n {
            for j in 0..i {
                self.s_strict[p] = s_lower.get(i, j);
                p += 1;
            }
            self.s_diag_raw[i] = positive_transform_inverse(s_lower.get(i, i));
        }
        self.m = m;
        Ok(())
    }

    /// Reset the covariance factor to `scale * I`; used to start deep
    /// layers near-deterministic.
    pub fn set_covariance_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "covariance scale must be positive, got {scale}"
            )));
        }
        self.s_strict.iter_mut().for_each(|v| *v = 0.0);
        let raw = positive_transform_inverse(scale);
        self.s_diag_raw.iter_mut().for_each(|v| *v = raw);
        Ok(())
    }

    /// Create tape nodes for this layer's parameters. With
    /// `trainable = false` the nodes are constants (used by the plain
    /// evaluation paths).
    pub fn nodes(&self, tape: &mut Tape, trainable: bool) -> LayerNodes {
        let mut mk = |value: DenseMatrix| {
            if trainable {
                tape.leaf(value)
            } else {
                tape.constant(value)
            }
        };
        let z = mk(self.z.clone());
        let m = mk(self.m.clone());
        let s_strict = mk(DenseMatrix::column(&self.s_strict));
        let s_diag_raw = mk(DenseMatrix::column(&self.s_diag_raw));
        let kernel = match &self.kernel {
            KernelSpec::SquaredExponential { variance, lengthscales } => {
                let raw_ls: Vec<f64> = lengthscales
                    .iter()
                    .map(|l| positive_transform_inverse(*l))
                    .collect();
                KernelNodes::SquaredExponential {
                    variance_raw: mk(DenseMatrix::from_vec(1, 1, vec![
                        positive_transform_inverse(*variance),
                    ])
                    .expect("1x1")),
                    lengthscales_raw: mk(DenseMatrix::column(&raw_ls)),
                }
            }
            KernelSpec::White { variance } => KernelNodes::White {
                variance_raw: mk(DenseMatrix::from_vec(1, 1, vec![
                    positive_transform_inverse(*variance),
                ])
                .expect("1x1")),
            },
        };
        LayerNodes { z, m, s_strict, s_diag_raw, kernel }
    }

    fn graph_at(&self, x: &DenseMatrix) -> Result<(Tape, LayerGraph)> {
        if x.cols() != self.in_dim() {
            return Err(Error::dims(
                "marginal",
                format!("input dim {} vs layer dim {}", x.cols(), self.in_dim()),
            ));
        }
        let mut tape = Tape::new();
        let nodes = self.nodes(&mut tape, false);
        let xn = tape.constant(x.clone());
        let graph = build_layer(&mut tape, &nodes, self.mean, xn, self.out_dim())?;
        Ok((tape, graph))
    }

    /// Posterior marginals at a batch of inputs.
    pub fn marginal(&self, x: &DenseMatrix) -> Result<MarginalGaussians> {
        let (tape, graph) = self.graph_at(x)?;
        Ok(MarginalGaussians {
            mean: tape.value(graph.marginal.mean).clone(),
            variance: tape.value(graph.marginal.variance).col(0),
        })
    }

    /// `KL(q(u) || p(u))`, summed over output dimensions.
    pub fn kl_to_prior(&self) -> Result<f64> {
        // Evaluate at a single arbitrary input; the KL node ignores it.
        let x = DenseMatrix::zeros(1, self.in_dim());
        let (tape, graph) = self.graph_at(&x)?;
        Ok(tape.scalar(graph.kl))
    }

    /// Reparametrized function draw at `x`.
    pub fn sample(&self, x: &DenseMatrix, rng: &mut RngStream) -> Result<DenseMatrix> {
        Ok(self.marginal(x)?.sample(rng))
    }

    /// Relative field names and raw-space values of all trainable
    /// parameters, in a stable order.
    pub fn raw_parameters(&self) -> Vec<(&'static str, DenseMatrix)> {
        let mut out = vec![
            ("z", self.z.clone()),
            ("m", self.m.clone()),
            ("s_strict", DenseMatrix::column(&self.s_strict)),
            ("s_diag_raw", DenseMatrix::column(&self.s_diag_raw)),
        ];
        match &self.kernel {
            KernelSpec::SquaredExponential { variance, lengthscales } => {
                out.push((
                    "kern_variance_raw",
                    DenseMatrix::from_vec(1, 1, vec![positive_transform_inverse(*variance)])
                        .expect("1x1"),
                ));
                let raw: Vec<f64> = lengthscales
                    .iter()
                    .map(|l| positive_transform_inverse(*l))
                    .collect();
                out.push(("kern_lengthscales_raw", DenseMatrix::column(&raw)));
            }
            KernelSpec::White { variance } => {
                out.push((
                    "kern_variance_raw",
                    DenseMatrix::from_vec(1, 1, vec![positive_transform_inverse(*variance)])
                        .expect("1x1"),
                ));
            }
        }
        out
    }

    /// Write one raw-space parameter back; the inverse of
    /// [`SvgpLayer::raw_parameters`].
    pub fn set_raw_parameter(&mut self, field: &str, value: &DenseMatrix) -> Result<()> {
        let check = |have: (usize, usize), want: (usize, usize)| -> Result<()> {
            if have != want {
                Err(Error::dims("set_raw_parameter", format!("{have:?} vs {want:?}")))
            } else {
                Ok(())
            }
        };
        match field {
            "z" => {
                check(value.shape(), self.z.shape())?;
                self.z = value.clone();
            }
            "m" => {
                check(value.shape(), self.m.shape())?;
                self.m = value.clone();
            }
            "s_strict" => {
                check(value.shape(), (self.s_strict.len(), 1))?;
                self.s_strict = value.col(0);
            }
            "s_diag_raw" => {
                check(value.shape(), (self.s_diag_raw.len(), 1))?;
                self.s_diag_raw = value.col(0);
            }
            "kern_variance_raw" => {
                check(value.shape(), (1, 1))?;
                let v = positive_transform(value.get(0, 0));
                match &mut self.kernel {
                    KernelSpec::SquaredExponential { variance, .. } => *variance = v,
                    KernelSpec::White { variance } => *variance = v,
                }
            }
            "kern_lengthscales_raw" => match &mut self.kernel {
                KernelSpec::SquaredExponential { lengthscales, .. } => {
                    check(value.shape(), (lengthscales.len(), 1))?;
                    *lengthscales = value.col(0).iter().map(|r| positive_transform(*r)).collect();
                }
                KernelSpec::White { .. } => {
                    return Err(Error::InvalidConfig(
                        "white kernel has no lengthscales".to_string(),
                    ));
                }
            },
            other => {
                return Err(Error::InvalidConfig(format!("unknown layer parameter `{other}`")));
            }
        }
        Ok(())
    }
}

/// Nudge exact duplicate rows apart with tiny Gaussian noise.
fn nudge_duplicate_rows(z: &mut DenseMatrix, rng: &mut RngStream) {
    let n = z.rows();
    for _ in 0..16 {
        let mut any = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if z.row(i) == z.row(j) {
                    any = true;
                    for d in 0..z.cols() {
                        let v = z.get(j, d) + 1e-6 * rng.next_std_normal();
                        z.set(j, d, v);
                    }
                }
            }
        }
        if !any {
            return;
        }
    }
}

/// A chain of layers forming one (possibly deep) latent process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpStack {
    layers: Vec<SvgpLayer>,
}

impl GpStack {
    pub fn new(layers: Vec<SvgpLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("stack needs at least one layer".to_string()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    "stack",
                    format!(
                        "layer output dim {} feeds layer input dim {}",
                        pair[0].out_dim(),
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(GpStack { layers })
    }

    pub fn layers(&self) -> &[SvgpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SvgpLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Sum of per-layer divergences from the prior.
    pub fn kl_to_prior(&self) -> Result<f64> {
        self.layers.iter().map(|l| l.kl_to_prior()).sum()
    }

    /// Propagate a reparametrized sample through every layer.
    pub fn sample_through(&self, x: &DenseMatrix, rng: &mut RngStream) -> Result<DenseMatrix> {
        let mut current = x.clone();
        for layer in &self.layers {
            current = layer.sample(&current, rng)?;
        }
        Ok(current)
    }

    /// Marginals of the final layer when the stack is shallow; deep stacks
    /// have no closed-form marginal, so callers must sample instead.
    pub fn shallow_marginal(&self, x: &DenseMatrix) -> Result<Option<MarginalGaussians>> {
        if self.layers.len() == 1 {
            Ok(Some(self.layers[0].marginal(x)?))
        } else {
            Ok(None)
        }
    }
}
