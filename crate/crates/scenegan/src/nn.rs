//! Parameterized layers: convolutions with optional spectral normalization,
//! batch normalization, dropout, linear, graph convolution, and label
//! embedding tables.
//!
//! Layers own their parameters as plain tensors. During a forward pass each
//! parameter is registered once on the active [`Graph`] through a [`Fwd`]
//! context, which records the (name, node) binding so the optimizer can route
//! gradients back by name.

use crate::error::TensorError;
use crate::tensor::{Graph, NodeId, Rng64, Scalar, Tensor};
use std::collections::HashMap;

/// Forward mode: training enables dropout, batch statistics and power
/// iteration updates; eval freezes all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param { name: name.into(), value }
    }
}

/// Forward-pass context: the graph under construction, the param bindings of
/// this pass, the phase, and the dropout/noise stream.
pub struct Fwd<F: Scalar> {
    pub graph: Graph<F>,
    pub phase: Phase,
    pub rng: Rng64,
    bindings: HashMap<String, NodeId>,
    track: bool,
}

impl<F: Scalar> Fwd<F> {
    pub fn new(phase: Phase, rng: Rng64) -> Self {
        Fwd {
            graph: Graph::new(),
            phase,
            rng,
            bindings: HashMap::new(),
            track: true,
        }
    }

    /// Registers a parameter on the graph (once per pass) and returns its node.
    pub fn param(&mut self, p: &Param<F>) -> NodeId {
        if self.track {
            if let Some(&id) = self.bindings.get(&p.name) {
                return id;
            }
            let id = self.graph.leaf(p.value.clone(), true);
            self.bindings.insert(p.name.clone(), id);
            id
        } else {
            // Frozen section: fresh constant, not recorded on the tape.
            self.graph.constant(p.value.clone())
        }
    }

    /// Whether parameters registered right now are gradient targets.
    pub fn tracking(&self) -> bool {
        self.track
    }

    /// Runs `f` with parameter tracking disabled (their current values are
    /// registered as constants). Used when a trained adversary is replayed
    /// only to provide gradients to the generator.
    pub fn frozen<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.track;
        self.track = false;
        let out = f(self);
        self.track = prev;
        out
    }

    /// Node bound to a parameter name in this pass, if any.
    pub fn binding(&self, name: &str) -> Option<NodeId> {
        self.bindings.get(name).copied()
    }

    pub fn bindings(&self) -> &HashMap<String, NodeId> {
        &self.bindings
    }
}

/// In-place elementwise helpers used by initializers.
fn init_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data)
}

// ─── spectral normalization ─────────────────────────────────────────────────

/// One-shot spectral normalization of `weight` reshaped to `(rows, cols)`.
///
/// Runs `iters` rounds of power iteration from `u`, returning the normalized
/// weight, the updated `u`, and the spectral-norm estimate.
pub fn spectral_normalize<F: Scalar>(
    weight: &Tensor<F>,
    u: &Tensor<F>,
    iters: usize,
) -> Result<(Tensor<F>, Tensor<F>, F), TensorError> {
    assert!(iters >= 1);
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    let (u_new, _v, sigma) = power_iterate(weight.data(), rows, cols, u, iters)?;
    let inv = F::one() / sigma;
    Ok((weight.map(|x| x * inv), u_new, sigma))
}

/// Power iteration on the matricized weight; returns (u, v, sigma).
pub(crate) fn power_iterate<F: Scalar>(
    w: &[F],
    rows: usize,
    cols: usize,
    u0: &Tensor<F>,
    iters: usize,
) -> Result<(Tensor<F>, Vec<F>, F), TensorError> {
    let mut u: Vec<F> = u0.data().to_vec();
    assert_eq!(u.len(), rows);
    let mut v = vec![F::zero(); cols];
    let tiny = F::from_f64(1e-12);
    for _ in 0..iters {
        // v = normalize(W^T u)
        for x in v.iter_mut() {
            *x = F::zero();
        }
        for r in 0..rows {
            let ur = u[r];
            let w_row = &w[r * cols..(r + 1) * cols];
            for (vc, &wv) in v.iter_mut().zip(w_row) {
                *vc += wv * ur;
            }
        }
        let norm_v = v.iter().map(|x| *x * *x).sum::<F>().sqrt();
        if norm_v < tiny {
            return Err(TensorError::DegenerateWeight(format!(
                "power iteration collapsed (||W^T u|| = {norm_v})"
            )));
        }
        for x in v.iter_mut() {
            *x /= norm_v;
        }
        // u = normalize(W v)
        for (r, ur) in u.iter_mut().enumerate() {
            let w_row = &w[r * cols..(r + 1) * cols];
            *ur = w_row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        }
        let norm_u = u.iter().map(|x| *x * *x).sum::<F>().sqrt();
        if norm_u < tiny {
            return Err(TensorError::DegenerateWeight(format!(
                "power iteration collapsed (||W v|| = {norm_u})"
            )));
        }
        for x in u.iter_mut() {
            *x /= norm_u;
        }
    }
    // sigma = u^T W v
    let mut sigma = F::zero();
    for r in 0..rows {
        let w_row = &w[r * cols..(r + 1) * cols];
        let dot: F = w_row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        sigma += u[r] * dot;
    }
    if sigma < tiny {
        return Err(TensorError::DegenerateWeight(format!(
            "spectral norm estimate {sigma} below 1e-12"
        )));
    }
    Ok((Tensor::from_vec(&[rows], u), v, sigma))
}

// ─── convolution layers ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv2d,
    Conv3d,
    ConvTranspose3d,
}

/// Convolution layer, optionally spectral-normalized (one power iteration per
/// tracked forward, Miyato-style persistent `u`).
#[derive(Debug)]
pub struct ConvLayer<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub stride: usize,
    pub pad: usize,
    pub kind: ConvKind,
    /// Persistent left singular vector estimate; present iff normalized.
    pub spectral_u: Option<Tensor<F>>,
}

impl<F: Scalar> ConvLayer<F> {
    /// `kernel` applies to every spatial axis. For transposed convolutions
    /// `in_ch`/`out_ch` follow the data flow direction.
    pub fn new(
        name: &str,
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut Rng64,
    ) -> Self {
        let w_shape: Vec<usize> = match kind {
            ConvKind::Conv2d => vec![out_ch, in_ch, kernel, kernel],
            ConvKind::Conv3d => vec![out_ch, in_ch, kernel, kernel, kernel],
            ConvKind::ConvTranspose3d => vec![in_ch, out_ch, kernel, kernel, kernel],
        };
        let weight = Param::new(format!("{name}.w"), init_normal(&w_shape, 0.02, rng));
        let bias = Param::new(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        let spectral_u = spectral.then(|| {
            let rows = w_shape[0];
            let u = init_normal::<F>(&[rows], 1.0, rng);
            let norm = u.data().iter().map(|x| *x * *x).sum::<F>().sqrt();
            u.map(|x| x / norm)
        });
        ConvLayer { weight, bias, stride, pad, kind, spectral_u }
    }

    /// Kernel with non-square spatial dims (used by seed projections and heads).
    pub fn with_kernel_dims(
        name: &str,
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kdims: &[usize],
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut Rng64,
    ) -> Self {
        let mut w_shape = match kind {
            ConvKind::ConvTranspose3d => vec![in_ch, out_ch],
            _ => vec![out_ch, in_ch],
        };
        w_shape.extend_from_slice(kdims);
        let weight = Param::new(format!("{name}.w"), init_normal(&w_shape, 0.02, rng));
        let bias = Param::new(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        let spectral_u = spectral.then(|| {
            let rows = w_shape[0];
            let u = init_normal::<F>(&[rows], 1.0, rng);
            let norm = u.data().iter().map(|x| *x * *x).sum::<F>().sqrt();
            u.map(|x| x / norm)
        });
        ConvLayer { weight, bias, stride, pad, kind, spectral_u }
    }

    /// Effective weight node: raw weight, or weight / sigma with sigma
    /// estimated by power iteration and differentiated through.
    fn weight_node(&mut self, fx: &mut Fwd<F>) -> Result<NodeId, TensorError> {
        let w = fx.param(&self.weight);
        let Some(u) = &self.spectral_u else {
            return Ok(w);
        };
        let rows = self.weight.value.shape()[0];
        let cols = self.weight.value.numel() / rows;
        let iters = 1;
        let (u_new, v, _sigma) = power_iterate(self.weight.value.data(), rows, cols, u, iters)?;
        if fx.tracking() && fx.phase == Phase::Train {
            self.spectral_u = Some(u_new.clone());
        }
        // sigma = u^T W v with u, v held constant; gradient flows through W.
        let g = &mut fx.graph;
        let u_c = g.constant(u_new.reshaped(&[1, rows])?);
        let v_c = g.constant(Tensor::from_vec(&[cols, 1], v));
        let w_mat = g.reshape(w, &[rows, cols])?;
        let uw = g.matmul(u_c, w_mat)?;
        let sigma_node = g.matmul(uw, v_c)?;
        let log_sigma = g.log(sigma_node)?;
        let neg = g.scale(log_sigma, -1.0)?;
        let inv_sigma = g.exp(neg)?;
        g.mul(w, inv_sigma)
    }

    pub fn forward(&mut self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId, TensorError> {
        let w = self.weight_node(fx)?;
        let b = fx.param(&self.bias);
        match self.kind {
            ConvKind::Conv2d | ConvKind::Conv3d => {
                fx.graph.conv(x, w, Some(b), self.stride, self.pad)
            }
            ConvKind::ConvTranspose3d => {
                fx.graph.conv_transpose(x, w, Some(b), self.stride, self.pad)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ─── linear ─────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Param<F>, // [in, out]
    pub bias: Param<F>,   // [out]
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng64) -> Self {
        Linear {
            weight: Param::new(format!("{name}.w"), init_normal(&[in_dim, out_dim], 0.02, rng)),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    /// `x` is `[batch, in]`.
    pub fn forward(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId, TensorError> {
        let w = fx.param(&self.weight);
        let b = fx.param(&self.bias);
        let h = fx.graph.matmul(x, w)?;
        fx.graph.add(h, b)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ─── batch normalization ────────────────────────────────────────────────────

/// Batch normalization over the channel axis (axis 1).
#[derive(Debug)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize, rng: &mut Rng64) -> Self {
        let gamma = init_normal::<F>(&[channels], 0.02, rng).map(|x| x + F::one());
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), gamma),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// `x` is `[N, C, ...]`. Train mode uses batch statistics and updates the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = fx.graph.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Dimension {
                op: "batch_norm",
                msg: format!("need a channel axis, got {shape:?}"),
            });
        }
        let channels = shape[1];
        // channel-broadcast shape [1, C, 1, ...]
        let mut bshape = vec![1usize; shape.len()];
        bshape[1] = channels;
        let reduce_axes: Vec<usize> = (0..shape.len()).filter(|&d| d != 1).collect();

        let (mean_n, var_n) = match fx.phase {
            Phase::Train => {
                if shape[0] < 2 {
                    return Err(TensorError::Contract {
                        op: "batch_norm",
                        msg: "train mode requires batch size >= 2".into(),
                    });
                }
                let g = &mut fx.graph;
                let mean = g.mean_axes(x, &reduce_axes)?; // [C]
                let mean_b = g.reshape(mean, &bshape)?;
                let centered = g.sub(x, mean_b)?;
                let sq = g.mul(centered, centered)?;
                let var = g.mean_axes(sq, &reduce_axes)?; // [C]
                // update running stats from the detached batch statistics
                if fx.tracking() {
                    let m = F::from_f64(self.momentum);
                    let one_m = F::one() - m;
                    let mv = fx.graph.value(mean).clone();
                    let vv = fx.graph.value(var).clone();
                    for c in 0..channels {
                        self.running_mean.data_mut()[c] =
                            one_m * self.running_mean.data()[c] + m * mv.data()[c];
                        self.running_var.data_mut()[c] =
                            one_m * self.running_var.data()[c] + m * vv.data()[c];
                    }
                }
                (mean, var)
            }
            Phase::Eval => {
                let g = &mut fx.graph;
                let mean = g.constant(self.running_mean.clone());
                let var = g.constant(self.running_var.clone());
                (mean, var)
            }
        };

        let g = &mut fx.graph;
        let mean_b = g.reshape(mean_n, &bshape)?;
        let var_b = g.reshape(var_n, &bshape)?;
        let eps_c = g.constant(Tensor::full(&bshape, F::from_f64(self.eps)));
        let var_eps = g.add(var_b, eps_c)?;
        // rsqrt via exp(-0.5 log v); v >= eps > 0
        let lv = g.log(var_eps)?;
        let half_neg = g.scale(lv, -0.5)?;
        let rstd = g.exp(half_neg)?;
        let centered = g.sub(x, mean_b)?;
        let normed = g.mul(centered, rstd)?;
        let gamma = fx.param(&self.gamma);
        let beta = fx.param(&self.beta);
        let g = &mut fx.graph;
        let gamma_b = g.reshape(gamma, &bshape)?;
        let beta_b = g.reshape(beta, &bshape)?;
        let scaled = g.mul(normed, gamma_b)?;
        g.add(scaled, beta_b)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ─── dropout ────────────────────────────────────────────────────────────────

/// Dropout with keep-scale 1/(1-p). Identity in eval mode or when p == 0.
pub fn dropout<F: Scalar>(fx: &mut Fwd<F>, x: NodeId, p: f64) -> Result<NodeId, TensorError> {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
    if fx.phase == Phase::Eval || p == 0.0 {
        return Ok(x);
    }
    let n = fx.graph.value(x).numel();
    let scale = F::from_f64(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..n)
        .map(|_| if fx.rng.uniform() < p { F::zero() } else { scale })
        .collect();
    fx.graph.dropout_mask(x, mask)
}

// ─── graph convolution ──────────────────────────────────────────────────────

/// One graph-convolution layer: leaky_relu(A_hat . X . W + b).
#[derive(Debug)]
pub struct GcnLayer<F: Scalar> {
    pub weight: Param<F>, // [in, out]
    pub bias: Param<F>,   // [out]
    pub slope: f64,
}

impl<F: Scalar> GcnLayer<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng64) -> Self {
        GcnLayer {
            weight: Param::new(format!("{name}.w"), init_normal(&[in_dim, out_dim], 0.02, rng)),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            slope: 0.2,
        }
    }

    /// `feats` is `[N, in]`, `norm_adj` a constant `[N, N]` node holding the
    /// symmetric-normalized adjacency with self-loops.
    pub fn forward(
        &self,
        fx: &mut Fwd<F>,
        feats: NodeId,
        norm_adj: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = fx.param(&self.weight);
        let b = fx.param(&self.bias);
        let g = &mut fx.graph;
        let mixed = g.matmul(norm_adj, feats)?;
        let h = g.matmul(mixed, w)?;
        let hb = g.add(h, b)?;
        g.leaky_relu(hb, self.slope)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ─── embeddings ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Unit-norm Gaussian rows seeded by a stable hash of each label.
    SeededPseudo,
    /// Loaded from a `word<TAB>v0 v1 ... v299` text file.
    FileLoaded,
}

/// Label -> fixed 300-d vector. Lookups are deterministic; unknown labels are
/// an error, never a silent default.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F: Scalar> {
    pub dim: usize,
    pub source: EmbeddingSource,
    rows: HashMap<String, Tensor<F>>,
}

pub const EMBEDDING_DIM: usize = 300;

impl<F: Scalar> EmbeddingTable<F> {
    /// Builds pseudo-embeddings for `labels`: each row is a unit-normalized
    /// Gaussian draw seeded by the label text, so the table needs no file.
    pub fn seeded(labels: &[&str]) -> Self {
        let mut rows = HashMap::new();
        for &label in labels {
            let mut rng = Rng64::new(crate::tensor::hash_str(label));
            let raw = Tensor::<F>::randn(&[EMBEDDING_DIM], &mut rng);
            let norm = raw.data().iter().map(|x| *x * *x).sum::<F>().sqrt();
            rows.insert(label.to_string(), raw.map(|x| x / norm));
        }
        EmbeddingTable {
            dim: EMBEDDING_DIM,
            source: EmbeddingSource::SeededPseudo,
            rows,
        }
    }

    /// Parses a text table: UTF-8 word, tab, 300 decimal floats per line.
    pub fn from_text(text: &str) -> Result<Self, crate::error::DataError> {
        let mut rows = HashMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                crate::error::DataError::Format(format!("embedding line {} missing tab", ln + 1))
            })?;
            let vals: Result<Vec<F>, _> = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map(F::from_f64)
                        .map_err(|e| crate::error::DataError::Format(format!("line {}: {e}", ln + 1)))
                })
                .collect();
            let vals = vals?;
            if vals.len() != EMBEDDING_DIM {
                return Err(crate::error::DataError::Format(format!(
                    "embedding line {} has {} values, expected {EMBEDDING_DIM}",
                    ln + 1,
                    vals.len()
                )));
            }
            rows.insert(word.to_string(), Tensor::from_vec(&[EMBEDDING_DIM], vals));
        }
        Ok(EmbeddingTable {
            dim: EMBEDDING_DIM,
            source: EmbeddingSource::FileLoaded,
            rows,
        })
    }

    pub fn embed(&self, label: &str) -> Result<&Tensor<F>, crate::error::DataError> {
        self.rows
            .get(label)
            .ok_or_else(|| crate::error::DataError::UnknownLabel(label.to_string()))
    }

    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.rows.keys().map(|s| s.as_str()).collect();
        v.sort_unstable();
        v
    }

    /// (label, row) pairs in sorted label order, for serialization.
    pub fn sorted_rows(&self) -> Vec<(&str, &Tensor<F>)> {
        let mut v: Vec<(&str, &Tensor<F>)> =
            self.rows.iter().map(|(k, t)| (k.as_str(), t)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn insert_row(&mut self, label: String, row: Tensor<F>) {
        self.rows.insert(label, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;

    #[test]
    fn leaky_relu_values() {
        let mut fx = Fwd::<f64>::new(Phase::Eval, Rng64::new(0));
        let x = fx.graph.constant(Tensor::from_vec(&[3], vec![3.0, -1.0, 0.0]));
        let y = fx.graph.leaky_relu(x, 0.2).unwrap();
        assert_eq!(fx.graph.value(y).data(), &[3.0, -0.2, 0.0]);
    }

    #[test]
    fn spectral_normalize_diagonal() {
        // diag(2, 0.5): top singular value 2, normalized diag(1, 0.25)
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 0.5]);
        let u = Tensor::from_vec(&[2], vec![0.9, 0.1]);
        let (wn, _u, sigma) = spectral_normalize(&w, &u, 60).unwrap();
        assert!((sigma - 2.0).abs() < 1e-9, "sigma {sigma}");
        assert!((wn.data()[0] - 1.0).abs() < 1e-9);
        assert!((wn.data()[3] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn spectral_normalize_identity() {
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let u = Tensor::from_vec(&[2], vec![0.6, 0.8]);
        let (wn, _u, sigma) = spectral_normalize(&w, &u, 50).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
        for (a, b) in wn.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_is_degenerate() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let u = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            spectral_normalize(&w, &u, 1),
            Err(TensorError::DegenerateWeight(_))
        ));
    }

    #[test]
    fn normalized_weight_has_unit_norm() {
        let mut rng = Rng64::new(21);
        let w = Tensor::<f64>::randn(&[8, 12], &mut rng);
        let u0 = Tensor::<f64>::randn(&[8], &mut rng);
        let (wn, u1, _sigma) = spectral_normalize(&w, &u0, 50).unwrap();
        let (_wn2, _u2, sigma_of_normalized) = spectral_normalize(&wn, &u1, 50).unwrap();
        assert!(
            (sigma_of_normalized - 1.0).abs() < 1e-6,
            "sigma {sigma_of_normalized}"
        );
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        // per-channel mean 5, var 4 -> output mean ~0, var ~1
        let mut rng = Rng64::new(33);
        let mut bn = BatchNorm::<f64>::new("bn", 2, &mut rng);
        bn.gamma.value = Tensor::ones(&[2]);
        bn.beta.value = Tensor::zeros(&[2]);
        let mut data = Vec::new();
        let mut src = Rng64::new(7);
        for _ in 0..2 {
            for _ in 0..2 {
                for _ in 0..64 {
                    data.push(5.0 + 2.0 * src.normal());
                }
            }
        }
        let x = Tensor::from_vec(&[2, 2, 64], data);
        let mut fx = Fwd::new(Phase::Train, Rng64::new(0));
        let xn = fx.graph.leaf(x, false);
        let yn = bn.forward(&mut fx, xn).unwrap();
        let y = fx.graph.value(yn).clone();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..2 {
                vals.extend_from_slice(&y.data()[n * 128 + c * 64..n * 128 + (c + 1) * 64]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batch_norm_affine_and_eval_identity() {
        let mut rng = Rng64::new(34);
        let mut bn = BatchNorm::<f64>::new("bn", 1, &mut rng);
        bn.gamma.value = Tensor::from_vec(&[1], vec![2.0]);
        bn.beta.value = Tensor::from_vec(&[1], vec![3.0]);
        let x = Tensor::<f64>::randn(&[4, 1, 32], &mut rng);
        let mut fx = Fwd::new(Phase::Train, Rng64::new(0));
        let xn = fx.graph.leaf(x.clone(), false);
        let yn = bn.forward(&mut fx, xn).unwrap();
        let y = fx.graph.value(yn).clone();
        let mean: f64 = y.data().iter().sum::<f64>() / y.numel() as f64;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.numel() as f64;
        assert!((mean - 3.0).abs() < 1e-9);
        assert!((var - 4.0).abs() < 1e-3);

        // eval with running stats (0, 1): identity up to gamma/beta
        bn.running_mean = Tensor::zeros(&[1]);
        bn.running_var = Tensor::ones(&[1]);
        let mut fx = Fwd::new(Phase::Eval, Rng64::new(0));
        let xn = fx.graph.leaf(x.clone(), false);
        let yn = bn.forward(&mut fx, xn).unwrap();
        let y = fx.graph.value(yn).clone();
        for (a, b) in y.data().iter().zip(x.data()) {
            let expect = 2.0 * b / (1.0 + 1e-5f64).sqrt() + 3.0;
            assert!((a - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_size_one_train_is_contract_error() {
        let mut rng = Rng64::new(35);
        let mut bn = BatchNorm::<f64>::new("bn", 2, &mut rng);
        let mut fx = Fwd::new(Phase::Train, Rng64::new(0));
        let x = fx.graph.constant(Tensor::randn(&[1, 2, 8], &mut rng));
        assert!(matches!(
            bn.forward(&mut fx, x),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let mut fx = Fwd::<f64>::new(Phase::Eval, Rng64::new(1));
        let x = fx.graph.constant(Tensor::randn(&[10], &mut Rng64::new(2)));
        let y = dropout(&mut fx, x, 0.3).unwrap();
        assert_eq!(x, y);

        let mut fx = Fwd::<f64>::new(Phase::Train, Rng64::new(1));
        let x = fx.graph.constant(Tensor::randn(&[10], &mut Rng64::new(2)));
        let y = dropout(&mut fx, x, 0.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_survivor_statistics() {
        // p = 0.3 over 1e5 elements: survivors 0.7 +- 0.01, mean preserved +- 2%
        let n = 100_000;
        let mut fx = Fwd::<f64>::new(Phase::Train, Rng64::new(99));
        let x = fx.graph.constant(Tensor::full(&[n], 1.0));
        let yn = dropout(&mut fx, x, 0.3).unwrap();
        let y = fx.graph.value(yn).clone();
        let survivors = y.data().iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.7).abs() < 0.01, "survivors {survivors}");
        let mean: f64 = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn gcn_single_node_self_loop() {
        let mut rng = Rng64::new(5);
        let mut layer = GcnLayer::<f64>::new("gcn", 3, 3, &mut rng);
        // W = I, b = 0
        layer.weight.value = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        layer.bias.value = Tensor::zeros(&[3]);
        let mut fx = Fwd::new(Phase::Eval, Rng64::new(0));
        let feats = fx.graph.constant(Tensor::from_vec(&[1, 3], vec![0.5, -0.4, 2.0]));
        let adj = fx.graph.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
        let out = layer.forward(&mut fx, feats, adj).unwrap();
        let got = fx.graph.value(out).data().to_vec();
        assert_eq!(got, vec![0.5, -0.4 * 0.2, 2.0]);
    }

    #[test]
    fn gcn_disconnected_nodes_stay_local() {
        let mut rng = Rng64::new(6);
        let layer = GcnLayer::<f64>::new("gcn", 4, 5, &mut rng);
        let f1 = Tensor::<f64>::randn(&[1, 4], &mut rng);
        let f2 = Tensor::<f64>::randn(&[1, 4], &mut rng);
        let block = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut fx = Fwd::new(Phase::Eval, Rng64::new(0));
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            let feats = fx.graph.constant(Tensor::from_vec(&[2, 4], data));
            let adj = fx
                .graph
                .constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
            let out = layer.forward(&mut fx, feats, adj).unwrap();
            fx.graph.value(out).clone()
        };
        let y12 = block(&f1, &f2);
        let f3 = Tensor::<f64>::randn(&[1, 4], &mut rng);
        let y13 = block(&f1, &f3);
        // node 0's output is independent of node 1's features
        assert_eq!(&y12.data()[..5], &y13.data()[..5]);
    }

    #[test]
    fn embedding_is_deterministic_and_spread() {
        let labels = ["move_left", "square", "circle", "grow", "rotate", "ring"];
        let table = EmbeddingTable::<f64>::seeded(&labels);
        let a = table.embed("square").unwrap();
        let b = table.embed("square").unwrap();
        assert_eq!(a, b);
        assert!(table.embed("pentagon").is_err());

        // distinct labels should be near-orthogonal at dim 300
        let mut high = 0;
        let mut total = 0;
        for (i, &l1) in labels.iter().enumerate() {
            for &l2 in &labels[i + 1..] {
                let c = table.embed(l1).unwrap().dot(table.embed(l2).unwrap());
                total += 1;
                if c.abs() >= 0.5 {
                    high += 1;
                }
            }
        }
        assert_eq!(high, 0, "{high}/{total} pairs above 0.5 cosine");
    }

    #[test]
    fn embedding_text_round_trip() {
        let labels = ["grow", "bar"];
        let table = EmbeddingTable::<f32>::seeded(&labels);
        let mut text = String::new();
        for (label, row) in table.sorted_rows() {
            text.push_str(label);
            text.push('\t');
            let vals: Vec<String> = row.data().iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&vals.join(" "));
            text.push('\n');
        }
        let loaded = EmbeddingTable::<f32>::from_text(&text).unwrap();
        for label in labels {
            let a = table.embed(label).unwrap();
            let b = loaded.embed(label).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        // conv layer (spectral-normalized) end to end at f64
        let mut rng = Rng64::new(77);
        let mut layer = ConvLayer::<f64>::new("c", ConvKind::Conv2d, 2, 3, 4, 2, 1, true, &mut rng);
        let x0 = Tensor::<f64>::randn(&[2, 2, 8, 8], &mut rng);

        let run = |layer: &mut ConvLayer<f64>, x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut fx = Fwd::new(Phase::Eval, Rng64::new(0));
            let xn = fx.graph.leaf(x.clone(), true);
            let y = layer.forward(&mut fx, xn).unwrap();
            let sq = fx.graph.mul(y, y).unwrap();
            let loss = fx.graph.mean_all(sq).unwrap();
            let val = fx.graph.value(loss).item();
            let mut grads = fx.graph.backward(loss).unwrap();
            (val, grads.take(xn))
        };

        let (_, gx) = run(&mut layer, &x0);
        let numeric = finite_difference_gradient(
            |x| run(&mut ConvLayer { weight: layer.weight.clone(), bias: layer.bias.clone(), stride: 2, pad: 1, kind: ConvKind::Conv2d, spectral_u: layer.spectral_u.clone() }, x).0,
            &x0,
            1e-5,
        );
        let err = crate::tensor::max_relative_error(&gx.unwrap(), &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }
}
