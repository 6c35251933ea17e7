//! Training objective: identity cross-entropy, batch-hard triplet and the
//! intra-/inter-modality MMD alignment terms.
//!
//! ```text
//! total = L_id + λ_tri·L_tri + w_intra·L_imdal + w_inter·L_idal
//! L_imdal = MMD²(g_rgb, p_rgb) + MMD²(g_ir, p_ir)
//! L_idal  = MMD²(fused_rgb, fused_ir)
//! ```

use serde::{Deserialize, Serialize};

use crate::amk_mmd::{mmd2_grad, KernelParams};
use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_intra: f64,
    pub w_inter: f64,
    pub lambda_tri: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_intra: 0.4, w_inter: 0.6, lambda_tri: 1.0, margin: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_intra", self.w_intra),
            ("w_inter", self.w_inter),
            ("lambda_tri", self.lambda_tri),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, with gradient
/// `(softmax − onehot) / n`.
pub fn id_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (row[k] - log_z).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Batch-hard triplet loss with Euclidean distances.
///
/// For each anchor the farthest positive and nearest negative are mined;
/// ties go to the lowest sample index. Returns the mean hinge and its
/// subgradient with respect to the embeddings.
pub fn triplet_loss_hard(emb: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let dist = |i: usize, j: usize| sq_dist(emb.row(i), emb.row(j)).sqrt();
    let mut grad = Matrix::zeros(n, emb.cols());
    let mut loss = 0.0;
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (p, dp) = pos.ok_or(Error::Sampling { anchor: a, reason: "has no positive in the batch".into() })?;
        let (q, dn) = neg.ok_or(Error::Sampling { anchor: a, reason: "has no negative in the batch".into() })?;
        let hinge = dp - dn + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        let scale = 1.0 / n as f64;
        if dp > 0.0 {
            for k in 0..emb.cols() {
                let u = (emb[(a, k)] - emb[(p, k)]) / dp * scale;
                grad[(a, k)] += u;
                grad[(p, k)] -= u;
            }
        }
        if dn > 0.0 {
            for k in 0..emb.cols() {
                let u = (emb[(a, k)] - emb[(q, k)]) / dn * scale;
                grad[(a, k)] -= u;
                grad[(q, k)] += u;
            }
        }
    }
    Ok((loss / n as f64, grad))
}

/// Embeddings entering the alignment terms, all of equal width.
#[derive(Debug, Clone)]
pub struct AlignmentEmbeddings<'a> {
    pub g_rgb: &'a Matrix,
    pub p_rgb: &'a Matrix,
    pub g_ir: &'a Matrix,
    pub p_ir: &'a Matrix,
    pub fused_rgb: &'a Matrix,
    pub fused_ir: &'a Matrix,
}

/// Kernel parameters for each MMD term. The weight logits are meant to be
/// shared; bandwidths may differ per term.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentKernels {
    pub intra_rgb: KernelParams,
    pub intra_ir: KernelParams,
    pub inter: KernelParams,
}

impl AlignmentKernels {
    pub fn shared(params: KernelParams) -> Self {
        Self { intra_rgb: params.clone(), intra_ir: params.clone(), inter: params }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentGrads {
    pub g_rgb: Matrix,
    pub p_rgb: Matrix,
    pub g_ir: Matrix,
    pub p_ir: Matrix,
    pub fused_rgb: Matrix,
    pub fused_ir: Matrix,
    /// Logit gradients of `L_imdal` and `L_idal`, respectively.
    pub d_logits_imdal: Vec<f64>,
    pub d_logits_idal: Vec<f64>,
}

/// `(L_imdal, L_idal)` and their gradients.
pub fn alignment_losses(
    embs: &AlignmentEmbeddings<'_>,
    kernels: &AlignmentKernels,
) -> Result<(f64, f64, AlignmentGrads)> {
    let (v_rgb, g_rgb) = mmd2_grad(embs.g_rgb, embs.p_rgb, &kernels.intra_rgb)?;
    let (v_ir, g_ir) = mmd2_grad(embs.g_ir, embs.p_ir, &kernels.intra_ir)?;
    let (v_inter, g_inter) = mmd2_grad(embs.fused_rgb, embs.fused_ir, &kernels.inter)?;
    let d_logits_imdal = g_rgb.d_logits.iter().zip(&g_ir.d_logits).map(|(a, b)| a + b).collect();
    Ok((
        v_rgb + v_ir,
        v_inter,
        AlignmentGrads {
            g_rgb: g_rgb.d_x,
            p_rgb: g_rgb.d_y,
            g_ir: g_ir.d_x,
            p_ir: g_ir.d_y,
            fused_rgb: g_inter.d_x,
            fused_ir: g_inter.d_y,
            d_logits_imdal,
            d_logits_idal: g_inter.d_logits,
        },
    ))
}

/// Everything the objective reads from one forward pass over `n` pairs.
#[derive(Debug, Clone)]
pub struct ObjectiveInputs {
    /// Identity of each RGB/IR pair.
    pub labels: Vec<usize>,
    /// Classifier logits, `m·n × C` for some `m ≥ 1`; row `i` belongs to
    /// pair `i mod n`.
    pub logits: Matrix,
    /// Branch features (IMDAL operands).
    pub g_rgb: Matrix,
    pub p_rgb: Matrix,
    pub g_ir: Matrix,
    pub p_ir: Matrix,
    /// Intra-fused embeddings per modality (IDAL operands, retrieval space).
    pub fused_rgb: Matrix,
    pub fused_ir: Matrix,
    /// Cross-fused embeddings `RGB-IR` and `IR-RGB`.
    pub cross_rgb_ir: Matrix,
    pub cross_ir_rgb: Matrix,
}

/// Gradients of the total objective with respect to each input.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub logits: Matrix,
    pub g_rgb: Matrix,
    pub p_rgb: Matrix,
    pub g_ir: Matrix,
    pub p_ir: Matrix,
    pub fused_rgb: Matrix,
    pub fused_ir: Matrix,
    pub cross_rgb_ir: Matrix,
    pub cross_ir_rgb: Matrix,
    pub kernel_logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub id: f64,
    pub tri: f64,
    pub imdal: f64,
    pub idal: f64,
    pub grads: ObjectiveGrads,
}

/// Triplet operand: the four embedding blocks stacked, labels repeated.
pub fn triplet_stack(inputs: &ObjectiveInputs) -> Result<(Matrix, Vec<usize>)> {
    let stacked = inputs
        .fused_rgb
        .vstack(&inputs.fused_ir)?
        .vstack(&inputs.cross_rgb_ir)?
        .vstack(&inputs.cross_ir_rgb)?;
    let labels = inputs.labels.iter().copied().cycle().take(4 * inputs.labels.len()).collect();
    Ok((stacked, labels))
}

/// Evaluates the composite objective. Terms with zero weight are skipped
/// entirely, so they impose no batch-size preconditions.
pub fn total_objective(
    inputs: &ObjectiveInputs,
    weights: &LossWeights,
    kernels: &AlignmentKernels,
) -> Result<LossReport> {
    weights.validate()?;
    let n = inputs.labels.len();
    let rows = inputs.logits.rows();
    if n == 0 || !rows.is_multiple_of(n) {
        return Err(Error::Shape(format!("{rows} logit rows for {n} pairs")));
    }
    let id_labels: Vec<usize> = inputs.labels.iter().copied().cycle().take(rows).collect();
    let (id, d_logits) = id_loss(&inputs.logits, &id_labels)?;

    let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let mut grads = ObjectiveGrads {
        logits: d_logits,
        g_rgb: zeros(&inputs.g_rgb),
        p_rgb: zeros(&inputs.p_rgb),
        g_ir: zeros(&inputs.g_ir),
        p_ir: zeros(&inputs.p_ir),
        fused_rgb: zeros(&inputs.fused_rgb),
        fused_ir: zeros(&inputs.fused_ir),
        cross_rgb_ir: zeros(&inputs.cross_rgb_ir),
        cross_ir_rgb: zeros(&inputs.cross_ir_rgb),
        kernel_logits: vec![0.0; kernels.inter.kernels()],
    };

    let mut tri = 0.0;
    if weights.lambda_tri > 0.0 {
        let (stacked, labels) = triplet_stack(inputs)?;
        let (v, g) = triplet_loss_hard(&stacked, &labels, weights.margin)?;
        tri = v;
        let g = g.scale(weights.lambda_tri);
        grads.fused_rgb.add_assign(&g.slice_rows(0, n));
        grads.fused_ir.add_assign(&g.slice_rows(n, 2 * n));
        grads.cross_rgb_ir.add_assign(&g.slice_rows(2 * n, 3 * n));
        grads.cross_ir_rgb.add_assign(&g.slice_rows(3 * n, 4 * n));
    }

    let (mut imdal, mut idal) = (0.0, 0.0);
    if weights.w_intra > 0.0 || weights.w_inter > 0.0 {
        let embs = AlignmentEmbeddings {
            g_rgb: &inputs.g_rgb,
            p_rgb: &inputs.p_rgb,
            g_ir: &inputs.g_ir,
            p_ir: &inputs.p_ir,
            fused_rgb: &inputs.fused_rgb,
            fused_ir: &inputs.fused_ir,
        };
        if weights.w_intra > 0.0 {
            let (v_rgb, g_rgb) = mmd2_grad(embs.g_rgb, embs.p_rgb, &kernels.intra_rgb)?;
            let (v_ir, g_ir) = mmd2_grad(embs.g_ir, embs.p_ir, &kernels.intra_ir)?;
            imdal = v_rgb + v_ir;
            let w = weights.w_intra;
            grads.g_rgb.add_scaled(&g_rgb.d_x, w);
            grads.p_rgb.add_scaled(&g_rgb.d_y, w);
            grads.g_ir.add_scaled(&g_ir.d_x, w);
            grads.p_ir.add_scaled(&g_ir.d_y, w);
            for (k, d) in grads.kernel_logits.iter_mut().enumerate() {
                *d += w * (g_rgb.d_logits[k] + g_ir.d_logits[k]);
            }
        }
        if weights.w_inter > 0.0 {
            let (v, g) = mmd2_grad(embs.fused_rgb, embs.fused_ir, &kernels.inter)?;
            idal = v;
            let w = weights.w_inter;
            grads.fused_rgb.add_scaled(&g.d_x, w);
            grads.fused_ir.add_scaled(&g.d_y, w);
            for (k, d) in grads.kernel_logits.iter_mut().enumerate() {
                *d += w * g.d_logits[k];
            }
        }
    }

    let total = id + weights.lambda_tri * tri + weights.w_intra * imdal + weights.w_inter * idal;
    if !total.is_finite() {
        return Err(Error::Contract(format!("objective is not finite: {total}")));
    }
    Ok(LossReport { total, id, tri, imdal, idal, grads })
}
