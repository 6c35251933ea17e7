//! Interactive feature fusion: intra-modality, cross-modality and
//! hierarchical concatenation, plus generalized-mean pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_rows_dimwise, Branch, FeatureBatch, Matrix, Modality};

/// Lower clamp applied to GeM inputs before raising them to `p`.
pub const GEM_FLOOR: f64 = 1e-6;
pub const DEFAULT_GEM_P: f64 = 3.0;

/// Global and part features for both modalities, row-aligned by sample pair.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub g_rgb: FeatureBatch,
    pub g_ir: FeatureBatch,
    pub p_rgb: FeatureBatch,
    pub p_ir: FeatureBatch,
}

impl BranchSet {
    pub fn new(
        g_rgb: FeatureBatch,
        g_ir: FeatureBatch,
        p_rgb: FeatureBatch,
        p_ir: FeatureBatch,
    ) -> Result<Self> {
        let set = Self { g_rgb, g_ir, p_rgb, p_ir };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.g_rgb.len();
        if [&self.g_ir, &self.p_rgb, &self.p_ir].iter().any(|b| b.len() != n) {
            return Err(Error::Shape("branch batches differ in row count".into()));
        }
        if self.g_rgb.width() != self.g_ir.width() || self.p_rgb.width() != self.p_ir.width() {
            return Err(Error::Shape(format!(
                "global widths {}/{} and part widths {}/{} must agree across modalities",
                self.g_rgb.width(),
                self.g_ir.width(),
                self.p_rgb.width(),
                self.p_ir.width()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.g_rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_rgb.is_empty()
    }

    /// Exchanges the RGB and IR roles.
    pub fn swapped(&self) -> BranchSet {
        BranchSet {
            g_rgb: self.g_ir.clone(),
            g_ir: self.g_rgb.clone(),
            p_rgb: self.p_ir.clone(),
            p_ir: self.p_rgb.clone(),
        }
    }
}

/// `F_intra = F_global ⊕ F_part` within each modality.
pub fn intra_fuse(bs: &BranchSet) -> Result<(FeatureBatch, FeatureBatch)> {
    bs.validate()?;
    let mut rgb = concat_rows_dimwise(&bs.g_rgb, &bs.p_rgb)?;
    let mut ir = concat_rows_dimwise(&bs.g_ir, &bs.p_ir)?;
    rgb.modality = Modality::Rgb;
    ir.modality = Modality::Ir;
    Ok((rgb, ir))
}

fn check_aligned(a: &FeatureBatch, b: &FeatureBatch) -> Result<()> {
    if let Some(i) = (0..a.len()).find(|&i| a.labels[i] != b.labels[i]) {
        return Err(Error::Pairing(format!(
            "row {i} pairs identity {} with identity {}",
            a.labels[i], b.labels[i]
        )));
    }
    Ok(())
}

/// `F_cross^{RGB-IR} = F_global^RGB ⊕ F_part^IR` and
/// `F_cross^{IR-RGB} = F_global^IR ⊕ F_part^RGB`.
pub fn cross_fuse(bs: &BranchSet) -> Result<(FeatureBatch, FeatureBatch)> {
    bs.validate()?;
    check_aligned(&bs.g_rgb, &bs.p_ir)?;
    check_aligned(&bs.g_ir, &bs.p_rgb)?;
    Ok((concat_rows_dimwise(&bs.g_rgb, &bs.p_ir)?, concat_rows_dimwise(&bs.g_ir, &bs.p_rgb)?))
}

/// Fully connected layer `y = x·W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} outputs but bias has {}",
                weight.cols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            y.row_mut(r).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// `H_fused = ReLU(head(F_g^RGB ⊕ F_g^IR ⊕ F_p^RGB ⊕ F_p^IR))`.
pub fn hierarchical_fuse(bs: &BranchSet, shared_head: &Affine) -> Result<FeatureBatch> {
    bs.validate()?;
    check_aligned(&bs.g_rgb, &bs.g_ir)?;
    let want = 2 * bs.g_rgb.width() + 2 * bs.p_rgb.width();
    if shared_head.input_width() != want {
        return Err(Error::Shape(format!(
            "shared head expects width {} but the concatenation has width {want}",
            shared_head.input_width()
        )));
    }
    let cat = bs
        .g_rgb
        .features
        .hstack(&bs.g_ir.features)?
        .hstack(&bs.p_rgb.features)?
        .hstack(&bs.p_ir.features)?;
    FeatureBatch::new(
        relu(&shared_head.forward(&cat)?),
        bs.g_rgb.labels.clone(),
        bs.g_rgb.modality,
        Branch::Fused,
    )
}

fn check_gem(tokens: &Matrix, p: f64) -> Result<()> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidArgument(format!("GeM exponent {p} must be ≥ 1")));
    }
    if tokens.rows() == 0 {
        return Err(Error::InvalidArgument("GeM needs at least one token".into()));
    }
    Ok(())
}

/// Mean of `values`, summed in ascending order so the result does not
/// depend on token order.
fn ordered_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / values.len() as f64
}

/// `out_j = ((1/L) Σ_i max(x_ij, floor)^p)^(1/p)`.
pub fn gem_pool(tokens: &Matrix, p: f64) -> Result<Vec<f64>> {
    check_gem(tokens, p)?;
    Ok((0..tokens.cols())
        .map(|j| {
            let pows: Vec<f64> =
                (0..tokens.rows()).map(|i| tokens[(i, j)].max(GEM_FLOOR).powf(p)).collect();
            ordered_mean(&pows).powf(1.0 / p)
        })
        .collect())
}

/// Gradients of [`gem_pool`]: `(d tokens, d p)` for upstream `grad_out`.
pub fn gem_pool_backward(tokens: &Matrix, p: f64, grad_out: &[f64]) -> Result<(Matrix, f64)> {
    check_gem(tokens, p)?;
    if grad_out.len() != tokens.cols() {
        return Err(Error::Shape("GeM upstream gradient width mismatch".into()));
    }
    let (rows, cols) = tokens.shape();
    let l = rows as f64;
    let mut d_tokens = Matrix::zeros(rows, cols);
    let mut d_p = 0.0;
    for j in 0..cols {
        let g = grad_out[j];
        let xs: Vec<f64> = (0..rows).map(|i| tokens[(i, j)].max(GEM_FLOOR)).collect();
        let pows: Vec<f64> = xs.iter().map(|x| x.powf(p)).collect();
        let m = ordered_mean(&pows);
        let y = m.powf(1.0 / p);
        // ∂y/∂x_i = m^(1/p − 1) x_i^(p−1) / L, zero where the floor is active.
        let scale = m.powf(1.0 / p - 1.0) / l;
        for i in 0..rows {
            if tokens[(i, j)] > GEM_FLOOR {
                d_tokens[(i, j)] = g * scale * xs[i].powf(p - 1.0);
            }
        }
        // ∂y/∂p = y · (−ln m / p² + (Σ x^p ln x) / (L·m·p)).
        let weighted_log = pows.iter().zip(&xs).map(|(q, x)| q * x.ln()).sum::<f64>() / l;
        d_p += g * y * (-m.ln() / (p * p) + weighted_log / (m * p));
    }
    Ok((d_tokens, d_p))
}
