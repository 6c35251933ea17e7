//! Dual-branch token encoder with exact reverse-mode gradients.
//!
//! Each branch maps every token through `affine → ReLU → affine → ReLU` and
//! GeM-pools the tokens of a sample into one feature vector. Branch weights
//! are shared by both modalities. Three heads sit on the branch features:
//!
//! * intra: `[g_m | p_m] → d_e` per modality (retrieval embedding),
//! * cross: `[g_rgb | p_ir]` and `[g_ir | p_rgb] → d_e`,
//! * hierarchical: `ReLU([g_rgb | g_ir | p_rgb | p_ir] → d_e)`.
//!
//! The identity classifier is shared by the hierarchical embedding and the
//! raw intra outputs; logits are stacked `[hier; intra_rgb; intra_ir]`.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic    8 bytes  "MALNCKPT"
//! version  u32
//! count    u32      number of tensors
//! table    count × { name_len u16, name utf-8, rows u32, cols u32 }
//! payload  Σ rows·cols × f64, tensors in table order, row-major
//! ```

use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iffs::{gem_pool, gem_pool_backward, Affine, DEFAULT_GEM_P};
use crate::losses::{ObjectiveGrads, ObjectiveInputs};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MALNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { token_dim: 24, hidden: 32, feature_dim: 16, embed_dim: 16, classes: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let EncoderConfig { token_dim, hidden, feature_dim, embed_dim, classes } = *self;
        if token_dim == 0 || hidden == 0 || feature_dim == 0 || embed_dim == 0 || classes == 0 {
            return Err(Error::Config(format!("encoder sizes must be ≥ 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub p: f64,
}

impl BranchParams {
    fn zeros(d_in: usize, h: usize, d_f: usize, p: f64) -> Self {
        Self { w1: Matrix::zeros(d_in, h), b1: vec![0.0; h], w2: Matrix::zeros(h, d_f), b2: vec![0.0; d_f], p }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub global: BranchParams,
    pub part: BranchParams,
    pub intra: Affine,
    pub cross: Affine,
    pub hier: Affine,
    pub classifier: Affine,
}

fn he_normal(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let s = (2.0 / rows as f64).sqrt();
    Matrix::new(rows, cols, rng.normal_vec(rows * cols).into_iter().map(|v| v * s).collect())
        .expect("finite draws")
}

impl EncoderParams {
    /// All weights and biases zero, GeM exponents at `p`.
    pub fn zeros(cfg: &EncoderConfig, p: f64) -> Self {
        let EncoderConfig { token_dim, hidden, feature_dim: f, embed_dim: e, classes } = *cfg;
        Self {
            global: BranchParams::zeros(token_dim, hidden, f, p),
            part: BranchParams::zeros(token_dim, hidden, f, p),
            intra: Affine::zeros(2 * f, e),
            cross: Affine::zeros(2 * f, e),
            hier: Affine::zeros(4 * f, e),
            classifier: Affine::zeros(e, classes),
        }
    }

    /// He-normal weights, small positive ReLU biases, GeM `p = 3`.
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let EncoderConfig { token_dim, hidden, feature_dim: f, embed_dim: e, classes } = *cfg;
        let branch = |rng: &mut Rng| BranchParams {
            w1: he_normal(rng, token_dim, hidden),
            b1: vec![0.01; hidden],
            w2: he_normal(rng, hidden, f),
            b2: vec![0.01; f],
            p: DEFAULT_GEM_P,
        };
        let global = branch(rng);
        let part = branch(rng);
        let head = |rng: &mut Rng, i: usize, o: usize, scale: f64, b: f64| Affine {
            weight: he_normal(rng, i, o).scale(scale),
            bias: vec![b; o],
        };
        Ok(Self {
            global,
            part,
            intra: head(rng, 2 * f, e, 0.5, 0.0),
            cross: head(rng, 2 * f, e, 0.5, 0.0),
            hier: head(rng, 4 * f, e, 1.0, 0.1),
            classifier: head(rng, e, classes, 1.0, 0.0),
        })
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            token_dim: self.global.w1.rows(),
            hidden: self.global.w1.cols(),
            feature_dim: self.global.w2.cols(),
            embed_dim: self.intra.output_width(),
            classes: self.classifier.output_width(),
        }
    }

    /// Parameter tensors in checkpoint order: `(name, rows, cols, values)`.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let (g, p) = (&self.global, &self.part);
        vec![
            ("global.w1", g.w1.rows(), g.w1.cols(), g.w1.as_slice()),
            ("global.b1", 1, g.b1.len(), &g.b1),
            ("global.w2", g.w2.rows(), g.w2.cols(), g.w2.as_slice()),
            ("global.b2", 1, g.b2.len(), &g.b2),
            ("global.p", 1, 1, std::slice::from_ref(&g.p)),
            ("part.w1", p.w1.rows(), p.w1.cols(), p.w1.as_slice()),
            ("part.b1", 1, p.b1.len(), &p.b1),
            ("part.w2", p.w2.rows(), p.w2.cols(), p.w2.as_slice()),
            ("part.b2", 1, p.b2.len(), &p.b2),
            ("part.p", 1, 1, std::slice::from_ref(&p.p)),
            ("intra.w", self.intra.weight.rows(), self.intra.weight.cols(), self.intra.weight.as_slice()),
            ("intra.b", 1, self.intra.bias.len(), &self.intra.bias),
            ("cross.w", self.cross.weight.rows(), self.cross.weight.cols(), self.cross.weight.as_slice()),
            ("cross.b", 1, self.cross.bias.len(), &self.cross.bias),
            ("hier.w", self.hier.weight.rows(), self.hier.weight.cols(), self.hier.weight.as_slice()),
            ("hier.b", 1, self.hier.bias.len(), &self.hier.bias),
            (
                "classifier.w",
                self.classifier.weight.rows(),
                self.classifier.weight.cols(),
                self.classifier.weight.as_slice(),
            ),
            ("classifier.b", 1, self.classifier.bias.len(), &self.classifier.bias),
        ]
    }

    /// Mutable views in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let (g, p) = (&mut self.global, &mut self.part);
        vec![
            g.w1.as_mut_slice(),
            &mut g.b1,
            g.w2.as_mut_slice(),
            &mut g.b2,
            std::slice::from_mut(&mut g.p),
            p.w1.as_mut_slice(),
            &mut p.b1,
            p.w2.as_mut_slice(),
            &mut p.b2,
            std::slice::from_mut(&mut p.p),
            self.intra.weight.as_mut_slice(),
            &mut self.intra.bias,
            self.cross.weight.as_mut_slice(),
            &mut self.cross.bias,
            self.hier.weight.as_mut_slice(),
            &mut self.hier.bias,
            self.classifier.weight.as_mut_slice(),
            &mut self.classifier.bias,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.3.iter().all(|v| v.is_finite()))
    }

    /// Hash of every parameter bit pattern; used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, _, _, vals) in self.tensors() {
            for v in vals {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.tensors();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, rows, cols, _) in &tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(*rows as u32).to_le_bytes())?;
            w.write_all(&(*cols as u32).to_le_bytes())?;
        }
        for (_, _, _, vals) in &tensors {
            for v in *vals {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a checkpoint. Any disagreement with the expected layout is a
    /// version error.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Version("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Version("tensor name is not utf-8".into()))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            table.push((name, rows, cols));
        }
        // Shapes of the first tensors determine the configuration.
        let shape = |name: &str| {
            table.iter().find(|t| t.0 == name).map(|t| (t.1, t.2)).ok_or_else(|| {
                Error::Version(format!("checkpoint lacks tensor {name}"))
            })
        };
        let (token_dim, hidden) = shape("global.w1")?;
        let (_, feature_dim) = shape("global.w2")?;
        let (_, embed_dim) = shape("intra.w")?;
        let (_, classes) = shape("classifier.w")?;
        let cfg = EncoderConfig { token_dim, hidden, feature_dim, embed_dim, classes };
        let mut params = Self::zeros(&cfg, DEFAULT_GEM_P);
        let expected: Vec<(String, usize, usize)> =
            params.tensors().iter().map(|t| (t.0.to_string(), t.1, t.2)).collect();
        if expected != table {
            return Err(Error::Version("checkpoint tensor table does not match the encoder layout".into()));
        }
        for slot in params.tensors_mut() {
            for v in slot.iter_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if cur.pos != buf.len() {
            return Err(Error::Version(format!("{} trailing bytes after payload", buf.len() - cur.pos)));
        }
        if !params.is_finite() {
            return Err(Error::Contract("checkpoint holds non-finite parameters".into()));
        }
        Ok(params)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Version(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Tokens of `n` samples stacked row-wise, `tokens_per_sample` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub tokens: Matrix,
    pub tokens_per_sample: usize,
}

impl TokenStream {
    pub fn new(tokens: Matrix, tokens_per_sample: usize) -> Result<Self> {
        if tokens_per_sample == 0 || !tokens.rows().is_multiple_of(tokens_per_sample) {
            return Err(Error::Shape(format!(
                "{} token rows do not split into samples of {tokens_per_sample}",
                tokens.rows()
            )));
        }
        Ok(Self { tokens, tokens_per_sample })
    }

    pub fn samples(&self) -> usize {
        self.tokens.rows() / self.tokens_per_sample
    }

    pub fn sample(&self, i: usize) -> Matrix {
        let l = self.tokens_per_sample;
        self.tokens.slice_rows(i * l, (i + 1) * l)
    }
}

/// Identity-aligned RGB/IR pairs: row `i` of every stream is identity
/// `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub labels: Vec<usize>,
    pub rgb_global: TokenStream,
    pub rgb_part: TokenStream,
    pub ir_global: TokenStream,
    pub ir_part: TokenStream,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, token_dim: usize) -> Result<()> {
        for s in [&self.rgb_global, &self.rgb_part, &self.ir_global, &self.ir_part] {
            if s.samples() != self.labels.len() {
                return Err(Error::Shape(format!(
                    "stream holds {} samples for {} labels",
                    s.samples(),
                    self.labels.len()
                )));
            }
            if s.tokens.cols() != token_dim {
                return Err(Error::Shape(format!("token width {} but encoder expects {token_dim}", s.tokens.cols())));
            }
        }
        if self.labels.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BranchCache {
    x: Matrix,
    a1: Matrix,
    h1: Matrix,
    a2: Matrix,
    h2: Matrix,
    per_sample: usize,
}

/// Branch features of a stream plus the activations needed for backprop.
fn branch_forward(bp: &BranchParams, s: &TokenStream) -> Result<(Matrix, BranchCache)> {
    let layer1 = Affine { weight: bp.w1.clone(), bias: bp.b1.clone() };
    let layer2 = Affine { weight: bp.w2.clone(), bias: bp.b2.clone() };
    let a1 = layer1.forward(&s.tokens)?;
    let h1 = a1.map(|v| v.max(0.0));
    let a2 = layer2.forward(&h1)?;
    let h2 = a2.map(|v| v.max(0.0));
    let l = s.tokens_per_sample;
    let n = s.samples();
    let mut pooled = Matrix::zeros(n, bp.w2.cols());
    for i in 0..n {
        let g = gem_pool(&h2.slice_rows(i * l, (i + 1) * l), bp.p)?;
        pooled.row_mut(i).copy_from_slice(&g);
    }
    Ok((pooled, BranchCache { x: s.tokens.clone(), a1, h1, a2, h2, per_sample: l }))
}

fn branch_backward(bp: &BranchParams, c: &BranchCache, d_pooled: &Matrix, grad: &mut BranchParams) -> Result<()> {
    let l = c.per_sample;
    let mut d_a2 = Matrix::zeros(c.h2.rows(), c.h2.cols());
    for i in 0..d_pooled.rows() {
        let (d_tok, d_p) = gem_pool_backward(&c.h2.slice_rows(i * l, (i + 1) * l), bp.p, d_pooled.row(i))?;
        grad.p += d_p;
        for r in 0..l {
            let row = i * l + r;
            for k in 0..d_a2.cols() {
                if c.a2[(row, k)] > 0.0 {
                    d_a2[(row, k)] = d_tok[(r, k)];
                }
            }
        }
    }
    grad.w2.add_assign(&c.h1.t_matmul(&d_a2)?);
    add_col_sums(&mut grad.b2, &d_a2);
    let mut d_a1 = d_a2.matmul_t(&bp.w2)?;
    for (d, a) in d_a1.as_mut_slice().iter_mut().zip(c.a1.as_slice()) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    grad.w1.add_assign(&c.x.t_matmul(&d_a1)?);
    add_col_sums(&mut grad.b1, &d_a1);
    Ok(())
}

fn add_col_sums(acc: &mut [f64], m: &Matrix) {
    for row in m.iter_rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
}

/// Backprop through row normalization `y = x / ‖x‖`:
/// `dx = (dy − y·⟨y, dy⟩) / ‖x‖`. Zero rows pass no gradient.
fn l2_normalize_backward(x: &Matrix, d_y: &Matrix) -> Matrix {
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let norm = crate::tensor::dot(xr, xr).sqrt();
        if norm == 0.0 {
            continue;
        }
        let dy = d_y.row(i);
        let proj = xr.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for ((d, a), b) in d_x.row_mut(i).iter_mut().zip(xr).zip(dy) {
            *d = (b - a * proj) / norm;
        }
    }
    d_x
}

/// Backprop through `y = x·W + b`: accumulates parameter grads and returns
/// `dL/dx`.
fn affine_backward(layer: &Affine, x: &Matrix, d_y: &Matrix, grad: &mut Affine) -> Result<Matrix> {
    grad.weight.add_assign(&x.t_matmul(d_y)?);
    add_col_sums(&mut grad.bias, d_y);
    d_y.matmul_t(&layer.weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// When false the part branch is bypassed and its features are zero.
    pub disable_part: bool,
    /// L2-normalize the intra and cross embeddings.
    pub normalize: bool,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    options: ForwardOptions,
    branches: [Option<BranchCache>; 4],
    intra_in: [Matrix; 2],
    cross_in: [Matrix; 2],
    /// Raw intra/cross head outputs, kept when normalizing.
    head_raw: Option<[Matrix; 4]>,
    intra_raw: [Matrix; 2],
    hier_in: Matrix,
    hier_pre: Matrix,
    hier_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub objective: ObjectiveInputs,
    pub hierarchical: Matrix,
}

/// Runs the encoder on identity-aligned pairs.
pub fn forward(params: &EncoderParams, batch: &PairBatch, opts: ForwardOptions) -> Result<(ForwardOutput, ForwardCache)> {
    let cfg = params.config();
    batch.validate(cfg.token_dim)?;
    let n = batch.len();
    let (g_rgb, c0) = branch_forward(&params.global, &batch.rgb_global)?;
    let (g_ir, c1) = branch_forward(&params.global, &batch.ir_global)?;
    let (p_rgb, p_ir, c2, c3) = if opts.disable_part {
        (Matrix::zeros(n, cfg.feature_dim), Matrix::zeros(n, cfg.feature_dim), None, None)
    } else {
        let (a, ca) = branch_forward(&params.part, &batch.rgb_part)?;
        let (b, cb) = branch_forward(&params.part, &batch.ir_part)?;
        (a, b, Some(ca), Some(cb))
    };
    let intra_in = [g_rgb.hstack(&p_rgb)?, g_ir.hstack(&p_ir)?];
    let cross_in = [g_rgb.hstack(&p_ir)?, g_ir.hstack(&p_rgb)?];
    let hier_in = g_rgb.hstack(&g_ir)?.hstack(&p_rgb)?.hstack(&p_ir)?;
    let raw = [
        params.intra.forward(&intra_in[0])?,
        params.intra.forward(&intra_in[1])?,
        params.cross.forward(&cross_in[0])?,
        params.cross.forward(&cross_in[1])?,
    ];
    let intra_raw = [raw[0].clone(), raw[1].clone()];
    let (heads, head_raw) = if opts.normalize {
        (raw.clone().map(|m| m.l2_normalized_rows()), Some(raw))
    } else {
        (raw, None)
    };
    let hier_pre = params.hier.forward(&hier_in)?;
    let hier_out = hier_pre.map(|v| v.max(0.0));
    let logits = params.classifier.forward(&hier_out.vstack(&intra_raw[0])?.vstack(&intra_raw[1])?)?;
    let objective = ObjectiveInputs {
        labels: batch.labels.clone(),
        logits,
        fused_rgb: heads[0].clone(),
        fused_ir: heads[1].clone(),
        cross_rgb_ir: heads[2].clone(),
        cross_ir_rgb: heads[3].clone(),
        g_rgb,
        p_rgb,
        g_ir,
        p_ir,
    };
    if !objective.logits.is_finite() {
        return Err(Error::Contract("encoder produced non-finite logits".into()));
    }
    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        options: opts,
        branches: [Some(c0), Some(c1), c2, c3],
        intra_in,
        cross_in,
        head_raw,
        intra_raw,
        hier_in,
        hier_pre,
        hier_out: hier_out.clone(),
    };
    Ok((ForwardOutput { objective, hierarchical: hier_out }, cache))
}

/// Exact parameter gradients for upstream gradients `up` of the outputs of
/// the [`forward`] call that produced `cache`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, up: &ObjectiveGrads) -> Result<EncoderParams> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Contract("forward cache is stale: parameters changed since forward".into()));
    }
    let cfg = params.config();
    let f = cfg.feature_dim;
    let mut grad = EncoderParams::zeros(&cfg, 0.0);

    let n = cache.hier_out.rows();
    if up.logits.rows() != 3 * n {
        return Err(Error::Shape(format!("logit gradient has {} rows, expected {}", up.logits.rows(), 3 * n)));
    }
    let cls_in = cache.hier_out.vstack(&cache.intra_raw[0])?.vstack(&cache.intra_raw[1])?;
    let d_cls_in = affine_backward(&params.classifier, &cls_in, &up.logits, &mut grad.classifier)?;
    let mut d_hier_pre = d_cls_in.slice_rows(0, n);
    for (d, a) in d_hier_pre.as_mut_slice().iter_mut().zip(cache.hier_pre.as_slice()) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    let d_hier_in = affine_backward(&params.hier, &cache.hier_in, &d_hier_pre, &mut grad.hier)?;
    let ups = [&up.fused_rgb, &up.fused_ir, &up.cross_rgb_ir, &up.cross_ir_rgb];
    let mut d_heads: Vec<Matrix> = match &cache.head_raw {
        Some(raw) => raw.iter().zip(ups).map(|(x, d)| l2_normalize_backward(x, d)).collect(),
        None => ups.into_iter().cloned().collect(),
    };
    d_heads[0].add_assign(&d_cls_in.slice_rows(n, 2 * n));
    d_heads[1].add_assign(&d_cls_in.slice_rows(2 * n, 3 * n));
    let d_intra_rgb = affine_backward(&params.intra, &cache.intra_in[0], &d_heads[0], &mut grad.intra)?;
    let d_intra_ir = affine_backward(&params.intra, &cache.intra_in[1], &d_heads[1], &mut grad.intra)?;
    let d_cross_ri = affine_backward(&params.cross, &cache.cross_in[0], &d_heads[2], &mut grad.cross)?;
    let d_cross_ir = affine_backward(&params.cross, &cache.cross_in[1], &d_heads[3], &mut grad.cross)?;

    let mut d_g_rgb = up.g_rgb.clone();
    let mut d_g_ir = up.g_ir.clone();
    let mut d_p_rgb = up.p_rgb.clone();
    let mut d_p_ir = up.p_ir.clone();
    d_g_rgb.add_assign(&d_hier_in.slice_cols(0, f));
    d_g_ir.add_assign(&d_hier_in.slice_cols(f, 2 * f));
    d_p_rgb.add_assign(&d_hier_in.slice_cols(2 * f, 3 * f));
    d_p_ir.add_assign(&d_hier_in.slice_cols(3 * f, 4 * f));
    d_g_rgb.add_assign(&d_intra_rgb.slice_cols(0, f));
    d_p_rgb.add_assign(&d_intra_rgb.slice_cols(f, 2 * f));
    d_g_ir.add_assign(&d_intra_ir.slice_cols(0, f));
    d_p_ir.add_assign(&d_intra_ir.slice_cols(f, 2 * f));
    d_g_rgb.add_assign(&d_cross_ri.slice_cols(0, f));
    d_p_ir.add_assign(&d_cross_ri.slice_cols(f, 2 * f));
    d_g_ir.add_assign(&d_cross_ir.slice_cols(0, f));
    d_p_rgb.add_assign(&d_cross_ir.slice_cols(f, 2 * f));

    let [c0, c1, c2, c3] = &cache.branches;
    let missing = || Error::Contract("forward cache lacks a branch".into());
    branch_backward(&params.global, c0.as_ref().ok_or_else(missing)?, &d_g_rgb, &mut grad.global)?;
    branch_backward(&params.global, c1.as_ref().ok_or_else(missing)?, &d_g_ir, &mut grad.global)?;
    if !cache.options.disable_part {
        branch_backward(&params.part, c2.as_ref().ok_or_else(missing)?, &d_p_rgb, &mut grad.part)?;
        branch_backward(&params.part, c3.as_ref().ok_or_else(missing)?, &d_p_ir, &mut grad.part)?;
    }
    Ok(grad)
}

/// Retrieval embeddings of single-modality samples: the intra head on
/// `[g | p]`.
pub fn embed(params: &EncoderParams, global: &TokenStream, part: &TokenStream, opts: ForwardOptions) -> Result<Matrix> {
    let (g, _) = branch_forward(&params.global, global)?;
    let p = if opts.disable_part {
        Matrix::zeros(g.rows(), g.cols())
    } else {
        let (p, _) = branch_forward(&params.part, part)?;
        if p.rows() != g.rows() {
            return Err(Error::Shape(format!("{} global samples but {} part samples", g.rows(), p.rows())));
        }
        p
    };
    let e = params.intra.forward(&g.hstack(&p)?)?;
    Ok(if opts.normalize { e.l2_normalized_rows() } else { e })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: EncoderParams,
    pub epoch: usize,
    pub config: SgdConfig,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, config: SgdConfig) -> Self {
        Self { velocity: EncoderParams::zeros(&params.config(), 0.0), epoch: 0, config }
    }
}

/// `v ← μ·v + g + wd·θ; θ ← θ − lr·v`, then GeM exponents are clamped to
/// `p ≥ 1`.
pub fn sgd_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.config() != grads.config() || params.config() != state.velocity.config() {
        return Err(Error::Shape("optimizer buffers do not match the parameters".into()));
    }
    let SgdConfig { momentum, weight_decay } = state.config;
    let g_all = grads.tensors();
    for ((theta, v), (_, _, _, g)) in params.tensors_mut().into_iter().zip(state.velocity.tensors_mut()).zip(g_all) {
        for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi + weight_decay * *t;
            *t -= lr * *vi;
        }
    }
    params.global.p = params.global.p.max(1.0);
    params.part.p = params.part.p.max(1.0);
    if !params.is_finite() {
        return Err(Error::Contract("parameters became non-finite".into()));
    }
    Ok(())
}

/// Piecewise learning-rate schedule over fractions of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagedLr {
    pub start: f64,
    pub peak: f64,
    pub mid: f64,
    pub end: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
}

impl Default for StagedLr {
    fn default() -> Self {
        Self { start: 0.01, peak: 0.1, mid: 0.01, end: 0.001, warmup_frac: 0.125, hold_frac: 0.5, decay_frac: 0.75 }
    }
}

impl StagedLr {
    pub fn validate(&self) -> Result<()> {
        let levels = [self.start, self.peak, self.mid, self.end];
        if levels.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive: {levels:?}")));
        }
        if !(0.0 <= self.warmup_frac && self.warmup_frac <= self.hold_frac && self.hold_frac <= self.decay_frac && self.decay_frac <= 1.0) {
            return Err(Error::Config("schedule fractions must satisfy 0 ≤ warmup ≤ hold ≤ decay ≤ 1".into()));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        if epoch >= total_epochs {
            return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{total_epochs}")));
        }
        let t = epoch as f64 / total_epochs as f64;
        Ok(if t < self.warmup_frac {
            self.start + (self.peak - self.start) * t / self.warmup_frac
        } else if t < self.hold_frac {
            self.peak
        } else if t < self.decay_frac {
            self.mid
        } else {
            self.end
        })
    }
}

/// Default staged schedule: 0.01 → 0.1 warmup, hold, then 0.01 and 0.001.
pub fn staged_lr(epoch: usize, total_epochs: usize) -> Result<f64> {
    StagedLr::default().at(epoch, total_epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amk_mmd::KernelParams;
    use crate::losses::{total_objective, AlignmentKernels, LossWeights};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { token_dim: 5, hidden: 4, feature_dim: 3, embed_dim: 3, classes: 3 }
    }

    fn stream(rng: &mut Rng, n: usize, l: usize, d: usize) -> TokenStream {
        TokenStream::new(Matrix::new(n * l, d, rng.normal_vec(n * l * d)).unwrap(), l).unwrap()
    }

    fn batch(rng: &mut Rng, labels: Vec<usize>, d: usize) -> PairBatch {
        let n = labels.len();
        PairBatch {
            labels,
            rgb_global: stream(rng, n, 3, d),
            rgb_part: stream(rng, n, 2, d),
            ir_global: stream(rng, n, 3, d),
            ir_part: stream(rng, n, 2, d),
        }
    }

    /// Straight-line re-implementation, one sample at a time.
    fn reference_embedding(bp: &BranchParams, tokens: &Matrix) -> Vec<f64> {
        let (l, d_f) = (tokens.rows(), bp.w2.cols());
        let mut acc = vec![0.0; d_f];
        for r in 0..l {
            let mut h = vec![0.0; bp.w1.cols()];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = bp.b1[j];
                for i in 0..tokens.cols() {
                    s += tokens[(r, i)] * bp.w1[(i, j)];
                }
                *hj = s.max(0.0);
            }
            for (k, a) in acc.iter_mut().enumerate() {
                let mut s = bp.b2[k];
                for (j, hj) in h.iter().enumerate() {
                    s += hj * bp.w2[(j, k)];
                }
                *a += s.max(0.0).max(1e-6).powf(bp.p);
            }
        }
        acc.iter().map(|a| (a / l as f64).powf(1.0 / bp.p)).collect()
    }

    fn affine_ref(a: &Affine, x: &[f64]) -> Vec<f64> {
        (0..a.output_width())
            .map(|o| a.bias[o] + x.iter().enumerate().map(|(i, v)| v * a.weight[(i, o)]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_duplicate_path() {
        let mut rng = Rng::new(41);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 1, 2, 0], 5);
        let (out, _) = forward(&params, &b, ForwardOptions::default()).unwrap();
        for i in 0..4 {
            let g_rgb = reference_embedding(&params.global, &b.rgb_global.sample(i));
            let g_ir = reference_embedding(&params.global, &b.ir_global.sample(i));
            let p_rgb = reference_embedding(&params.part, &b.rgb_part.sample(i));
            let p_ir = reference_embedding(&params.part, &b.ir_part.sample(i));
            let cat = |parts: &[&Vec<f64>]| parts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>();
            let intra_rgb = affine_ref(&params.intra, &cat(&[&g_rgb, &p_rgb]));
            let cross_ir_rgb = affine_ref(&params.cross, &cat(&[&g_ir, &p_rgb]));
            let hier: Vec<f64> = affine_ref(&params.hier, &cat(&[&g_rgb, &g_ir, &p_rgb, &p_ir]))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let logits = affine_ref(&params.classifier, &hier);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
            assert!(close(out.objective.g_ir.row(i), &g_ir));
            assert!(close(out.objective.fused_rgb.row(i), &intra_rgb));
            assert!(close(out.objective.cross_ir_rgb.row(i), &cross_ir_rgb));
            assert!(close(out.objective.logits.row(i), &logits));
            assert!(close(out.objective.logits.row(4 + i), &affine_ref(&params.classifier, &intra_rgb)));
        }
    }

    #[test]
    fn zero_parameters_give_uniform_logits() {
        let cfg = EncoderConfig { classes: 5, ..tiny_cfg() };
        let params = EncoderParams::zeros(&cfg, 3.0);
        let mut rng = Rng::new(3);
        let b = batch(&mut rng, vec![0, 1, 2, 3], 5);
        let (out, _) = forward(&params, &b, ForwardOptions::default()).unwrap();
        assert!(out.objective.g_rgb.as_slice().iter().all(|&v| (v - 1e-6).abs() < 1e-18));
        let labels: Vec<usize> = b.labels.iter().copied().cycle().take(12).collect();
        let (l, _) = crate::losses::id_loss(&out.objective.logits, &labels).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_token_gem_is_identity() {
        let mut rng = Rng::new(5);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let s = stream(&mut rng, 3, 1, 5);
        let (pooled, cache) = branch_forward(&params.global, &s).unwrap();
        let expect = cache.h2.map(|v| v.max(1e-6));
        assert!(pooled.max_abs_diff(&expect) < 1e-12);
    }

    fn fd_check(params: &EncoderParams, b: &PairBatch, opts: ForwardOptions, weights: &LossWeights) -> f64 {
        let kernels = AlignmentKernels::shared(KernelParams::uniform(vec![0.5, 1.0, 2.0]).unwrap());
        let loss = |p: &EncoderParams| {
            let (out, _) = forward(p, b, opts).unwrap();
            total_objective(&out.objective, weights, &kernels).unwrap().total
        };
        let (out, cache) = forward(params, b, opts).unwrap();
        let report = total_objective(&out.objective, weights, &kernels).unwrap();
        let grad = backward(params, &cache, &report.grads).unwrap();
        let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.3.to_vec()).collect();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for (k, a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            set_flat(&mut plus, k, h);
            set_flat(&mut minus, k, -h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        worst
    }

    fn set_flat(p: &mut EncoderParams, mut k: usize, delta: f64) {
        for slot in p.tensors_mut() {
            if k < slot.len() {
                slot[k] += delta;
                return;
            }
            k -= slot.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 0, 1, 1, 2, 2], 5);
        let worst = fd_check(&params, &b, ForwardOptions::default(), &LossWeights::default());
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn backward_without_part_branch() {
        let mut rng = Rng::new(78);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 0, 1, 1, 2, 2], 5);
        let w = LossWeights { w_intra: 0.0, ..LossWeights::default() };
        let opts = ForwardOptions { disable_part: true, normalize: false };
        assert!(fd_check(&params, &b, opts, &w) <= 1e-4);
        let kernels = AlignmentKernels::shared(KernelParams::uniform(vec![1.0]).unwrap());
        let (out, cache) = forward(&params, &b, opts).unwrap();
        let r = total_objective(&out.objective, &w, &kernels).unwrap();
        let g = backward(&params, &cache, &r.grads).unwrap();
        assert!(g.part.w1.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_with_normalized_embeddings() {
        let mut rng = Rng::new(79);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 0, 1, 1, 2, 2], 5);
        let opts = ForwardOptions { disable_part: false, normalize: true };
        let (out, _) = forward(&params, &b, opts).unwrap();
        for r in out.objective.cross_rgb_ir.iter_rows() {
            assert_abs_diff_eq!(crate::tensor::dot(r, r), 1.0, epsilon = 1e-12);
        }
        let worst = fd_check(&params, &b, opts, &LossWeights::default());
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 1, 2], 5);
        let (out, cache) = forward(&params, &b, ForwardOptions::default()).unwrap();
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let o = &out.objective;
        let up = ObjectiveGrads {
            logits: z(&o.logits),
            g_rgb: z(&o.g_rgb),
            p_rgb: z(&o.p_rgb),
            g_ir: z(&o.g_ir),
            p_ir: z(&o.p_ir),
            fused_rgb: z(&o.fused_rgb),
            fused_ir: z(&o.fused_ir),
            cross_rgb_ir: z(&o.cross_rgb_ir),
            cross_ir_rgb: z(&o.cross_ir_rgb),
            kernel_logits: vec![],
        };
        let g = backward(&params, &cache, &up).unwrap();
        assert!(g.tensors().iter().all(|t| t.3.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dead_relu_unit_has_zero_incoming_gradient() {
        let mut rng = Rng::new(9);
        let mut params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        // hidden unit 2 of the global branch: pre-activation −100 for any
        // token of moderate size
        for i in 0..5 {
            params.global.w1[(i, 2)] = 0.0;
        }
        params.global.b1[2] = -100.0;
        let b = batch(&mut rng, vec![0, 0, 1, 1], 5);
        let kernels = AlignmentKernels::shared(KernelParams::uniform(vec![1.0, 2.0]).unwrap());
        let (out, cache) = forward(&params, &b, ForwardOptions::default()).unwrap();
        let r = total_objective(&out.objective, &LossWeights::default(), &kernels).unwrap();
        let g = backward(&params, &cache, &r.grads).unwrap();
        assert!((0..5).all(|i| g.global.w1[(i, 2)] == 0.0));
        assert_eq!(g.global.b1[2], 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(10);
        let mut params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 0, 1, 1], 5);
        let kernels = AlignmentKernels::shared(KernelParams::uniform(vec![1.0]).unwrap());
        let (out, cache) = forward(&params, &b, ForwardOptions::default()).unwrap();
        let r = total_objective(&out.objective, &LossWeights::default(), &kernels).unwrap();
        params.classifier.bias[0] += 1e-3;
        assert!(matches!(backward(&params, &cache, &r.grads), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_rejects_wrong_token_width() {
        let mut rng = Rng::new(11);
        let params = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, vec![0, 1], 4);
        assert!(matches!(forward(&params, &b, ForwardOptions::default()), Err(Error::Shape(_))));
    }

    fn scalar_state(w: f64, wd: f64) -> (EncoderParams, OptimizerState) {
        let cfg = EncoderConfig { token_dim: 1, hidden: 1, feature_dim: 1, embed_dim: 1, classes: 1 };
        let mut p = EncoderParams::zeros(&cfg, 1.0);
        p.classifier.weight[(0, 0)] = w;
        let st = OptimizerState::new(&p, SgdConfig { momentum: 0.9, weight_decay: wd });
        (p, st)
    }

    #[test]
    fn sgd_scalar_examples() {
        let (mut p, mut st) = scalar_state(1.0, 0.0);
        let mut g = EncoderParams::zeros(&p.config(), 0.0);
        g.classifier.weight[(0, 0)] = 1.0;
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_abs_diff_eq!(st.velocity.classifier.weight[(0, 0)], 1.0);
        assert_abs_diff_eq!(p.classifier.weight[(0, 0)], 0.9, epsilon = 1e-15);
        g.classifier.weight[(0, 0)] = 0.25;
        let (mut p, mut st) = scalar_state(1.0, 0.0);
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_abs_diff_eq!(st.velocity.classifier.weight[(0, 0)], 1.9 * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn sgd_fixed_point() {
        let mut rng = Rng::new(12);
        let mut p = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let before = p.clone();
        let g = EncoderParams::zeros(&p.config(), 0.0);
        let mut st = OptimizerState::new(&p, SgdConfig { momentum: 0.9, weight_decay: 0.0 });
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn staged_lr_levels() {
        assert_eq!(staged_lr(0, 20).unwrap(), 0.01);
        assert_abs_diff_eq!(staged_lr(1, 8).unwrap(), 0.1, epsilon = 1e-15);
        assert_eq!(staged_lr(19, 20).unwrap(), 0.001);
        assert_eq!(staged_lr(12, 20).unwrap(), 0.01);
        assert!(matches!(staged_lr(20, 20), Err(Error::InvalidArgument(_))));
        let lrs: Vec<f64> = (0..80).map(|e| staged_lr(e, 80).unwrap()).collect();
        let peak = lrs.iter().position(|&v| v == 0.1).unwrap();
        assert!(lrs[peak..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[..peak].windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(13);
        let p = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(EncoderParams::from_checkpoint_bytes(&bytes).unwrap(), p);
        let tail = 8 * p.num_scalars();
        assert_eq!(&bytes[bytes.len() - tail..bytes.len() - tail + 8], &p.global.w1[(0, 0)].to_le_bytes());
    }

    #[test]
    fn checkpoint_rejects_other_versions_and_truncation() {
        let mut rng = Rng::new(14);
        let p = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let mut bytes = p.to_checkpoint_bytes();
        assert!(matches!(EncoderParams::from_checkpoint_bytes(&bytes[..bytes.len() - 3]), Err(Error::Version(_))));
        bytes[8] = 9;
        assert!(matches!(EncoderParams::from_checkpoint_bytes(&bytes), Err(Error::Version(_))));
        assert!(matches!(EncoderParams::from_checkpoint_bytes(b"P5 nope"), Err(Error::Version(_))));
    }
}
