//! Synthetic paired RGB/IR identities.
//!
//! Vector mode: identity `i` has latent `z_i`. Token `t` of a view observes a
//! height window of the latent (dimension `j` sits at height
//! `u_j = (j + ½)/k`), rendered through a modality map:
//!
//! ```text
//! x_t = gain · ((w_t ⊙ z̃) · A_m + b_m) + σ·ε
//! z̃_j = z_ij + pose · u_j² · η_j        (per sample, shared by both views)
//! A_ir = A_rgb + gap·Δ,  b_ir = b_rgb + gap·δ
//! ```
//!
//! The global view tiles the full height with `L` windows and each token
//! is replaced by clutter with probability `occlusion`. The part view tiles
//! the top `ubp` of the body with `L` narrower windows at a finer
//! resolution, which lowers its noise to `σ·sqrt(ubp)`. Brightness gain
//! applies to RGB only.
//!
//! Image mode renders silhouettes and derives tokens from phase-congruency
//! attention over horizontal bands.

use crate::amk_mmd::{mmd2_unbiased, KernelParams};
use crate::encoder::TokenStream;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::harness::config::{DataConfig, DataMode, ExperimentConfig};
use crate::image::{crop_upper_body, GrayImage};
use crate::pesam::{
    apply_attention, build_log_gabor_bank, edge_attention, phase_congruency_with, AttentionParams, LogGaborBank,
    LogGaborConfig, PcParams,
};
use crate::rng::Rng;
use crate::tensor::{Matrix, Modality};

/// RNG substreams derived from the experiment seed.
pub(crate) mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLER: u64 = 3;
}

/// Hidden generative parameters of a vector-mode dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// One latent row per identity, training identities first.
    pub latents: Matrix,
    pub a_rgb: Matrix,
    pub a_ir: Matrix,
    pub b_rgb: Vec<f64>,
    pub b_ir: Vec<f64>,
}

impl SyntheticSpec {
    pub fn map(&self, m: Modality) -> (&Matrix, &[f64]) {
        match m {
            Modality::Rgb => (&self.a_rgb, &self.b_rgb),
            Modality::Ir => (&self.a_ir, &self.b_ir),
        }
    }

    /// Frobenius norm of `A_ir − A_rgb`.
    pub fn map_separation(&self) -> f64 {
        self.a_ir.as_slice().iter().zip(self.a_rgb.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Samples of one modality: row `s` of each stream belongs to `labels[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySamples {
    pub global: TokenStream,
    pub part: TokenStream,
    pub labels: Vec<usize>,
}

impl ModalitySamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the samples of each identity, in label order.
    pub fn by_identity(&self) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut out = std::collections::BTreeMap::new();
        for (s, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_insert_with(Vec::new).push(s);
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> ModalitySamples {
        ModalitySamples {
            global: gather(&self.global, idx),
            part: gather(&self.part, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn gather(s: &TokenStream, idx: &[usize]) -> TokenStream {
    let l = s.tokens_per_sample;
    let mut data = Vec::with_capacity(idx.len() * l * s.tokens.cols());
    for &i in idx {
        for r in i * l..(i + 1) * l {
            data.extend_from_slice(s.tokens.row(r));
        }
    }
    TokenStream { tokens: Matrix::new(idx.len() * l, s.tokens.cols(), data).expect("finite tokens"), tokens_per_sample: l }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub rgb: ModalitySamples,
    pub ir: ModalitySamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// Present in vector mode.
    pub spec: Option<SyntheticSpec>,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.mode {
        DataMode::Vector => gen_vector_dataset(cfg),
        DataMode::Image => gen_image_dataset(cfg),
    }
}

fn draw_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, rng.normal_vec(rows * cols).into_iter().map(|v| v * scale).collect())
        .expect("finite draws")
}

pub fn gen_spec(d: &DataConfig, rng: &mut Rng) -> SyntheticSpec {
    let (k, dim) = (d.latent_dim, d.token_dim);
    let ids = d.identities + d.test_identities;
    let latents = draw_matrix(rng, ids, k, 1.0);
    let a_rgb = draw_matrix(rng, k, dim, 1.0 / (k as f64).sqrt());
    let delta = draw_matrix(rng, k, dim, 1.0 / (k as f64).sqrt());
    let mut a_ir = a_rgb.clone();
    a_ir.add_scaled(&delta, d.gap);
    let b_rgb: Vec<f64> = rng.normal_vec(dim).into_iter().map(|v| 0.5 * v).collect();
    let b_ir: Vec<f64> = b_rgb.iter().zip(rng.normal_vec(dim)).map(|(b, e)| b + d.gap * e).collect();
    SyntheticSpec { latents, a_rgb, a_ir, b_rgb, b_ir }
}

/// Gaussian height window of width `span / L` centered on token `t`.
fn window(k: usize, tokens: usize, t: usize, span: f64) -> Vec<f64> {
    let c = span * (t as f64 + 0.5) / tokens as f64;
    let sd = 0.5 * span / tokens as f64;
    (0..k)
        .map(|j| {
            let u = (j as f64 + 0.5) / k as f64;
            (-(u - c).powi(2) / (2.0 * sd * sd)).exp()
        })
        .collect()
}

fn render_tokens(
    rng: &mut Rng,
    latent: &[f64],
    (a, b): (&Matrix, &[f64]),
    windows: &[Vec<f64>],
    gain: f64,
    noise: f64,
    occlusion: f64,
    out: &mut Vec<f64>,
) {
    let dim = a.cols();
    for w in windows {
        let masked: Vec<f64> = latent.iter().zip(w).map(|(z, w)| z * w).collect();
        if occlusion > 0.0 && rng.uniform() < occlusion {
            out.extend(rng.normal_vec(dim));
            continue;
        }
        let eps = rng.normal_vec(dim);
        for c in 0..dim {
            let clean: f64 = masked.iter().enumerate().map(|(j, m)| m * a[(j, c)]).sum::<f64>() + b[c];
            out.push(gain * clean + noise * eps[c]);
        }
    }
}

fn vector_split(
    d: &DataConfig,
    spec: &SyntheticSpec,
    rng: &mut Rng,
    identities: std::ops::Range<usize>,
) -> Split {
    let k = d.latent_dim;
    let l = d.tokens;
    let global_w: Vec<Vec<f64>> = (0..l).map(|t| window(k, l, t, 1.0)).collect();
    let part_w: Vec<Vec<f64>> = (0..l).map(|t| window(k, l, t, d.ubp)).collect();
    let part_noise = d.noise * d.ubp.sqrt();
    let mut build = |m: Modality| {
        let (mut g, mut p, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for id in identities.clone() {
            let z = spec.latents.row(id);
            for _ in 0..d.samples_per_identity {
                let zt: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let u = (j as f64 + 0.5) / k as f64;
                        v + d.pose * u * u * rng.normal()
                    })
                    .collect();
                let gain = match m {
                    Modality::Rgb => 0.8 + 0.4 * rng.uniform(),
                    Modality::Ir => 1.0,
                };
                render_tokens(rng, &zt, spec.map(m), &global_w, gain, d.noise, d.occlusion, &mut g);
                render_tokens(rng, &zt, spec.map(m), &part_w, gain, part_noise, 0.0, &mut p);
                labels.push(id);
            }
        }
        let n = labels.len();
        ModalitySamples {
            global: TokenStream { tokens: Matrix::new(n * l, d.token_dim, g).expect("finite"), tokens_per_sample: l },
            part: TokenStream { tokens: Matrix::new(n * l, d.token_dim, p).expect("finite"), tokens_per_sample: l },
            labels,
        }
    };
    let rgb = build(Modality::Rgb);
    let ir = build(Modality::Ir);
    Split { rgb, ir }
}

pub fn gen_vector_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut rng = Rng::stream(cfg.seed, streams::DATA);
    let spec = gen_spec(d, &mut rng);
    let train = vector_split(d, &spec, &mut rng, 0..d.identities);
    let test = vector_split(d, &spec, &mut rng, d.identities..d.identities + d.test_identities);
    Ok(Dataset { train, test, spec: Some(spec) })
}

/// Mean-pooled sample features of one modality, for distribution checks.
pub fn pooled_features(s: &ModalitySamples) -> Matrix {
    let l = s.global.tokens_per_sample;
    let n = s.len();
    let mut out = Matrix::zeros(n, s.global.tokens.cols());
    for i in 0..n {
        for r in i * l..(i + 1) * l {
            let row = s.global.tokens.row(r).to_vec();
            out.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o += v / l as f64);
        }
    }
    out
}

/// MMD² between the pooled RGB and IR training features under the
/// median-heuristic ladder.
pub fn modality_mmd(split: &Split, kernels: usize, gamma: f64) -> Result<f64> {
    let x = pooled_features(&split.rgb);
    let y = pooled_features(&split.ir);
    let params = KernelParams::adaptive(&x, &y, kernels, gamma, None)?;
    mmd2_unbiased(&x, &y, &params)
}

/// Per-identity silhouette geometry and per-sample nuisance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Silhouette {
    pub head_r: f64,
    pub head_y: f64,
    pub torso_w: f64,
    pub torso_h: f64,
    pub leg_gap: f64,
    pub shirt: f64,
    pub pants: f64,
    pub skin: f64,
    pub background: f64,
}

impl Silhouette {
    pub fn random(rng: &mut Rng) -> Self {
        Self {
            head_r: 0.07 + 0.03 * rng.uniform(),
            head_y: 0.1 + 0.03 * rng.uniform(),
            torso_w: 0.25 + 0.15 * rng.uniform(),
            torso_h: 0.3 + 0.1 * rng.uniform(),
            leg_gap: 0.05 + 0.1 * rng.uniform(),
            shirt: 0.15 + 0.5 * rng.uniform(),
            pants: 0.15 + 0.5 * rng.uniform(),
            skin: 0.5 + 0.2 * rng.uniform(),
            background: 0.05 + 0.1 * rng.uniform(),
        }
    }

    /// Intensity in `[0, 0.7]` at normalized coordinates (`v` down, `u`
    /// across), with horizontal shift `dx`.
    fn intensity(&self, v: f64, u: f64, dx: f64) -> f64 {
        let x = u - 0.5 - dx;
        let head = (x / self.head_r).powi(2) + ((v - self.head_y) / (self.head_r * 1.2)).powi(2) <= 1.0;
        let torso_top = self.head_y + self.head_r * 1.2;
        let torso_c = torso_top + self.torso_h / 2.0;
        let torso = (x / (self.torso_w / 2.0)).powi(2) + ((v - torso_c) / (self.torso_h / 2.0)).powi(2) <= 1.0;
        let legs_top = torso_top + self.torso_h * 0.85;
        let leg = v >= legs_top && v <= 0.97 && x.abs() >= self.leg_gap / 2.0 && x.abs() <= self.leg_gap / 2.0 + 0.09;
        if head {
            self.skin
        } else if torso {
            self.shirt
        } else if leg {
            self.pants
        } else {
            self.background
        }
    }

    /// RGB rendering with multiplicative brightness `gain`.
    pub fn render_rgb(&self, h: usize, w: usize, dx: f64, gain: f64) -> GrayImage {
        GrayImage::from_fn(h, w, |y, x| {
            gain * self.intensity((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64, dx)
        })
    }

    /// IR rendering: inverted intensities smoothed by a 3×3 box.
    pub fn render_ir(&self, h: usize, w: usize, dx: f64) -> GrayImage {
        let base = self.render_rgb(h, w, dx, 1.0);
        GrayImage::from_fn(h, w, |y, x| {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dxp in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dxp).clamp(0, w as i64 - 1) as usize;
                    acc += 1.0 - base.get(yy, xx);
                }
            }
            0.8 * acc / 9.0
        })
    }
}

/// Band tokens of an image: `L` horizontal bands, each summarized by the
/// attended intensity and the phase congruency over `token_dim / 2` column
/// groups.
pub fn image_tokens(img: &GrayImage, bank: &LogGaborBank, tokens: usize, token_dim: usize) -> Result<Vec<f64>> {
    let pc = phase_congruency_with(img, bank, &PcParams::default(), Exec::Sequential)?;
    let att = edge_attention(&pc, &AttentionParams::box_filter(3, 4.0, -2.0)?);
    let attended = apply_attention(img.pixels(), &att)?;
    let (h, w) = (img.height(), img.width());
    let groups = (token_dim / 2).max(1);
    let mut out = Vec::with_capacity(tokens * token_dim);
    for t in 0..tokens {
        let (y0, y1) = (t * h / tokens, ((t + 1) * h / tokens).max(t * h / tokens + 1));
        let mut feats = vec![0.0; token_dim];
        for g in 0..groups {
            let (x0, x1) = (g * w / groups, ((g + 1) * w / groups).max(g * w / groups + 1));
            let (mut a, mut p, mut n) = (0.0, 0.0, 0.0);
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    a += attended[(y, x)];
                    p += pc.get(y, x);
                    n += 1.0;
                }
            }
            feats[g] = a / n;
            if groups + g < token_dim {
                feats[groups + g] = p / n;
            }
        }
        out.extend(feats);
    }
    Ok(out)
}

struct ImageSample {
    id: usize,
    dx: f64,
    gain: f64,
    seed: u64,
}

fn image_split(
    cfg: &ExperimentConfig,
    looks: &[Silhouette],
    rng: &mut Rng,
    identities: std::ops::Range<usize>,
    banks: (&LogGaborBank, &LogGaborBank),
) -> Result<Split> {
    let d = &cfg.data;
    let (h, w) = (d.image_height, d.image_width);
    let mut plan = Vec::new();
    for id in identities {
        for _ in 0..d.samples_per_identity {
            plan.push(ImageSample { id, dx: 0.06 * (rng.uniform() - 0.5), gain: 0.7 + 0.6 * rng.uniform(), seed: rng.below(u32::MAX as usize) as u64 });
        }
    }
    let build = |m: Modality| -> Result<ModalitySamples> {
        let rows = Exec::default().map(plan.len(), |i| -> Result<(Vec<f64>, Vec<f64>)> {
            let s = &plan[i];
            let look = &looks[s.id];
            let clean = match m {
                Modality::Rgb => look.render_rgb(h, w, s.dx, s.gain),
                Modality::Ir => look.render_ir(h, w, s.dx),
            };
            let mut noise = Rng::stream(s.seed, m as u64);
            let sigma = 0.02 * d.noise;
            let (h, w) = clean.pixels().shape();
            let noisy: Vec<f64> = clean.pixels().as_slice().iter().map(|v| v + sigma * noise.normal()).collect();
            let img = GrayImage::from_clamped(Matrix::new(h, w, noisy)?);
            let part = crop_upper_body(&img, d.ubp)?;
            Ok((image_tokens(&img, banks.0, d.tokens, d.token_dim)?, image_tokens(&part, banks.1, d.tokens, d.token_dim)?))
        });
        let (mut g, mut p) = (Vec::new(), Vec::new());
        for r in rows {
            let (a, b) = r?;
            g.extend(a);
            p.extend(b);
        }
        let n = plan.len();
        let l = d.tokens;
        Ok(ModalitySamples {
            global: TokenStream { tokens: Matrix::new(n * l, d.token_dim, g)?, tokens_per_sample: l },
            part: TokenStream { tokens: Matrix::new(n * l, d.token_dim, p)?, tokens_per_sample: l },
            labels: plan.iter().map(|s| s.id).collect(),
        })
    };
    Ok(Split { rgb: build(Modality::Rgb)?, ir: build(Modality::Ir)? })
}

pub fn gen_image_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    if d.image_height < 32 || d.image_width < 32 {
        return Err(Error::Config("image side must be ≥ 32".into()));
    }
    let mut rng = Rng::stream(cfg.seed, streams::DATA);
    let looks: Vec<Silhouette> = (0..d.identities + d.test_identities).map(|_| Silhouette::random(&mut rng)).collect();
    let part_h = ((d.ubp * d.image_height as f64).floor() as usize).max(1);
    let lg = LogGaborConfig::default();
    let full = build_log_gabor_bank(d.image_height, d.image_width, &lg)?;
    let part = build_log_gabor_bank(part_h, d.image_width, &lg)
        .map_err(|e| Error::Config(format!("upper-body crop too small for filtering: {e}")))?;
    let train = image_split(cfg, &looks, &mut rng, 0..d.identities, (&full, &part))?;
    let test = image_split(cfg, &looks, &mut rng, d.identities..d.identities + d.test_identities, (&full, &part))?;
    Ok(Dataset { train, test, spec: None })
}

/// Renders one RGB and one IR example image per identity (for `gen`).
pub fn example_images(cfg: &ExperimentConfig) -> Result<Vec<(usize, GrayImage, GrayImage)>> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut rng = Rng::stream(cfg.seed, streams::DATA);
    let looks: Vec<Silhouette> = (0..d.identities + d.test_identities).map(|_| Silhouette::random(&mut rng)).collect();
    Ok(looks
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.render_rgb(d.image_height, d.image_width, 0.0, 1.0), s.render_ir(d.image_height, d.image_width, 0.0)))
        .collect())
}
