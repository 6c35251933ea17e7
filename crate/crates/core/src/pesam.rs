//! Phase-enhanced structural attention.
//!
//! A log-Gabor bank analyses the image at `S` scales and `O` orientations.
//! For each orientation the complex responses `e_s + i·o_s` give amplitudes
//! `A_s` and local energies `E_s` (projection of each response onto the unit
//! mean-phase vector across that orientation's scales). Phase congruency is
//!
//! ```text
//! PC = Σ_o Σ_s ⌊E_so − T⌋₊ / (Σ_o Σ_s A_so + ε)
//! ```
//!
//! clamped to `[0, 1]`. Numerator and denominator are accumulated over
//! orientations before the division, so orientations carrying little energy
//! contribute little instead of an ε-dominated ratio. The image is
//! symmetrically extended to twice its size before filtering so the periodic
//! DFT does not create edges at the borders.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::amk_mmd::weights_from_logits;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{GrayImage, MIN_FILTER_SIDE};
use crate::tensor::Matrix;

/// Geometry of a log-Gabor bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogGaborConfig {
    pub scales: usize,
    pub orientations: usize,
    /// Wavelength of the finest scale, in pixels.
    pub min_wavelength: f64,
    /// Ratio between successive wavelengths.
    pub mult: f64,
    /// Radial bandwidth as the ratio `σ/f₀` on the log-frequency axis.
    pub sigma_onf: f64,
    /// Angular spread in radians; `None` picks the half-maximum overlap of
    /// adjacent orientations.
    pub sigma_theta: Option<f64>,
}

impl Default for LogGaborConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            orientations: 6,
            min_wavelength: 3.0,
            mult: 2.1,
            sigma_onf: 0.55,
            sigma_theta: None,
        }
    }
}

impl LogGaborConfig {
    /// Angular spread at which neighbouring orientations cross at half maximum.
    pub fn half_max_sigma_theta(orientations: usize) -> f64 {
        (PI / orientations as f64 / 2.0) / (2.0 * 2f64.ln()).sqrt()
    }

    pub fn effective_sigma_theta(&self) -> f64 {
        self.sigma_theta.unwrap_or_else(|| Self::half_max_sigma_theta(self.orientations))
    }
}

/// Frequency-domain log-Gabor transfer functions on the padded grid.
#[derive(Debug, Clone)]
pub struct LogGaborBank {
    height: usize,
    width: usize,
    config: LogGaborConfig,
    center_freqs: Vec<f64>,
    /// Indexed `[o * scales + s]`, each `2H × 2W` row-major.
    filters: Vec<Vec<f64>>,
}

/// Default stabiliser: `1e-4` in 8-bit amplitude units, expressed for
/// intensities in `[0, 1]`.
pub const DEFAULT_EPSILON: f64 = 1e-4 / 255.0;

/// Noise threshold `T` and stabiliser `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcParams {
    pub noise_threshold: f64,
    pub epsilon: f64,
}

impl Default for PcParams {
    fn default() -> Self {
        Self { noise_threshold: 0.0, epsilon: DEFAULT_EPSILON }
    }
}

impl PcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_threshold.is_finite() && self.noise_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise threshold {} must be ≥ 0",
                self.noise_threshold
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// `k × k` edge-attention kernel plus scalar bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub kernel: Matrix,
    pub bias: f64,
}

impl AttentionParams {
    pub fn new(kernel: Matrix, bias: f64) -> Result<Self> {
        let (r, c) = kernel.shape();
        if r != c || r % 2 == 0 {
            return Err(Error::InvalidArgument(format!("attention kernel {r}x{c} must be odd and square")));
        }
        if !kernel.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidArgument("attention parameters must be finite".into()));
        }
        Ok(Self { kernel, bias })
    }

    /// `k × k` box filter scaled by `gain`.
    pub fn box_filter(k: usize, gain: f64, bias: f64) -> Result<Self> {
        Self::new(Matrix::filled(k, k, gain / (k * k) as f64), bias)
    }
}

/// Logits for the `(visible, infrared, phase)` fusion weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionLogits(pub [f64; 3]);

impl FusionLogits {
    pub fn weights(&self) -> [f64; 3] {
        let w = weights_from_logits(&self.0);
        [w[0], w[1], w[2]]
    }
}

impl Default for FusionLogits {
    fn default() -> Self {
        Self([0.0; 3])
    }
}

/// Signed frequency (cycles per sample) of DFT bin `k` on an `n`-point grid.
#[inline]
fn bin_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

#[inline]
fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Radial log-Gabor response at radial frequency `f` for centre `f0`.
pub fn log_gabor_radial(f: f64, f0: f64, sigma_onf: f64) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    let l = (f / f0).ln();
    (-(l * l) / (2.0 * sigma_onf.ln().powi(2))).exp()
}

pub fn build_log_gabor_bank(height: usize, width: usize, config: &LogGaborConfig) -> Result<LogGaborBank> {
    if height < MIN_FILTER_SIDE || width < MIN_FILTER_SIDE {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} smaller than {MIN_FILTER_SIDE}x{MIN_FILTER_SIDE}"
        )));
    }
    if config.scales < 2 || config.orientations < 1 {
        return Err(Error::InvalidArgument("need at least 2 scales and 1 orientation".into()));
    }
    if !(config.min_wavelength >= 2.0) || !(config.mult > 1.0) {
        return Err(Error::InvalidArgument("min wavelength must be ≥ 2 and mult > 1".into()));
    }
    if !(config.sigma_onf > 0.0 && config.sigma_onf < 1.0) {
        return Err(Error::InvalidArgument("sigma_onf must lie in (0, 1)".into()));
    }
    let sigma_theta = config.effective_sigma_theta();
    if !(sigma_theta.is_finite() && sigma_theta > 0.0) {
        return Err(Error::InvalidArgument("sigma_theta must be positive".into()));
    }

    let (ph, pw) = (2 * height, 2 * width);
    let center_freqs: Vec<f64> = (0..config.scales)
        .map(|s| 1.0 / (config.min_wavelength * config.mult.powi(s as i32)))
        .collect();

    let mut radius = vec![0.0; ph * pw];
    let mut theta = vec![0.0; ph * pw];
    for y in 0..ph {
        let fy = bin_freq(y, ph);
        for x in 0..pw {
            let fx = bin_freq(x, pw);
            radius[y * pw + x] = (fx * fx + fy * fy).sqrt();
            // Image rows grow downwards; flip fy so angles are counter-clockwise.
            theta[y * pw + x] = (-fy).atan2(fx);
        }
    }

    let mut filters = Vec::with_capacity(config.scales * config.orientations);
    for o in 0..config.orientations {
        let angle = o as f64 * PI / config.orientations as f64;
        let spread: Vec<f64> = theta
            .iter()
            .map(|&t| {
                let d = wrap_angle(t - angle);
                (-(d * d) / (2.0 * sigma_theta * sigma_theta)).exp()
            })
            .collect();
        for &f0 in &center_freqs {
            let mut h: Vec<f64> = radius
                .iter()
                .zip(&spread)
                .map(|(&r, &a)| log_gabor_radial(r, f0, config.sigma_onf) * a)
                .collect();
            h[0] = 0.0;
            filters.push(h);
        }
    }
    Ok(LogGaborBank { height, width, config: config.clone(), center_freqs, filters })
}

impl LogGaborBank {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scales(&self) -> usize {
        self.config.scales
    }

    pub fn orientations(&self) -> usize {
        self.config.orientations
    }

    pub fn config(&self) -> &LogGaborConfig {
        &self.config
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.center_freqs
    }

    /// Padded grid size `(2H, 2W)` the transfer functions live on.
    pub fn grid(&self) -> (usize, usize) {
        (2 * self.height, 2 * self.width)
    }

    /// Transfer function of `(scale, orientation)` on the padded grid.
    pub fn transfer(&self, scale: usize, orientation: usize) -> &[f64] {
        &self.filters[orientation * self.config.scales + scale]
    }
}

/// Symmetric (half-sample) extension to `2H × 2W`.
fn symmetric_pad(img: &Matrix) -> Vec<Complex<f64>> {
    let (h, w) = img.shape();
    let (ph, pw) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = if y < h { y } else { ph - 1 - y };
        for x in 0..pw {
            let sx = if x < w { x } else { pw - 1 - x };
            out.push(Complex::new(img[(sy, sx)], 0.0));
        }
    }
    out
}

/// In-place 2-D DFT of a row-major `h × w` grid. The inverse is normalised.
fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(data);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Complex band-pass responses `e + i·o` for every scale at one orientation,
/// cropped back to the image size.
fn orientation_responses(
    spectrum: &[Complex<f64>],
    bank: &LogGaborBank,
    orientation: usize,
) -> Vec<Vec<Complex<f64>>> {
    let (ph, pw) = bank.grid();
    let (h, w) = (bank.height, bank.width);
    (0..bank.scales())
        .map(|s| {
            let filt = bank.transfer(s, orientation);
            let mut buf: Vec<Complex<f64>> =
                spectrum.iter().zip(filt).map(|(&v, &g)| v * g).collect();
            fft2(&mut buf, ph, pw, true);
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                out.extend_from_slice(&buf[y * pw..y * pw + w]);
            }
            out
        })
        .collect()
}

/// Numerator `Σ_s ⌊E_s − T⌋₊` and denominator `Σ_s A_s` at every pixel.
fn orientation_energy(responses: &[Vec<Complex<f64>>], params: &PcParams) -> (Vec<f64>, Vec<f64>) {
    let n = responses[0].len();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for p in 0..n {
        let (mut sum_e, mut sum_o, mut sum_a) = (0.0, 0.0, 0.0);
        for r in responses {
            sum_e += r[p].re;
            sum_o += r[p].im;
            sum_a += r[p].norm();
        }
        den[p] = sum_a;
        let mag = (sum_e * sum_e + sum_o * sum_o).sqrt();
        if mag == 0.0 {
            continue;
        }
        let (ue, uo) = (sum_e / mag, sum_o / mag);
        num[p] = responses
            .iter()
            .map(|r| (r[p].re * ue + r[p].im * uo - params.noise_threshold).max(0.0))
            .sum();
    }
    (num, den)
}

fn check_dims(img: &GrayImage, bank: &LogGaborBank) -> Result<()> {
    if img.height() != bank.height || img.width() != bank.width {
        return Err(Error::Shape(format!(
            "image {}x{} but bank built for {}x{}",
            img.height(),
            img.width(),
            bank.height,
            bank.width
        )));
    }
    Ok(())
}

pub fn phase_congruency(img: &GrayImage, bank: &LogGaborBank, params: &PcParams) -> Result<GrayImage> {
    phase_congruency_with(img, bank, params, Exec::default())
}

/// Phase congruency map; orientations may run in parallel and are summed
/// in index order.
pub fn phase_congruency_with(
    img: &GrayImage,
    bank: &LogGaborBank,
    params: &PcParams,
    exec: Exec,
) -> Result<GrayImage> {
    Ok(GrayImage::from_clamped(phase_congruency_matrix(img.pixels(), bank, params, exec)?))
}

/// Unclamped-input variant used by the invariance checks; accepts any finite
/// intensity grid of the bank's size.
pub fn phase_congruency_matrix(
    img: &Matrix,
    bank: &LogGaborBank,
    params: &PcParams,
    exec: Exec,
) -> Result<Matrix> {
    params.validate()?;
    if img.shape() != (bank.height, bank.width) {
        return Err(Error::Shape(format!(
            "image {}x{} but bank built for {}x{}",
            img.rows(),
            img.cols(),
            bank.height,
            bank.width
        )));
    }
    if !img.is_finite() {
        return Err(Error::InvalidArgument("non-finite pixel".into()));
    }
    let (ph, pw) = bank.grid();
    let mut spectrum = symmetric_pad(img);
    fft2(&mut spectrum, ph, pw, false);
    let per_orientation: Vec<(Vec<f64>, Vec<f64>)> = exec.map(bank.orientations(), |o| {
        orientation_energy(&orientation_responses(&spectrum, bank, o), params)
    });
    let n = bank.height * bank.width;
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (on, od) in &per_orientation {
        num.iter_mut().zip(on).for_each(|(a, v)| *a += v);
        den.iter_mut().zip(od).for_each(|(a, v)| *a += v);
    }
    Ok(Matrix::from_vec_unchecked(
        bank.height,
        bank.width,
        num.iter().zip(&den).map(|(a, b)| (a / (b + params.epsilon)).clamp(0.0, 1.0)).collect(),
    ))
}

/// `2 · median(A)` over the finest-scale amplitudes of every orientation.
pub fn estimate_noise_threshold(img: &GrayImage, bank: &LogGaborBank) -> Result<f64> {
    check_dims(img, bank)?;
    let (ph, pw) = bank.grid();
    let mut spectrum = symmetric_pad(img.pixels());
    fft2(&mut spectrum, ph, pw, false);
    let mut amps = Vec::with_capacity(bank.orientations() * img.height() * img.width());
    for o in 0..bank.orientations() {
        let filt = bank.transfer(0, o);
        let mut buf: Vec<Complex<f64>> = spectrum.iter().zip(filt).map(|(&v, &g)| v * g).collect();
        fft2(&mut buf, ph, pw, true);
        for y in 0..img.height() {
            amps.extend(buf[y * pw..y * pw + img.width()].iter().map(|c| c.norm()));
        }
    }
    amps.sort_by(f64::total_cmp);
    let m = amps.len();
    let median = if m % 2 == 1 { amps[m / 2] } else { 0.5 * (amps[m / 2 - 1] + amps[m / 2]) };
    Ok(2.0 * median)
}

/// Reflect-101 index into `0..n` (`-1 → 1`, `n → n − 2`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// `A = sigmoid(W_e ∗ PC + b)` with a same-size, reflect-101 bordered
/// correlation (the kernel is not flipped).
pub fn edge_attention(pc: &GrayImage, params: &AttentionParams) -> GrayImage {
    let (h, w) = (pc.height(), pc.width());
    let k = params.kernel.rows();
    let r = (k / 2) as isize;
    let mut out = Matrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = params.bias;
            for u in 0..k {
                let sy = reflect101(y as isize + u as isize - r, h);
                for v in 0..k {
                    let sx = reflect101(x as isize + v as isize - r, w);
                    acc += params.kernel[(u, v)] * pc.get(sy, sx);
                }
            }
            out[(y, x)] = sigmoid(acc);
        }
    }
    GrayImage::from_clamped(out)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `F′ = A ⊙ F`.
pub fn apply_attention(features: &Matrix, attention: &GrayImage) -> Result<Matrix> {
    if features.shape() != attention.pixels().shape() {
        return Err(Error::Shape(format!(
            "feature map {:?} vs attention {:?}",
            features.shape(),
            attention.pixels().shape()
        )));
    }
    let data = features
        .as_slice()
        .iter()
        .zip(attention.pixels().as_slice())
        .map(|(f, a)| f * a)
        .collect();
    Ok(Matrix::from_vec_unchecked(features.rows(), features.cols(), data))
}

/// `α_vis F′_vis + α_ir F′_ir + α_phase F_phase` with softmax weights.
pub fn adaptive_fusion(vis: &Matrix, ir: &Matrix, phase: &Matrix, logits: &FusionLogits) -> Result<Matrix> {
    if vis.shape() != ir.shape() || vis.shape() != phase.shape() {
        return Err(Error::Shape(format!(
            "fusion inputs {:?}, {:?}, {:?}",
            vis.shape(),
            ir.shape(),
            phase.shape()
        )));
    }
    let [a, b, c] = logits.weights();
    let data = vis
        .as_slice()
        .iter()
        .zip(ir.as_slice())
        .zip(phase.as_slice())
        .map(|((v, i), p)| a * v + b * i + c * p)
        .collect();
    Ok(Matrix::from_vec_unchecked(vis.rows(), vis.cols(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn bank(h: usize, w: usize) -> LogGaborBank {
        build_log_gabor_bank(h, w, &LogGaborConfig::default()).unwrap()
    }

    #[test]
    fn dc_bin_is_zero() {
        let b = bank(16, 20);
        for o in 0..b.orientations() {
            for s in 0..b.scales() {
                assert_eq!(b.transfer(s, o)[0], 0.0);
            }
        }
    }

    #[test]
    fn center_frequencies() {
        let cfg = LogGaborConfig { orientations: 1, ..LogGaborConfig::default() };
        let b = build_log_gabor_bank(16, 16, &cfg).unwrap();
        let want = [1.0 / 3.0, 1.0 / 6.3, 1.0 / 13.23, 1.0 / 27.783];
        for (f, w) in b.center_frequencies().iter().zip(want) {
            assert_abs_diff_eq!(*f, w, epsilon = 1e-12);
        }
        for &f0 in b.center_frequencies() {
            assert_abs_diff_eq!(log_gabor_radial(f0, f0, 0.55), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn bank_rejects_bad_geometry() {
        let cfg = LogGaborConfig::default();
        assert!(build_log_gabor_bank(7, 16, &cfg).is_err());
        assert!(build_log_gabor_bank(16, 16, &LogGaborConfig { scales: 1, ..cfg.clone() }).is_err());
        assert!(build_log_gabor_bank(16, 16, &LogGaborConfig { orientations: 0, ..cfg.clone() }).is_err());
        assert!(build_log_gabor_bank(16, 16, &LogGaborConfig { min_wavelength: 1.5, ..cfg.clone() }).is_err());
        assert!(build_log_gabor_bank(16, 16, &LogGaborConfig { mult: 1.0, ..cfg }).is_err());
    }

    #[test]
    fn half_max_overlap() {
        let o = 6;
        let s = LogGaborConfig::half_max_sigma_theta(o);
        let half_gap = PI / o as f64 / 2.0;
        assert_abs_diff_eq!((-(half_gap * half_gap) / (2.0 * s * s)).exp(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn constant_image_has_zero_pc() {
        let b = bank(16, 16);
        let img = GrayImage::from_fn(16, 16, |_, _| 0.37);
        let pc = phase_congruency(&img, &b, &PcParams::default()).unwrap();
        assert!(pc.pixels().as_slice().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn dimension_mismatch() {
        let b = bank(16, 16);
        let img = GrayImage::from_fn(16, 12, |_, _| 0.0);
        assert!(matches!(phase_congruency(&img, &b, &PcParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn orientations_parallel_matches_sequential() {
        let b = bank(24, 24);
        let mut rng = Rng::new(8);
        let img = GrayImage::new(Matrix::new(24, 24, rng.uniform_vec(24 * 24)).unwrap()).unwrap();
        let p = PcParams::default();
        let a = phase_congruency_with(&img, &b, &p, Exec::Sequential).unwrap();
        let c = phase_congruency_with(&img, &b, &p, Exec::Parallel).unwrap();
        assert!(a.pixels().max_abs_diff(c.pixels()) <= 1e-12);
    }

    #[test]
    fn attention_zero_map_is_half() {
        let pc = GrayImage::from_fn(9, 9, |_, _| 0.0);
        let mut rng = Rng::new(1);
        let k = Matrix::new(3, 3, rng.normal_vec(9)).unwrap();
        let a = edge_attention(&pc, &AttentionParams::new(k, 0.0).unwrap());
        assert!(a.pixels().as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_pointwise_kernel() {
        let pc = GrayImage::from_fn(8, 8, |y, x| ((y * 8 + x) as f64) / 64.0);
        let p = AttentionParams::new(Matrix::filled(1, 1, 2.5), -0.7).unwrap();
        let a = edge_attention(&pc, &p);
        for y in 0..8 {
            for x in 0..8 {
                let want = 1.0 / (1.0 + (-(2.5 * pc.get(y, x) - 0.7)).exp());
                assert_abs_diff_eq!(a.get(y, x), want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn attention_box_filter_by_hand() {
        #[rustfmt::skip]
        let vals = [
            0.0, 0.1, 0.2, 0.3, 0.4,
            0.5, 0.6, 0.7, 0.8, 0.9,
            1.0, 0.9, 0.8, 0.7, 0.6,
            0.5, 0.4, 0.3, 0.2, 0.1,
            0.0, 0.2, 0.4, 0.6, 0.8,
        ];
        let pc = GrayImage::new(Matrix::new(5, 5, vals.to_vec()).unwrap()).unwrap();
        let a = edge_attention(&pc, &AttentionParams::box_filter(3, 1.0, 0.0).unwrap());
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        // Interior (1,1): mean of the top-left 3×3 block.
        let interior = (0.0 + 0.1 + 0.2 + 0.5 + 0.6 + 0.7 + 1.0 + 0.9 + 0.8) / 9.0;
        assert_abs_diff_eq!(a.get(1, 1), s(interior), epsilon = 1e-12);
        // Corner (0,0): reflect-101 maps row/col −1 onto row/col 1.
        let corner = (0.6 + 0.5 + 0.6 + 0.1 + 0.0 + 0.1 + 0.6 + 0.5 + 0.6) / 9.0;
        assert_abs_diff_eq!(a.get(0, 0), s(corner), epsilon = 1e-12);
        // Edge (4,2): row 5 maps onto row 3.
        let edge = (0.4 + 0.3 + 0.2 + 0.2 + 0.4 + 0.6 + 0.4 + 0.3 + 0.2) / 9.0;
        assert_abs_diff_eq!(a.get(4, 2), s(edge), epsilon = 1e-12);
    }

    #[test]
    fn attention_rejects_even_kernel() {
        assert!(AttentionParams::new(Matrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn reflect101_indices() {
        assert_eq!(reflect101(-1, 5), 1);
        assert_eq!(reflect101(-2, 5), 2);
        assert_eq!(reflect101(5, 5), 3);
        assert_eq!(reflect101(6, 5), 2);
        assert_eq!(reflect101(2, 5), 2);
    }

    #[test]
    fn attention_modulation() {
        let f = Matrix::from_rows(&[[2.0, 4.0]]).unwrap();
        let ones = GrayImage::new(Matrix::filled(1, 2, 1.0)).unwrap();
        let zeros = GrayImage::new(Matrix::zeros(1, 2)).unwrap();
        let a = GrayImage::new(Matrix::from_rows(&[[0.5, 0.25]]).unwrap()).unwrap();
        assert_eq!(apply_attention(&f, &ones).unwrap(), f);
        assert_eq!(apply_attention(&f, &zeros).unwrap(), Matrix::zeros(1, 2));
        assert_eq!(apply_attention(&f, &a).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(apply_attention(&Matrix::zeros(2, 2), &a).is_err());
    }

    #[test]
    fn fusion_cases() {
        let v = Matrix::from_rows(&[[1.0]]).unwrap();
        let i = Matrix::from_rows(&[[2.0]]).unwrap();
        let p = Matrix::from_rows(&[[3.0]]).unwrap();
        let eq = adaptive_fusion(&v, &i, &p, &FusionLogits::default()).unwrap();
        assert_abs_diff_eq!(eq[(0, 0)], 2.0, epsilon = 1e-15);
        let sat = adaptive_fusion(&v, &i, &p, &FusionLogits([1000.0, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(sat[(0, 0)], 1.0, epsilon = 1e-12);
        let logits = FusionLogits([0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]);
        let w = adaptive_fusion(&v, &i, &p, &logits).unwrap();
        assert_abs_diff_eq!(w[(0, 0)], 2.3, epsilon = 1e-12);
        assert!(adaptive_fusion(&v, &i, &Matrix::zeros(1, 2), &logits).is_err());
    }

    #[test]
    fn fusion_stays_in_convex_hull() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let mk = |rng: &mut Rng| Matrix::new(3, 4, rng.normal_vec(12)).unwrap();
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let l = FusionLogits([rng.normal() * 3.0, rng.normal() * 3.0, rng.normal() * 3.0]);
            let f = adaptive_fusion(&a, &b, &c, &l).unwrap();
            for k in 0..12 {
                let vals = [a.as_slice()[k], b.as_slice()[k], c.as_slice()[k]];
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = f.as_slice()[k];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
