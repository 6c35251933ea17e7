use serde::Serialize;

use crate::amk_mmd::KernelParams;
use crate::encoder::{backward, forward, sgd_step, EncoderParams, ForwardOptions, OptimizerState, PairBatch, TokenStream};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{streams, ModalitySamples, Split};
use crate::losses::{total_objective, AlignmentKernels};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Mean losses over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub id: f64,
    pub tri: f64,
    pub imdal: f64,
    pub idal: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub kernel_logits: Vec<f64>,
    pub log: Vec<EpochLog>,
}

/// One epoch of P×K batches as `(rgb indices, ir indices)` pairs.
///
/// Every identity contributes `K` RGB and `K` IR samples per round, drawn
/// without replacement; identities are shuffled into groups of `P` each
/// round and a trailing group smaller than `P` is dropped.
pub fn pk_batches(
    rgb: &ModalitySamples,
    ir: &ModalitySamples,
    p: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let rgb_ids = rgb.by_identity();
    let ir_ids = ir.by_identity();
    let ids: Vec<usize> = rgb_ids.keys().copied().collect();
    if ids.len() < p {
        return Err(Error::Config(format!("{} identities cannot fill P = {p}", ids.len())));
    }
    let mut pools = Vec::with_capacity(ids.len());
    let mut rounds = usize::MAX;
    for id in &ids {
        let mut a = rgb_ids[id].clone();
        let mut b = ir_ids.get(id).cloned().unwrap_or_default();
        if a.len() < k || b.len() < k {
            return Err(Error::Config(format!("identity {id} has fewer than K = {k} samples in a modality")));
        }
        rng.shuffle(&mut a);
        rng.shuffle(&mut b);
        rounds = rounds.min(a.len().min(b.len()) / k);
        pools.push((a, b));
    }
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        rng.shuffle(&mut order);
        for group in order.chunks_exact(p) {
            let mut ri = Vec::with_capacity(p * k);
            let mut ii = Vec::with_capacity(p * k);
            for &g in group {
                ri.extend_from_slice(&pools[g].0[r * k..(r + 1) * k]);
                ii.extend_from_slice(&pools[g].1[r * k..(r + 1) * k]);
            }
            batches.push((ri, ii));
        }
    }
    Ok(batches)
}

pub fn pair_batch(split: &Split, rgb_idx: &[usize], ir_idx: &[usize]) -> PairBatch {
    let rgb = split.rgb.select(rgb_idx);
    let ir = split.ir.select(ir_idx);
    debug_assert_eq!(rgb.labels, ir.labels);
    PairBatch { labels: rgb.labels, rgb_global: rgb.global, rgb_part: rgb.part, ir_global: ir.global, ir_part: ir.part }
}

fn adaptive_or_unit(x: &Matrix, y: &Matrix, kernels: usize, gamma: f64, logits: &[f64]) -> Result<KernelParams> {
    match KernelParams::adaptive(x, y, kernels, gamma, Some(logits.to_vec())) {
        Err(Error::Degenerate(_)) => {
            let ladder = crate::amk_mmd::bandwidth_ladder(1.0, kernels, gamma)?;
            KernelParams::new(ladder, logits.to_vec())
        }
        other => other,
    }
}

/// Initial parameters for a config (encoder init stream of the seed).
pub fn init_params(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    EncoderParams::init(&cfg.encoder(), &mut Rng::stream(cfg.seed, streams::INIT))
}

pub fn forward_options(cfg: &ExperimentConfig) -> ForwardOptions {
    ForwardOptions { disable_part: !cfg.ablation.ubf, normalize: cfg.model.normalize }
}

/// Single-threaded, deterministic training run.
pub fn train(cfg: &ExperimentConfig, data: &Split) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(cfg)?;
    let mut opt = OptimizerState::new(&params, cfg.train.sgd);
    let mut sampler = Rng::stream(cfg.seed, streams::SAMPLER);
    let weights = cfg.effective_weights();
    let opts = forward_options(cfg);
    let (kn, gamma) = (cfg.kernel.kernels, cfg.kernel.gamma);
    let mut logits = vec![0.0; kn];
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.schedule.at(epoch, cfg.train.epochs)?;
        let batches = pk_batches(&data.rgb, &data.ir, cfg.p(), cfg.train.k, &mut sampler)?;
        let mut sums = [0.0; 5];
        for (ri, ii) in &batches {
            let batch = pair_batch(data, ri, ii);
            let (out, cache) = forward(&params, &batch, opts)?;
            let o = &out.objective;
            let kernels = AlignmentKernels {
                intra_rgb: adaptive_or_unit(&o.g_rgb, &o.p_rgb, kn, gamma, &logits)?,
                intra_ir: adaptive_or_unit(&o.g_ir, &o.p_ir, kn, gamma, &logits)?,
                inter: adaptive_or_unit(&o.fused_rgb, &o.fused_ir, kn, gamma, &logits)?,
            };
            let report = total_objective(o, &weights, &kernels)?;
            let grads = backward(&params, &cache, &report.grads)?;
            sgd_step(&mut params, &grads, &mut opt, lr)?;
            if cfg.kernel.learn_weights {
                for (l, g) in logits.iter_mut().zip(&report.grads.kernel_logits) {
                    *l -= cfg.kernel.weight_lr * g;
                }
            }
            for (s, v) in sums.iter_mut().zip([report.total, report.id, report.tri, report.imdal, report.idal]) {
                *s += v;
            }
        }
        opt.epoch = epoch + 1;
        let n = batches.len().max(1) as f64;
        log.push(EpochLog {
            epoch,
            lr,
            total: sums[0] / n,
            id: sums[1] / n,
            tri: sums[2] / n,
            imdal: sums[3] / n,
            idal: sums[4] / n,
        });
    }
    Ok(TrainOutcome { params, kernel_logits: logits, log })
}

/// Embeds every sample of one modality (`n × d_e`).
pub fn embed_samples(params: &EncoderParams, s: &ModalitySamples, opts: ForwardOptions) -> Result<Matrix> {
    crate::encoder::embed(params, &s.global, &s.part, opts)
}

/// Token stream restricted to a contiguous range of samples.
pub fn stream_range(s: &TokenStream, start: usize, end: usize) -> TokenStream {
    let l = s.tokens_per_sample;
    TokenStream { tokens: s.tokens.slice_rows(start * l, end * l), tokens_per_sample: l }
}
