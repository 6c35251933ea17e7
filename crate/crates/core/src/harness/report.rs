use serde::Serialize;

use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::eval::{cmc_map_minp_with, distance_gap_with, GapStats, RetrievalMetrics, RetrievalSet};
use crate::exec::Exec;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::Split;
use crate::harness::train::{embed_samples, forward_options};
use crate::tensor::{Branch, FeatureBatch, Matrix, Modality};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankPoint {
    pub rank: usize,
    pub rate: f64,
}

/// Metrics for one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionReport {
    pub query: Modality,
    pub gallery: Modality,
    pub cmc: Vec<RankPoint>,
    pub map: f64,
    pub minp: f64,
    #[serde(skip)]
    pub curve: Vec<f64>,
}

impl DirectionReport {
    pub fn rank1(&self) -> f64 {
        self.curve[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ir_to_rgb: DirectionReport,
    pub rgb_to_ir: DirectionReport,
    /// Mean Rank-1 of both directions, in percent.
    pub rank1: f64,
    pub distance: GapStats,
}

fn direction(
    metrics: RetrievalMetrics,
    query: Modality,
    gallery: Modality,
    ranks: &[usize],
) -> DirectionReport {
    DirectionReport {
        query,
        gallery,
        cmc: ranks.iter().map(|&r| RankPoint { rank: r, rate: metrics.rank(r) }).collect(),
        map: metrics.map,
        minp: metrics.minp,
        curve: metrics.cmc,
    }
}

/// Test-split embeddings as `(rgb, ir)` batches, optionally L2-normalized.
pub fn test_embeddings(cfg: &ExperimentConfig, params: &EncoderParams, test: &Split) -> Result<(FeatureBatch, FeatureBatch)> {
    let opts = forward_options(cfg);
    let prep = |m: Matrix| if cfg.eval.normalize { m.l2_normalized_rows() } else { m };
    let rgb = prep(embed_samples(params, &test.rgb, opts)?);
    let ir = prep(embed_samples(params, &test.ir, opts)?);
    Ok((
        FeatureBatch::new(rgb, test.rgb.labels.clone(), Modality::Rgb, Branch::Fused)?,
        FeatureBatch::new(ir, test.ir.labels.clone(), Modality::Ir, Branch::Fused)?,
    ))
}

/// Cross-modality retrieval in both directions plus the distance gap of the
/// pooled test embeddings.
pub fn evaluate(cfg: &ExperimentConfig, params: &EncoderParams, test: &Split, exec: Exec) -> Result<MetricsReport> {
    let (rgb, ir) = test_embeddings(cfg, params, test)?;
    let d = cfg.eval.distance;
    let ranks = &cfg.eval.ranks;
    let i2r = cmc_map_minp_with(&RetrievalSet::new(ir.clone(), rgb.clone(), d), exec)?;
    let r2i = cmc_map_minp_with(&RetrievalSet::new(rgb.clone(), ir.clone(), d), exec)?;
    let pooled = FeatureBatch::new(
        rgb.features.vstack(&ir.features)?,
        rgb.labels.iter().chain(&ir.labels).copied().collect(),
        Modality::Rgb,
        Branch::Fused,
    )?;
    let gap = distance_gap_with(&pooled, exec)?;
    let ir_to_rgb = direction(i2r, Modality::Ir, Modality::Rgb, ranks);
    let rgb_to_ir = direction(r2i, Modality::Rgb, Modality::Ir, ranks);
    let rank1 = 50.0 * (ir_to_rgb.rank1() + rgb_to_ir.rank1());
    Ok(MetricsReport { ir_to_rgb, rgb_to_ir, rank1, distance: gap })
}

/// Same-modality retrieval with the query itself excluded from its gallery.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanityReport {
    pub rgb_to_rgb: DirectionReport,
    pub ir_to_ir: DirectionReport,
}

pub fn evaluate_self(cfg: &ExperimentConfig, params: &EncoderParams, test: &Split, exec: Exec) -> Result<SanityReport> {
    let (rgb, ir) = test_embeddings(cfg, params, test)?;
    let d = cfg.eval.distance;
    let ranks = &cfg.eval.ranks;
    let rr = cmc_map_minp_with(&RetrievalSet::self_retrieval(rgb, d), exec)?;
    let ii = cmc_map_minp_with(&RetrievalSet::self_retrieval(ir, d), exec)?;
    Ok(SanityReport {
        rgb_to_rgb: direction(rr, Modality::Rgb, Modality::Rgb, ranks),
        ir_to_ir: direction(ii, Modality::Ir, Modality::Ir, ranks),
    })
}

/// Fails with a version error when `params` were not built for `cfg`.
pub fn check_compatible(cfg: &ExperimentConfig, params: &EncoderParams) -> Result<()> {
    let want = cfg.encoder();
    let have = params.config();
    if want != have {
        return Err(crate::error::Error::Version(format!(
            "checkpoint shapes {have:?} do not match the configured encoder {want:?}"
        )));
    }
    Ok(())
}
