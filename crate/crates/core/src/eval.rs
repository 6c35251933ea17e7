//! Retrieval metrics (CMC, mAP, mINP) and intra/inter-class distance gaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{dot, sq_dist, FeatureBatch, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

impl Distance {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => sq_dist(a, b).sqrt(),
            Distance::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot(a, b) / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub query: FeatureBatch,
    pub gallery: FeatureBatch,
    pub distance: Distance,
    /// Gallery row `i` is skipped for query `i` (query set used as its own
    /// gallery).
    pub exclude_self: bool,
}

impl RetrievalSet {
    pub fn new(query: FeatureBatch, gallery: FeatureBatch, distance: Distance) -> Self {
        Self { query, gallery, distance, exclude_self: false }
    }

    /// Queries searched against themselves with self-matches removed.
    pub fn self_retrieval(batch: FeatureBatch, distance: Distance) -> Self {
        Self { query: batch.clone(), gallery: batch, distance, exclude_self: true }
    }

    fn validate(&self) -> Result<()> {
        if self.query.width() != self.gallery.width() {
            return Err(Error::Shape(format!(
                "query width {} vs gallery width {}",
                self.query.width(),
                self.gallery.width()
            )));
        }
        if self.exclude_self && self.query.len() != self.gallery.len() {
            return Err(Error::InvalidSetup("self-exclusion needs equal query and gallery sizes".into()));
        }
        Ok(())
    }

    fn candidates(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        let skip = self.exclude_self.then_some(q);
        (0..self.gallery.len()).filter(move |&g| Some(g) != skip)
    }
}

/// Gallery indices for every query in ascending distance, ties by index.
pub fn rank_gallery(rs: &RetrievalSet) -> Result<Vec<Vec<usize>>> {
    rank_gallery_with(rs, Exec::default())
}

pub fn rank_gallery_with(rs: &RetrievalSet, exec: Exec) -> Result<Vec<Vec<usize>>> {
    rs.validate()?;
    Ok(exec.map(rs.query.len(), |q| rank_one(rs, q)))
}

fn rank_one(rs: &RetrievalSet, q: usize) -> Vec<usize> {
    let qv = rs.query.features.row(q);
    let mut scored: Vec<(f64, usize)> =
        rs.candidates(q).map(|g| (rs.distance.eval(qv, rs.gallery.features.row(g)), g)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, g)| g).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// `cmc[k-1]` = CMC@k for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
}

impl RetrievalMetrics {
    pub fn rank(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.cmc[(k - 1).min(self.cmc.len() - 1)],
        }
    }
}

struct QueryStats {
    first_hit: usize,
    ap: f64,
    inp: f64,
}

fn query_stats(rs: &RetrievalSet, q: usize, order: &[usize]) -> Result<QueryStats> {
    let label = rs.query.labels[q];
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = 0;
    let mut last_hit = 0;
    for (pos, &g) in order.iter().enumerate() {
        if rs.gallery.labels[g] == label {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            if hits == 1 {
                first_hit = pos + 1;
            }
            last_hit = pos + 1;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidSetup(format!("query {q} (identity {label}) has no match in the gallery")));
    }
    Ok(QueryStats { first_hit, ap: precision_sum / hits as f64, inp: hits as f64 / last_hit as f64 })
}

/// CMC curve, mAP and mINP (`INP = |relevant| / rank of last relevant`).
pub fn cmc_map_minp(rs: &RetrievalSet) -> Result<RetrievalMetrics> {
    cmc_map_minp_with(rs, Exec::default())
}

pub fn cmc_map_minp_with(rs: &RetrievalSet, exec: Exec) -> Result<RetrievalMetrics> {
    rs.validate()?;
    let nq = rs.query.len();
    let stats = exec.map(nq, |q| query_stats(rs, q, &rank_one(rs, q)));
    let stats: Vec<QueryStats> = stats.into_iter().collect::<Result<_>>()?;
    let depth = rs.candidates(0).count();
    let mut cmc = vec![0.0; depth];
    for s in &stats {
        for c in &mut cmc[s.first_hit - 1..] {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= nq as f64);
    let map = stats.iter().map(|s| s.ap).sum::<f64>() / nq as f64;
    let minp = stats.iter().map(|s| s.inp).sum::<f64>() / nq as f64;
    Ok(RetrievalMetrics { cmc, map, minp })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub gap: f64,
}

/// Mean Euclidean distance over unordered same-label and different-label
/// pairs.
pub fn distance_gap(emb: &FeatureBatch) -> Result<GapStats> {
    distance_gap_with(emb, Exec::default())
}

pub fn distance_gap_with(emb: &FeatureBatch, exec: Exec) -> Result<GapStats> {
    let n = emb.len();
    let mut counts = std::collections::BTreeMap::new();
    for &l in &emb.labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidSetup("distance gap needs at least two identities".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidSetup(format!("identity {id} has a single sample")));
    }
    let x = &emb.features;
    let rows = exec.map(n, |i| {
        let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0usize, 0usize);
        for j in i + 1..n {
            let d = sq_dist(x.row(i), x.row(j)).sqrt();
            if emb.labels[i] == emb.labels[j] {
                same += d;
                ns += 1;
            } else {
                diff += d;
                nd += 1;
            }
        }
        (same, diff, ns, nd)
    });
    let (s, d, ns, nd) = rows
        .into_iter()
        .fold((0.0, 0.0, 0, 0), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2, acc.3 + r.3));
    let intra_mean = s / ns as f64;
    let inter_mean = d / nd as f64;
    Ok(GapStats { intra_mean, inter_mean, gap: inter_mean - intra_mean })
}

/// Row-normalized copy of an embedding batch.
pub fn normalized(batch: &FeatureBatch) -> FeatureBatch {
    FeatureBatch { features: batch.features.l2_normalized_rows(), ..batch.clone() }
}

/// Convenience: `n × d` features with labels as a batch.
pub fn batch_of(features: Matrix, labels: Vec<usize>, modality: crate::tensor::Modality) -> Result<FeatureBatch> {
    FeatureBatch::new(features, labels, modality, crate::tensor::Branch::Fused)
}
