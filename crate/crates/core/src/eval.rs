//! Cosine retrieval and mAP / CMC.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Ranks reported in the CMC curve.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Gallery indices by descending cosine similarity; ties keep index order.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::pre("rank_gallery", "empty gallery"));
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != query.len()) {
        return Err(Error::dim("rank_gallery", &[query.len()], &[g.len()]));
    }
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `(rank, fraction)` for each of [`CMC_RANKS`].
    pub cmc: Vec<(usize, f64)>,
    /// `None` for queries without any relevant gallery item.
    pub per_query_ap: Vec<Option<f64>>,
    pub queries: usize,
    pub excluded: usize,
}

impl MetricsReport {
    pub fn top1(&self) -> f64 {
        self.cmc[0].1
    }

    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == rank).map(|(_, v)| *v)
    }

    /// Summary row followed by one row per query.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mAP,{:.12}", self.map);
        for (r, v) in &self.cmc {
            let _ = writeln!(s, "cmc{r},{v:.12}");
        }
        let _ = writeln!(s, "queries,{}", self.queries);
        let _ = writeln!(s, "excluded,{}", self.excluded);
        s.push_str("\nquery,ap\n");
        for (i, ap) in self.per_query_ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "{i},{v:.12}");
                }
                None => {
                    let _ = writeln!(s, "{i},");
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let cmc: Vec<String> = self.cmc.iter().map(|(r, v)| format!("R{r} {:.1}%", 100.0 * v)).collect();
        format!(
            "mAP {:.1}%  {}  ({} queries, {} excluded)",
            100.0 * self.map,
            cmc.join("  "),
            self.queries,
            self.excluded
        )
    }
}

/// AP as the mean precision at each relevant hit, mAP over queries with at
/// least one relevant item, CMC over the same queries.
pub fn compute_map_cmc(rankings: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize]) -> Result<MetricsReport> {
    if rankings.len() != query_labels.len() {
        return Err(Error::dim("compute_map_cmc", &[rankings.len()], &[query_labels.len()]));
    }
    let mut aps = Vec::with_capacity(rankings.len());
    let mut hits_at = vec![0usize; CMC_RANKS.len()];
    for (rank, &ql) in rankings.iter().zip(query_labels) {
        if rank.iter().any(|&g| g >= gallery_labels.len()) {
            return Err(Error::pre("compute_map_cmc", "ranking index outside the gallery"));
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &g) in rank.iter().enumerate() {
            if gallery_labels[g] == ql {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos + 1);
            }
        }
        match first_hit {
            None => aps.push(None),
            Some(first) => {
                aps.push(Some(precision_sum / hits as f64));
                for (k, &r) in CMC_RANKS.iter().enumerate() {
                    if first <= r {
                        hits_at[k] += 1;
                    }
                }
            }
        }
    }
    let valid: Vec<f64> = aps.iter().flatten().copied().collect();
    let n = valid.len();
    let map = if n == 0 { 0.0 } else { valid.iter().sum::<f64>() / n as f64 };
    let cmc = CMC_RANKS
        .iter()
        .zip(&hits_at)
        .map(|(&r, &h)| (r, if n == 0 { 0.0 } else { h as f64 / n as f64 }))
        .collect();
    Ok(MetricsReport {
        map,
        cmc,
        per_query_ap: aps,
        queries: rankings.len(),
        excluded: rankings.len() - n,
    })
}

/// Ranks every query against the gallery and scores the result.
pub fn evaluate(queries: &[Vec<f64>], query_labels: &[usize], gallery: &[Vec<f64>], gallery_labels: &[usize]) -> Result<MetricsReport> {
    let rankings = queries
        .iter()
        .map(|q| rank_gallery(q, gallery))
        .collect::<Result<Vec<_>>>()?;
    compute_map_cmc(&rankings, query_labels, gallery_labels)
}
