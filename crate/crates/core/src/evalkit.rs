//! Automatic metrics: ranking quality, response diversity, entity counts,
//! the repetition audit, and the 2-D embedding projection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::recommender::{link_text, Lexicon};

/// One logged recommendation turn.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub conversation_id: String,
    pub turn: usize,
    /// Full novelty-filtered ranking, best first.
    pub ranked_item_ids: Vec<usize>,
    pub mentioned_item_ids: Vec<usize>,
    /// New, liked gold items for the turn.
    pub gold_item_ids: Vec<usize>,
    pub gold_liked_flags: Vec<bool>,
}

/// One logged generated response.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseEvent {
    pub conversation_id: String,
    pub turn: usize,
    pub tokens: Vec<usize>,
    pub text: String,
    pub entity_token_ids: Vec<usize>,
}

/// Ranking metrics per cutoff.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankReport {
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub examples: usize,
}

/// Diversity and entity-count metrics over generated responses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenReport {
    pub distinct_n: BTreeMap<usize, f64>,
    pub aen: f64,
    pub responses: usize,
}

/// Fractions of top-1 recommendations that are new vs already mentioned.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub new_fraction: f64,
    pub repetitive_fraction: f64,
    pub events: usize,
}

/// Combined report emitted by the evaluate pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition: Option<RepetitionReport>,
    pub novelty_ok: bool,
}

/// Recall, precision, and NDCG at each cutoff, averaged over events.
///
/// Every event must carry a nonempty gold set and a ranking at least as long
/// as the largest cutoff.
pub fn rank_metrics(events: &[PredictionEvent], ks: &[usize]) -> Result<RankReport> {
    if events.is_empty() {
        return Err(Error::data("rank_metrics needs at least one event"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::data("cutoffs must be positive"));
    }
    let max_k = *ks.iter().max().expect("nonempty cutoffs");
    let mut recall: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut precision = recall.clone();
    let mut ndcg = recall.clone();

    for (i, event) in events.iter().enumerate() {
        if event.gold_item_ids.is_empty() {
            return Err(Error::data(format!("event {i} has an empty gold set")));
        }
        if event.ranked_item_ids.len() < max_k {
            return Err(Error::data(format!(
                "event {i} ranks {} items but the largest cutoff is {max_k}",
                event.ranked_item_ids.len()
            )));
        }
        let gold: BTreeSet<usize> = event.gold_item_ids.iter().copied().collect();
        for &k in ks {
            let top = &event.ranked_item_ids[..k];
            let hits = top.iter().filter(|id| gold.contains(id)).count();
            *recall.get_mut(&k).expect("cutoff present") += hits as f64 / gold.len() as f64;
            *precision.get_mut(&k).expect("cutoff present") += hits as f64 / k as f64;

            let dcg: f64 = top
                .iter()
                .enumerate()
                .filter(|(_, id)| gold.contains(id))
                .map(|(rank, _)| 1.0 / ((rank + 2) as f64).log2())
                .sum();
            let ideal: f64 = (0..gold.len().min(k))
                .map(|rank| 1.0 / ((rank + 2) as f64).log2())
                .sum();
            *ndcg.get_mut(&k).expect("cutoff present") += dcg / ideal;
        }
    }
    let n = events.len() as f64;
    for map in [&mut recall, &mut precision, &mut ndcg] {
        for v in map.values_mut() {
            *v /= n;
        }
    }
    Ok(RankReport {
        recall,
        precision,
        ndcg,
        examples: events.len(),
    })
}

/// Distinct n-grams across all responses divided by the response count.
/// Responses shorter than n contribute no n-grams.
pub fn distinct_n(responses: &[Vec<usize>], n: usize) -> Result<f64> {
    Ok(distinct_count(responses, n)? as f64 / responses.len() as f64)
}

/// Alternative normalization: distinct n-grams per total n-gram.
pub fn distinct_n_per_gram(responses: &[Vec<usize>], n: usize) -> Result<f64> {
    let distinct = distinct_count(responses, n)?;
    let total: usize = responses
        .iter()
        .map(|r| r.len().saturating_sub(n - 1))
        .sum();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(distinct as f64 / total as f64)
}

fn distinct_count(responses: &[Vec<usize>], n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::data("n-gram order must be at least 1"));
    }
    if responses.is_empty() {
        return Err(Error::data("distinct_n is undefined for zero responses"));
    }
    let mut grams: BTreeSet<&[usize]> = BTreeSet::new();
    for response in responses {
        if response.len() >= n {
            for window in response.windows(n) {
                grams.insert(window);
            }
        }
    }
    Ok(grams.len())
}

/// Mean number of linked entities per response text.
pub fn avg_entity_number(texts: &[String], lexicon: &Lexicon) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::data(
            "avg_entity_number is undefined for zero responses",
        ));
    }
    let total: usize = texts.iter().map(|t| link_text(t, lexicon).len()).sum();
    Ok(total as f64 / texts.len() as f64)
}

/// Fraction of top-1 recommendations already present in the mentioned set.
/// Events with an empty ranking (no eligible items) are skipped.
pub fn repetition_stats(events: &[PredictionEvent]) -> Result<RepetitionReport> {
    let mut repetitive = 0usize;
    let mut counted = 0usize;
    for event in events {
        let Some(&top1) = event.ranked_item_ids.first() else {
            continue;
        };
        counted += 1;
        if event.mentioned_item_ids.contains(&top1) {
            repetitive += 1;
        }
    }
    if counted == 0 {
        return Err(Error::data(
            "repetition_stats needs at least one ranked event",
        ));
    }
    let repetitive_fraction = repetitive as f64 / counted as f64;
    Ok(RepetitionReport {
        new_fraction: 1.0 - repetitive_fraction,
        repetitive_fraction,
        events: counted,
    })
}

/// Confirm that no ranked item appears in its event's mentioned set.
pub fn verify_novelty(events: &[PredictionEvent]) -> Result<()> {
    for event in events {
        let mentioned: BTreeSet<usize> = event.mentioned_item_ids.iter().copied().collect();
        for &id in &event.ranked_item_ids {
            if mentioned.contains(&id) {
                return Err(Error::data(format!(
                    "conversation {} turn {} recommends already-mentioned item {id}",
                    event.conversation_id, event.turn
                )));
            }
        }
    }
    Ok(())
}

/// Project rows onto their top-2 principal directions after mean-centering.
/// Eigenvector signs are fixed by making the first loading above 1e-9 in
/// magnitude positive. Returns (x, y) per row.
pub fn pca_project(rows: &Matrix) -> Result<Vec<(f64, f64)>> {
    let (n, d) = rows.shape();
    if n < 2 {
        return Err(Error::data("projection needs at least 2 rows"));
    }
    if d < 2 {
        return Err(Error::data("projection needs at least 2 columns"));
    }
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (j, m) in means.iter_mut().enumerate() {
            *m += rows.get(i, j);
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, d, |i, j| rows.get(i, j) - means[j]);
    let cov = {
        let ct = centered.transpose();
        ct.matmul(&centered).scale(1.0 / (n as f64 - 1.0))
    };

    let (eigvals, eigvecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let top = [order[0], order[1]];
    if eigvals[top[0]] <= 1e-12 {
        return Err(Error::data("degenerate projection: rows have no variance"));
    }

    let mut components = Matrix::zeros(d, 2);
    for (c, &col) in top.iter().enumerate() {
        let mut v: Vec<f64> = (0..d).map(|r| eigvecs.get(r, col)).collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
            if *first < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        for (r, &x) in v.iter().enumerate() {
            components.set(r, c, x);
        }
    }
    let projected = centered.matmul(&components);
    Ok((0..n)
        .map(|i| (projected.get(i, 0), projected.get(i, 1)))
        .collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let d = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(d);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..d).map(|i| a.get(i, i)).collect(), v)
}

/// Write (x, y, label) rows as CSV with a header.
pub fn write_projection_csv(path: &Path, points: &[(f64, f64)], labels: &[String]) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::data("projection points and labels differ in length"));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,y,label")?;
    for ((x, y), label) in points.iter().zip(labels) {
        let clean = label.replace([',', '\n'], " ");
        writeln!(out, "{x},{y},{clean}")?;
    }
    Ok(())
}

/// Read a JSON-lines log of either event kind.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Write a JSON-lines log.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    Ok(())
}
