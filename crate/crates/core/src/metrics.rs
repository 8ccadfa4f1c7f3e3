//! Evaluation protocols: NDCG@5 divergence between group rankings, AUROC,
//! pairwise ranking accuracy and simulated per-group CTR.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncation depth for ranking comparisons.
pub const NDCG_K: usize = 5;

/// A ranking of creatives with relevances taken from a reference group.
#[derive(Debug, Clone)]
pub struct RankedList {
    /// Creative ids ordered by descending score.
    pub items: Vec<u32>,
    /// Reference CTR per creative.
    pub relevances: BTreeMap<u32, f64>,
}

/// Metrics emitted by the pipeline's evaluation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ndcg_at_5_mean: f64,
    pub auroc: f64,
    pub pair_accuracy: f64,
    pub ctr_by_policy: BTreeMap<String, f64>,
    pub n_products: usize,
    pub n_pairs: usize,
}

/// Order creative ids by descending score; ties break to the lower id.
pub fn rank_by_score(scores: &BTreeMap<u32, f64>) -> Vec<u32> {
    let mut items: Vec<(u32, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    items.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    items.into_iter().map(|(id, _)| id).collect()
}

fn dcg(ordered_relevances: &[f64]) -> f64 {
    ordered_relevances
        .iter()
        .take(NDCG_K)
        .enumerate()
        .map(|(i, rel)| rel / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG truncated at 5 with linear gains.
///
/// `prediction` is the predicted order of creative ids; relevances come from
/// the reference group's CTRs. All-zero relevances are degenerate and score
/// 1.0 by convention.
pub fn ndcg_at_5(prediction: &[u32], relevances: &BTreeMap<u32, f64>) -> Result<f64> {
    if prediction.is_empty() {
        return Err(Error::Precondition("empty prediction list".into()));
    }
    let mut seen = BTreeSet::new();
    if !prediction.iter().all(|id| seen.insert(id)) {
        return Err(Error::Precondition("duplicate items in prediction".into()));
    }
    let predicted: Vec<f64> = prediction
        .iter()
        .map(|id| {
            relevances
                .get(id)
                .copied()
                .ok_or_else(|| Error::Input(format!("no relevance for creative {id}")))
        })
        .collect::<Result<_>>()?;
    if predicted.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Input("relevances must lie in [0, 1]".into()));
    }
    let mut ideal = predicted.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite relevances"));
    let ideal_dcg = dcg(&ideal);
    if ideal_dcg == 0.0 {
        log::debug!("all relevances zero: degenerate NDCG defined as 1.0");
        return Ok(1.0);
    }
    Ok(dcg(&predicted) / ideal_dcg)
}

/// Empirical CTR per (product, group, creative).
pub type CtrTable = BTreeMap<u32, BTreeMap<u32, BTreeMap<u32, f64>>>;

/// Build the nested CTR table from exported dataset records.
pub fn ctr_table_from_gaip(records: &[crate::simworld::GaipRecord]) -> CtrTable {
    let mut table: CtrTable = BTreeMap::new();
    for record in records {
        let (product, group) = record.group_key;
        table
            .entry(product)
            .or_default()
            .entry(group)
            .or_default()
            .insert(record.creative_id, record.ctr);
    }
    table
}

/// Mean NDCG@5 between every ordered pair of groups of each product, over
/// the product's shared creative set, averaged per product and then over
/// products. Products with fewer than two groups or fewer than two shared
/// creatives are excluded.
pub fn cross_group_ndcg(table: &CtrTable) -> Result<f64> {
    let mut product_means = Vec::new();
    for groups in table.values() {
        if groups.len() < 2 {
            continue;
        }
        // Creatives rated by every group of this product.
        let mut shared: Option<BTreeSet<u32>> = None;
        for ctrs in groups.values() {
            let ids: BTreeSet<u32> = ctrs.keys().copied().collect();
            shared = Some(match shared {
                None => ids,
                Some(s) => s.intersection(&ids).copied().collect(),
            });
        }
        let shared = shared.expect("at least one group");
        if shared.len() < 2 {
            continue;
        }
        let mut pair_scores = Vec::new();
        for (ref_group, ref_ctrs) in groups {
            for (pred_group, pred_ctrs) in groups {
                if ref_group == pred_group {
                    continue;
                }
                let prediction_scores: BTreeMap<u32, f64> = shared
                    .iter()
                    .map(|id| (*id, pred_ctrs[id]))
                    .collect();
                let relevances: BTreeMap<u32, f64> =
                    shared.iter().map(|id| (*id, ref_ctrs[id])).collect();
                let prediction = rank_by_score(&prediction_scores);
                pair_scores.push(ndcg_at_5(&prediction, &relevances)?);
            }
        }
        product_means.push(pair_scores.iter().sum::<f64>() / pair_scores.len() as f64);
    }
    if product_means.is_empty() {
        return Err(Error::Precondition(
            "no product has two groups with shared creatives".into(),
        ));
    }
    Ok(product_means.iter().sum::<f64>() / product_means.len() as f64)
}

/// Exact AUROC via rank statistics; tied scores count half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Precondition("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Precondition(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tied score runs (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of pairs whose predicted winner matches the label. A prediction
/// of exactly 0.5 never matches.
pub fn pair_accuracy_from_predictions(predictions: &[f64], labels_a: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Precondition("empty pair list".into()));
    }
    if predictions.len() != labels_a.len() {
        return Err(Error::Precondition(
            "predictions/labels length mismatch".into(),
        ));
    }
    let correct = predictions
        .iter()
        .zip(labels_a)
        .filter(|(&p, &label_a)| if label_a { p > 0.5 } else { p < 0.5 })
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Mean CTR over groups (weighted by member count) when each group sees one
/// prompt-rendered creative.
pub fn weighted_group_mean(per_group: &[(usize, f64)]) -> Result<f64> {
    let total: usize = per_group.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(Error::Precondition("no group members".into()));
    }
    Ok(per_group
        .iter()
        .map(|(n, ctr)| *n as f64 * ctr)
        .sum::<f64>()
        / total as f64)
}

/// Fraction of labelled pairs the reward model ranks correctly; predictions
/// of exactly 0.5 count as errors.
pub fn pair_accuracy(
    world: &crate::simworld::World,
    groups: &crate::grouping::GroupIndex,
    pairs: &[crate::grm::PrefPairSample],
    params: &crate::grm::GrmParams,
    conditioning: crate::grm::Conditioning,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("empty pair list".into()));
    }
    let mut predictions = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for pair in pairs {
        predictions.push(crate::grm::grm_predict_pair(
            world,
            groups,
            pair,
            params,
            conditioning,
        )?);
        labels.push(pair.label == crate::grm::PairWinner::A);
    }
    pair_accuracy_from_predictions(&predictions, &labels)
}

/// Mean oracle click probability when each group is exposed only to its own
/// generated prompt, weighted by group size.
pub fn simulated_ctr(
    world: &crate::simworld::World,
    groups: &crate::grouping::GroupIndex,
    policy_map: &BTreeMap<(u32, u32), crate::aligner::PromptSeq>,
    render_seed: u64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Precondition("no groups to evaluate".into()));
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for (key, group) in groups {
        let prompt = policy_map
            .get(key)
            .ok_or_else(|| Error::Lookup(format!("no prompt for group {key:?}")))?;
        let rendered = crate::aligner::render_prompt(prompt, world, render_seed)?;
        let ctr = world.group_oracle_ctr_by_style(
            &group.member_ids,
            group.product_id,
            rendered.nearest_style,
        )?;
        per_group.push((group.member_ids.len(), ctr));
    }
    weighted_group_mean(&per_group)
}
