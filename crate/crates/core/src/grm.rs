//! Group-aware reward model: a pairwise classifier predicting which of two
//! creatives earns the higher CTR for a given user group.
//!
//! Each creative is scored independently by a shared MLP over
//! `[group token ; pooled title ; pooled creative features]`; the pair
//! probability is the two-way softmax of the scores. Sharing the scorer
//! makes swap antisymmetry exact by construction.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::grouping::{GroupEncoder, GroupEncoderVars, GroupIndex, GroupRepresentation};
use crate::seed::{derive_seed, gaussian_matrix, rng};
use crate::simworld::{GaipRecord, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Labels from empirical group CTRs in the exported dataset.
    Empirical,
    /// Labels from the click oracle; noise-free, for isolation tests.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Full model: the encoded group token feeds the scorer.
    Group,
    /// Ablation: the group token is zeroed.
    NoGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrmConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub label_source: LabelSource,
}

impl Default for GrmConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 0.5,
            epochs: 400,
            holdout_fraction: 0.25,
            label_source: LabelSource::Empirical,
        }
    }
}

impl GrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("grm hidden width must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("grm lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairWinner {
    A,
    B,
}

/// One labelled preference pair: two creatives of the same product judged by
/// a group's CTR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefPairSample {
    pub product_id: u32,
    pub group_index: u32,
    pub creative_a: u32,
    pub creative_b: u32,
    pub label: PairWinner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrmParams {
    pub encoder: GroupEncoder,
    pub scorer_w1: Array2<f64>,
    pub scorer_b1: Array2<f64>,
    pub scorer_w2: Array2<f64>,
    pub scorer_b2: Array2<f64>,
}

impl GrmParams {
    pub fn init(
        group_input_dim: usize,
        group_embed_dim: usize,
        encoder_hidden: usize,
        raw_dim: usize,
        config: &GrmConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let scorer_in = group_embed_dim + 2 * raw_dim;
        let mut r = rng(derive_seed(seed, "grm/init"));
        let std1 = (2.0 / (scorer_in + config.hidden) as f64).sqrt();
        let std2 = (2.0 / (config.hidden + 1) as f64).sqrt();
        Ok(Self {
            encoder: GroupEncoder::init(
                group_input_dim,
                encoder_hidden,
                group_embed_dim,
                derive_seed(seed, "grm/encoder"),
            ),
            scorer_w1: gaussian_matrix(scorer_in, config.hidden, std1, &mut r),
            scorer_b1: Array2::zeros((1, config.hidden)),
            scorer_w2: gaussian_matrix(config.hidden, 1, std2, &mut r),
            scorer_b2: Array2::zeros((1, 1)),
        })
    }

    pub fn group_embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        out.extend([
            ("scorer.w1".to_string(), &self.scorer_w1),
            ("scorer.b1".to_string(), &self.scorer_b1),
            ("scorer.w2".to_string(), &self.scorer_w2),
            ("scorer.b2".to_string(), &self.scorer_b2),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = self
            .encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        out.extend([
            ("scorer.w1".to_string(), &mut self.scorer_w1),
            ("scorer.b1".to_string(), &mut self.scorer_b1),
            ("scorer.w2".to_string(), &mut self.scorer_w2),
            ("scorer.b2".to_string(), &mut self.scorer_b2),
        ]);
        out
    }

    pub fn to_archive(&self, stage: &str, config_hash: &str) -> TensorArchive {
        let mut archive = TensorArchive::new(stage, config_hash);
        for (name, tensor) in self.named_tensors() {
            archive.insert(&name, tensor.clone());
        }
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        Ok(Self {
            encoder: GroupEncoder {
                w1: archive.get("encoder.w1")?.clone(),
                b1: archive.get("encoder.b1")?.clone(),
                w2: archive.get("encoder.w2")?.clone(),
                b2: archive.get("encoder.b2")?.clone(),
            },
            scorer_w1: archive.get("scorer.w1")?.clone(),
            scorer_b1: archive.get("scorer.b1")?.clone(),
            scorer_w2: archive.get("scorer.w2")?.clone(),
            scorer_b2: archive.get("scorer.b2")?.clone(),
        })
    }
}

struct GrmVars {
    encoder: GroupEncoderVars,
    scorer_w1: Var,
    scorer_b1: Var,
    scorer_w2: Var,
    scorer_b2: Var,
}

impl GrmVars {
    fn bind<'a>(tape: &mut Tape<'a>, params: &'a GrmParams) -> Self {
        Self {
            encoder: GroupEncoderVars::bind(tape, &params.encoder),
            scorer_w1: tape.leaf(&params.scorer_w1),
            scorer_b1: tape.leaf(&params.scorer_b1),
            scorer_w2: tape.leaf(&params.scorer_w2),
            scorer_b2: tape.leaf(&params.scorer_b2),
        }
    }

    fn ordered(&self) -> Vec<Var> {
        vec![
            self.encoder.w1,
            self.encoder.b1,
            self.encoder.w2,
            self.encoder.b2,
            self.scorer_w1,
            self.scorer_b1,
            self.scorer_w2,
            self.scorer_b2,
        ]
    }

    fn score(&self, tape: &mut Tape<'_>, e_g: Var, title: Var, creative: Var) -> Var {
        let input = tape.concat_cols(&[e_g, title, creative]);
        let h = tape.matmul(input, self.scorer_w1);
        let h = tape.add(h, self.scorer_b1);
        let h = tape.tanh(h);
        let s = tape.matmul(h, self.scorer_w2);
        tape.add(s, self.scorer_b2)
    }
}

/// Mean token features of a creative or title, as a 1 x raw_dim row.
pub fn pooled(tokens: &Array2<f64>) -> Array2<f64> {
    let n = tokens.nrows() as f64;
    tokens.sum_axis(Axis(0)).insert_axis(Axis(0)).mapv(|x| x / n)
}

/// Plain-matrix inputs for scoring one pair.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub group_flat: Array2<f64>,
    pub title_pooled: Array2<f64>,
    pub a_pooled: Array2<f64>,
    pub b_pooled: Array2<f64>,
}

impl PairFeatures {
    pub fn from_world(world: &World, groups: &GroupIndex, pair: &PrefPairSample) -> Result<Self> {
        let group = groups
            .get(&(pair.product_id, pair.group_index))
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "no group ({}, {})",
                    pair.product_id, pair.group_index
                ))
            })?;
        let a = world.creative(pair.creative_a)?;
        let b = world.creative(pair.creative_b)?;
        if a.product_id != pair.product_id || b.product_id != pair.product_id {
            return Err(Error::Input(format!(
                "creatives {} and {} must both belong to product {}",
                pair.creative_a, pair.creative_b, pair.product_id
            )));
        }
        let product = world.product(pair.product_id)?;
        Ok(Self {
            group_flat: flat_row(group),
            title_pooled: pooled(&product.title_tokens),
            a_pooled: pooled(&a.style_tokens),
            b_pooled: pooled(&b.style_tokens),
        })
    }
}

fn flat_row(group: &GroupRepresentation) -> Array2<f64> {
    let flat = group.flattened();
    Array2::from_shape_vec((1, flat.len()), flat).expect("row vector")
}

/// Score a single creative against a group and title context.
pub fn grm_score(
    group_flat: &Array2<f64>,
    title_pooled: &Array2<f64>,
    creative_pooled: &Array2<f64>,
    params: &GrmParams,
    conditioning: Conditioning,
) -> Result<f64> {
    if group_flat.ncols() != params.encoder.input_dim() {
        return Err(Error::Shape(format!(
            "group vector has {} values, encoder expects {}",
            group_flat.ncols(),
            params.encoder.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = GrmVars::bind(&mut tape, params);
    let e_g = match conditioning {
        Conditioning::Group => {
            let flat = tape.leaf(group_flat);
            vars.encoder.encode(&mut tape, flat)
        }
        Conditioning::NoGroup => tape.constant(Array2::zeros((1, params.group_embed_dim()))),
    };
    let title = tape.leaf(title_pooled);
    let c = tape.leaf(creative_pooled);
    let s = vars.score(&mut tape, e_g, title, c);
    Ok(tape.scalar_value(s))
}

/// P(CTR_a > CTR_b | group): softmax over the two creative scores.
pub fn grm_predict(
    features: &PairFeatures,
    params: &GrmParams,
    conditioning: Conditioning,
) -> Result<f64> {
    let score_a = grm_score(
        &features.group_flat,
        &features.title_pooled,
        &features.a_pooled,
        params,
        conditioning,
    )?;
    let score_b = grm_score(
        &features.group_flat,
        &features.title_pooled,
        &features.b_pooled,
        params,
        conditioning,
    )?;
    Ok(sigmoid(score_a - score_b))
}

/// Convenience wrapper resolving ids against the world and group index.
pub fn grm_predict_pair(
    world: &World,
    groups: &GroupIndex,
    pair: &PrefPairSample,
    params: &GrmParams,
    conditioning: Conditioning,
) -> Result<f64> {
    let features = PairFeatures::from_world(world, groups, pair)?;
    grm_predict(&features, params, conditioning)
}

/// All unordered creative pairs with distinct CTRs, per (product, group).
/// Ties are excluded; ordering is deterministic (group key, then ids).
pub fn build_pairs(records: &[GaipRecord]) -> Vec<PrefPairSample> {
    let mut by_group: BTreeMap<(u32, u32), Vec<(u32, f64)>> = BTreeMap::new();
    for record in records {
        by_group
            .entry(record.group_key)
            .or_default()
            .push((record.creative_id, record.ctr));
    }
    let mut pairs = Vec::new();
    for ((product_id, group_index), mut creatives) in by_group {
        creatives.sort_by_key(|(id, _)| *id);
        for i in 0..creatives.len() {
            for j in i + 1..creatives.len() {
                let (a, ctr_a) = creatives[i];
                let (b, ctr_b) = creatives[j];
                if ctr_a == ctr_b {
                    continue;
                }
                pairs.push(PrefPairSample {
                    product_id,
                    group_index,
                    creative_a: a,
                    creative_b: b,
                    label: if ctr_a > ctr_b {
                        PairWinner::A
                    } else {
                        PairWinner::B
                    },
                });
            }
        }
    }
    pairs
}

/// Pairs labelled by the click oracle's group-mean probabilities instead of
/// empirical CTRs.
pub fn build_oracle_pairs(world: &World, groups: &GroupIndex) -> Result<Vec<PrefPairSample>> {
    let mut pairs = Vec::new();
    for (&(product_id, group_index), group) in groups {
        let creatives: Vec<_> = world.creatives_of(product_id).collect();
        for i in 0..creatives.len() {
            for j in i + 1..creatives.len() {
                let ctr_a = world.group_oracle_ctr(&group.member_ids, creatives[i])?;
                let ctr_b = world.group_oracle_ctr(&group.member_ids, creatives[j])?;
                if ctr_a == ctr_b {
                    continue;
                }
                pairs.push(PrefPairSample {
                    product_id,
                    group_index,
                    creative_a: creatives[i].creative_id,
                    creative_b: creatives[j].creative_id,
                    label: if ctr_a > ctr_b {
                        PairWinner::A
                    } else {
                        PairWinner::B
                    },
                });
            }
        }
    }
    Ok(pairs)
}

/// Mean pairwise cross-entropy over `pairs` and its exact gradient in
/// `named_tensors` order. One tape per call; group tokens, titles and
/// creative features are shared across pairs.
pub fn grm_loss_and_grad(
    pairs: &[PrefPairSample],
    world: &World,
    groups: &GroupIndex,
    params: &GrmParams,
    conditioning: Conditioning,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no preference pairs".into()));
    }
    // Plain features first; they live outside the tape.
    let mut group_flats: BTreeMap<(u32, u32), Array2<f64>> = BTreeMap::new();
    let mut titles: BTreeMap<u32, Array2<f64>> = BTreeMap::new();
    let mut styles: BTreeMap<u32, Array2<f64>> = BTreeMap::new();
    for pair in pairs {
        if let Entry::Vacant(e) = group_flats.entry((pair.product_id, pair.group_index)) {
            let group = groups
                .get(&(pair.product_id, pair.group_index))
                .ok_or_else(|| {
                    Error::Lookup(format!(
                        "no group ({}, {})",
                        pair.product_id, pair.group_index
                    ))
                })?;
            e.insert(flat_row(group));
        }
        if let Entry::Vacant(e) = titles.entry(pair.product_id) {
            e.insert(pooled(&world.product(pair.product_id)?.title_tokens));
        }
        for creative in [pair.creative_a, pair.creative_b] {
            if let Entry::Vacant(e) = styles.entry(creative) {
                let c = world.creative(creative)?;
                if c.product_id != pair.product_id {
                    return Err(Error::Input(format!(
                        "creative {creative} does not belong to product {}",
                        pair.product_id
                    )));
                }
                e.insert(pooled(&c.style_tokens));
            }
        }
    }

    let mut tape = Tape::new();
    let vars = GrmVars::bind(&mut tape, params);
    let mut e_g_cache: BTreeMap<(u32, u32), Var> = BTreeMap::new();
    let mut title_cache: BTreeMap<u32, Var> = BTreeMap::new();
    let mut style_cache: BTreeMap<u32, Var> = BTreeMap::new();
    let mut total: Option<Var> = None;
    for pair in pairs {
        let key = (pair.product_id, pair.group_index);
        let e_g = match e_g_cache.entry(key) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let node = match conditioning {
                    Conditioning::Group => {
                        let flat = tape.leaf(&group_flats[&key]);
                        vars.encoder.encode(&mut tape, flat)
                    }
                    Conditioning::NoGroup => {
                        tape.constant(Array2::zeros((1, params.encoder.out_dim())))
                    }
                };
                *e.insert(node)
            }
        };
        let title = *title_cache
            .entry(pair.product_id)
            .or_insert_with(|| tape.leaf(&titles[&pair.product_id]));
        let a = *style_cache
            .entry(pair.creative_a)
            .or_insert_with(|| tape.leaf(&styles[&pair.creative_a]));
        let b = *style_cache
            .entry(pair.creative_b)
            .or_insert_with(|| tape.leaf(&styles[&pair.creative_b]));
        let score_a = vars.score(&mut tape, e_g, title, a);
        let score_b = vars.score(&mut tape, e_g, title, b);
        let diff = tape.sub(score_a, score_b);
        // Cross-entropy of sigmoid(diff) against the "a wins" indicator.
        let loss = match pair.label {
            PairWinner::A => {
                let sp = tape.softplus_node(diff);
                tape.sub(sp, diff)
            }
            PairWinner::B => tape.softplus_node(diff),
        };
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss),
        });
    }
    let mean = tape.scale(total.expect("pairs non-empty"), 1.0 / pairs.len() as f64);
    let loss_value = tape.scalar_value(mean);
    let grads = tape.backward(mean);
    let grad_mats = vars
        .ordered()
        .iter()
        .zip(params.named_tensors())
        .map(|(v, (_, t))| grads.wrt_or_zero(*v, t.dim()))
        .collect();
    Ok((loss_value, grad_mats))
}

#[derive(Debug, Clone)]
pub struct GrmTrainOutcome {
    pub params: GrmParams,
    pub curve: Vec<(usize, f64)>,
}

/// Full-batch gradient descent on the pairwise cross-entropy.
pub fn grm_train(
    pairs: &[PrefPairSample],
    world: &World,
    groups: &GroupIndex,
    config: &GrmConfig,
    mut params: GrmParams,
    conditioning: Conditioning,
) -> Result<GrmTrainOutcome> {
    config.validate()?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads) = grm_loss_and_grad(pairs, world, groups, &params, conditioning)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grm epoch {epoch}"),
                value: loss,
            });
        }
        for ((_, tensor), grad) in params.named_tensors_mut().into_iter().zip(&grads) {
            tensor.scaled_add(-config.lr, grad);
        }
        if epoch % 100 == 0 || epoch + 1 == config.epochs {
            log::debug!("grm epoch {epoch}: loss {loss:.6}");
        }
        curve.push((epoch, loss));
    }
    Ok(GrmTrainOutcome { params, curve })
}

/// Deterministic train/holdout split of pairs.
pub fn split_pairs(
    pairs: &[PrefPairSample],
    holdout_fraction: f64,
    seed: u64,
) -> (Vec<PrefPairSample>, Vec<PrefPairSample>) {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    indices.shuffle(&mut rng(derive_seed(seed, "grm/holdout")));
    let n_hold = ((pairs.len() as f64) * holdout_fraction).round() as usize;
    let (hold, train) = indices.split_at(n_hold.min(pairs.len()));
    (
        train.iter().map(|&i| pairs[i].clone()).collect(),
        hold.iter().map(|&i| pairs[i].clone()).collect(),
    )
}
