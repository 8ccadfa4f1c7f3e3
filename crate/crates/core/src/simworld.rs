//! Seeded synthetic e-commerce world: users, products, creatives, a click
//! oracle with planted segment-level preferences, click-log sampling and
//! dataset export.
//!
//! Everything is a pure function of `(config, seed)`. The oracle maps each
//! (user, product-category) pair to a latent segment through one salient
//! attribute per category, so which attribute matters depends on the product
//! — grouping has to be product-aware to recover it.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupRepresentation;
use crate::io::{mat2, mat2_list};
use crate::seed::{derive_seed, gaussian_matrix, rng};

/// Shape of the planted oracle affinity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityKind {
    /// Three segments per category with distinct favourite styles, a shared
    /// second-best style and a universally bad style. Rankings conflict but
    /// a single compromise style exists.
    Conflict,
    /// Every segment shares the same style ranking.
    Homogeneous,
    /// Two segments with exactly opposed affinity rows; their style rankings
    /// are reversals of each other.
    Reversed,
    /// All affinities zero: every click probability is sigmoid(base_logit).
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    /// Cardinality of each categorical user attribute.
    pub attribute_cardinalities: Vec<usize>,
    pub n_categories: usize,
    pub n_products: usize,
    pub creatives_per_product: usize,
    pub n_styles: usize,
    pub n_segments: usize,
    /// Tokens per product title (m_t).
    pub title_token_count: usize,
    /// Tokens per creative (m_v).
    pub style_token_count: usize,
    /// Raw feature width of title/style tokens.
    pub raw_dim: usize,
    /// Std-dev of the seeded noise added to prototype tokens.
    pub feature_noise: f64,
    /// Std-dev of prototype token entries.
    pub prototype_scale: f64,
    pub base_logit: f64,
    pub affinity: AffinityKind,
    pub affinity_scale: f64,
    pub exposures_per_pair: usize,
    pub min_exposure: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 120,
            attribute_cardinalities: vec![12, 9, 6, 5, 8, 4, 7, 11],
            n_categories: 2,
            n_products: 4,
            creatives_per_product: 10,
            n_styles: 5,
            n_segments: 3,
            title_token_count: 6,
            style_token_count: 6,
            raw_dim: 24,
            feature_noise: 0.05,
            prototype_scale: 3.0,
            base_logit: 0.0,
            affinity: AffinityKind::Conflict,
            affinity_scale: 1.0,
            exposures_per_pair: 2,
            min_exposure: 50,
        }
    }
}

impl WorldConfig {
    /// Default world with planted cross-segment preference conflicts.
    pub fn conflict() -> Self {
        Self::default()
    }

    /// Same sizes as the default world but with agreeing segments.
    pub fn homogeneous() -> Self {
        Self {
            affinity: AffinityKind::Homogeneous,
            ..Self::default()
        }
    }

    /// Two-segment world with exactly reversed style rankings.
    pub fn reversed() -> Self {
        Self {
            n_segments: 2,
            n_styles: 4,
            creatives_per_product: 4,
            exposures_per_pair: 8,
            affinity: AffinityKind::Reversed,
            ..Self::default()
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.attribute_cardinalities.len()
    }

    pub fn n_creatives(&self) -> usize {
        self.n_products * self.creatives_per_product
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes() == 0 {
            return Err(Error::Config("at least one user attribute required".into()));
        }
        if let Some(card) = self.attribute_cardinalities.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!("attribute cardinality {card} < 2")));
        }
        if self.n_users == 0
            || self.n_categories == 0
            || self.n_products == 0
            || self.creatives_per_product == 0
            || self.title_token_count == 0
            || self.style_token_count == 0
            || self.raw_dim == 0
        {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if self.n_styles < 2 {
            return Err(Error::Config("need at least two creative styles".into()));
        }
        if self.n_segments == 0 {
            return Err(Error::Config("need at least one segment".into()));
        }
        if self.n_categories > self.n_products {
            return Err(Error::Config(
                "more categories than products leaves empty categories".into(),
            ));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return Err(Error::Config("feature_noise must be finite and >= 0".into()));
        }
        if !self.prototype_scale.is_finite() || self.prototype_scale <= 0.0 {
            return Err(Error::Config("prototype_scale must be finite and > 0".into()));
        }
        match self.affinity {
            AffinityKind::Conflict => {
                if self.n_segments != 3 || self.n_styles != 5 {
                    return Err(Error::Config(
                        "conflict affinity is defined for 3 segments x 5 styles".into(),
                    ));
                }
            }
            AffinityKind::Reversed => {
                if self.n_segments != 2 {
                    return Err(Error::Config(
                        "reversed affinity is defined for exactly 2 segments".into(),
                    ));
                }
            }
            AffinityKind::Homogeneous | AffinityKind::Uniform => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub attributes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: u32,
    #[serde(with = "mat2")]
    pub title_tokens: Array2<f64>,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Creative {
    pub creative_id: u32,
    pub product_id: u32,
    #[serde(with = "mat2")]
    pub style_tokens: Array2<f64>,
    /// Latent style tag; only the oracle reads it.
    pub latent_style: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub user_id: u32,
    pub product_id: u32,
    pub creative_id: u32,
    pub clicked: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaipRecord {
    pub creative_id: u32,
    pub title_ref: u32,
    pub group_key: (u32, u32),
    pub group_embedding: Vec<f64>,
    pub ctr: f64,
    pub exposures: u32,
}

/// Ground-truth click model. Click probability factors through the user's
/// latent segment (per category) and the creative's latent style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Which attribute decides the segment, per category.
    pub salient_attribute: Vec<usize>,
    pub n_segments: usize,
    /// `affinity[category][segment][style]` logit contributions.
    pub affinity: Vec<Vec<Vec<f64>>>,
    pub base_logit: f64,
}

impl OracleParams {
    /// Latent segment of a user for a product category.
    pub fn segment_of(&self, attributes: &[u32], category: u32) -> Result<usize> {
        let cat = category as usize;
        let attr_index = *self
            .salient_attribute
            .get(cat)
            .ok_or_else(|| Error::Lookup(format!("unknown category {category}")))?;
        let code = *attributes
            .get(attr_index)
            .ok_or_else(|| Error::Lookup(format!("attribute {attr_index} missing from profile")))?;
        Ok(code as usize % self.n_segments)
    }

    pub fn style_affinity(&self, category: u32, segment: usize, style: u32) -> Result<f64> {
        let row = self
            .affinity
            .get(category as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown category {category}")))?
            .get(segment)
            .ok_or_else(|| Error::Lookup(format!("unknown segment {segment}")))?;
        row.get(style as usize)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("unknown style {style}")))
    }

    /// Oracle click probability by (category, segment, style) alone.
    pub fn click_prob(&self, category: u32, segment: usize, style: u32) -> Result<f64> {
        Ok(crate::autodiff::sigmoid(
            self.base_logit + self.style_affinity(category, segment, style)?,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub users: Vec<UserProfile>,
    pub products: Vec<Product>,
    pub creatives: Vec<Creative>,
    pub oracle: OracleParams,
    /// Per-style token prototypes (each `m_v x raw_dim`), shared by all
    /// categories; creatives and rendered prompts both live in this space.
    #[serde(with = "mat2_list")]
    pub style_prototypes: Vec<Array2<f64>>,
    /// Per-category title token prototypes (each `m_t x raw_dim`).
    #[serde(with = "mat2_list")]
    pub title_prototypes: Vec<Array2<f64>>,
}

impl World {
    pub fn user(&self, user_id: u32) -> Result<&UserProfile> {
        self.users
            .get(user_id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown user {user_id}")))
    }

    pub fn product(&self, product_id: u32) -> Result<&Product> {
        self.products
            .get(product_id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown product {product_id}")))
    }

    pub fn creative(&self, creative_id: u32) -> Result<&Creative> {
        self.creatives
            .get(creative_id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown creative {creative_id}")))
    }

    pub fn creatives_of(&self, product_id: u32) -> impl Iterator<Item = &Creative> {
        self.creatives
            .iter()
            .filter(move |c| c.product_id == product_id)
    }

    /// Mean oracle click probability of `creative` over a set of users.
    pub fn group_oracle_ctr(&self, member_ids: &[u32], creative: &Creative) -> Result<f64> {
        if member_ids.is_empty() {
            return Err(Error::Precondition("empty member list".into()));
        }
        let product = self.product(creative.product_id)?;
        let mut total = 0.0;
        for &uid in member_ids {
            total += oracle_click_prob(self.user(uid)?, product, creative, &self.oracle)?;
        }
        Ok(total / member_ids.len() as f64)
    }

    /// Mean oracle click probability of a latent style over a set of users,
    /// for a product's category.
    pub fn group_oracle_ctr_by_style(
        &self,
        member_ids: &[u32],
        product_id: u32,
        style: u32,
    ) -> Result<f64> {
        if member_ids.is_empty() {
            return Err(Error::Precondition("empty member list".into()));
        }
        let category = self.product(product_id)?.category;
        let mut total = 0.0;
        for &uid in member_ids {
            let user = self.user(uid)?;
            let segment = self.oracle.segment_of(&user.attributes, category)?;
            total += self.oracle.click_prob(category, segment, style)?;
        }
        Ok(total / member_ids.len() as f64)
    }
}

/// Affinity rows for one category, `[segment][style]`.
fn affinity_rows(kind: AffinityKind, n_segments: usize, n_styles: usize, scale: f64) -> Vec<Vec<f64>> {
    match kind {
        AffinityKind::Conflict => {
            // Segment k's favourite is style 2k; style 1 is everyone's
            // second choice; style 3 is universally disliked.
            let base = [
                [8.0, 0.8, -5.5, -8.0, -6.5],
                [-6.5, 0.8, 8.0, -8.0, -5.5],
                [-5.5, 0.8, -6.5, -8.0, 8.0],
            ];
            base.iter()
                .map(|row| row.iter().map(|v| v * scale).collect())
                .collect()
        }
        AffinityKind::Homogeneous => {
            // Same ranking for every segment, spanning strong to weak.
            let row: Vec<f64> = (0..n_styles)
                .map(|s| {
                    let t = if n_styles > 1 {
                        s as f64 / (n_styles - 1) as f64
                    } else {
                        0.0
                    };
                    scale * (8.0 - 16.0 * t)
                })
                .collect();
            (0..n_segments).map(|_| row.clone()).collect()
        }
        AffinityKind::Reversed => {
            let row: Vec<f64> = (0..n_styles)
                .map(|s| {
                    let t = if n_styles > 1 {
                        s as f64 / (n_styles - 1) as f64
                    } else {
                        0.0
                    };
                    scale * (5.0 - 10.0 * t)
                })
                .collect();
            let negated: Vec<f64> = row.iter().map(|v| -v).collect();
            vec![row, negated]
        }
        AffinityKind::Uniform => vec![vec![0.0; n_styles]; n_segments],
    }
}

/// Build a world deterministically from `(config, seed)`.
pub fn build_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;

    let mut user_rng = rng(derive_seed(seed, "world/users"));
    let users = (0..config.n_users)
        .map(|uid| UserProfile {
            user_id: uid as u32,
            attributes: config
                .attribute_cardinalities
                .iter()
                .map(|&card| user_rng.gen_range(0..card) as u32)
                .collect(),
        })
        .collect();

    let mut proto_rng = rng(derive_seed(seed, "world/prototypes"));
    let style_prototypes: Vec<Array2<f64>> = (0..config.n_styles)
        .map(|_| {
            gaussian_matrix(
                config.style_token_count,
                config.raw_dim,
                config.prototype_scale,
                &mut proto_rng,
            )
        })
        .collect();
    let title_prototypes: Vec<Array2<f64>> = (0..config.n_categories)
        .map(|_| {
            gaussian_matrix(
                config.title_token_count,
                config.raw_dim,
                config.prototype_scale,
                &mut proto_rng,
            )
        })
        .collect();

    let mut product_rng = rng(derive_seed(seed, "world/products"));
    let products: Vec<Product> = (0..config.n_products)
        .map(|pid| {
            let category = (pid % config.n_categories) as u32;
            let noise = gaussian_matrix(
                config.title_token_count,
                config.raw_dim,
                config.feature_noise,
                &mut product_rng,
            );
            Product {
                product_id: pid as u32,
                title_tokens: &title_prototypes[category as usize] + &noise,
                category,
            }
        })
        .collect();

    let mut creative_rng = rng(derive_seed(seed, "world/creatives"));
    let mut creatives = Vec::with_capacity(config.n_creatives());
    for product in &products {
        for slot in 0..config.creatives_per_product {
            let latent_style = (slot % config.n_styles) as u32;
            let noise = gaussian_matrix(
                config.style_token_count,
                config.raw_dim,
                config.feature_noise,
                &mut creative_rng,
            );
            creatives.push(Creative {
                creative_id: creatives.len() as u32,
                product_id: product.product_id,
                style_tokens: &style_prototypes[latent_style as usize] + &noise,
                latent_style,
            });
        }
    }

    // Rotate the affinity columns per category so each category favours a
    // different style family; the salient attribute also differs.
    let rows = affinity_rows(
        config.affinity,
        config.n_segments,
        config.n_styles,
        config.affinity_scale,
    );
    let affinity: Vec<Vec<Vec<f64>>> = (0..config.n_categories)
        .map(|cat| {
            rows.iter()
                .map(|row| {
                    (0..config.n_styles)
                        .map(|s| row[(s + config.n_styles - cat % config.n_styles) % config.n_styles])
                        .collect()
                })
                .collect()
        })
        .collect();
    let oracle = OracleParams {
        salient_attribute: (0..config.n_categories)
            .map(|c| c % config.n_attributes())
            .collect(),
        n_segments: config.n_segments,
        affinity,
        base_logit: config.base_logit,
    };

    Ok(World {
        config: config.clone(),
        seed,
        users,
        products,
        creatives,
        oracle,
        style_prototypes,
        title_prototypes,
    })
}

/// Ground-truth click probability for one (user, creative) exposure.
pub fn oracle_click_prob(
    user: &UserProfile,
    product: &Product,
    creative: &Creative,
    oracle: &OracleParams,
) -> Result<f64> {
    if creative.product_id != product.product_id {
        return Err(Error::Input(format!(
            "creative {} does not belong to product {}",
            creative.creative_id, product.product_id
        )));
    }
    let segment = oracle.segment_of(&user.attributes, product.category)?;
    oracle.click_prob(product.category, segment, creative.latent_style)
}

/// Draw `exposures_per_pair` Bernoulli clicks for every (user, creative) pair.
pub fn sample_click_log(
    world: &World,
    exposures_per_pair: usize,
    seed: u64,
) -> Result<Vec<ClickEvent>> {
    if exposures_per_pair == 0 {
        return Err(Error::Precondition("exposures_per_pair must be >= 1".into()));
    }
    let mut click_rng = rng(derive_seed(seed, "clicks"));
    let mut events =
        Vec::with_capacity(world.users.len() * world.creatives.len() * exposures_per_pair);
    for user in &world.users {
        for creative in &world.creatives {
            let product = world.product(creative.product_id)?;
            let p = oracle_click_prob(user, product, creative, &world.oracle)?;
            for _ in 0..exposures_per_pair {
                let clicked = u8::from(click_rng.gen_range(0.0..1.0) < p);
                events.push(ClickEvent {
                    user_id: user.user_id,
                    product_id: product.product_id,
                    creative_id: creative.creative_id,
                    clicked,
                });
            }
        }
    }
    Ok(events)
}

/// Aggregate the click log into one record per (creative, group), keeping
/// only records with at least `min_exposure` exposures.
pub fn export_gaip(
    world: &World,
    log: &[ClickEvent],
    groups: &[GroupRepresentation],
    min_exposure: u32,
) -> Result<Vec<GaipRecord>> {
    let mut records = Vec::new();
    for group in groups {
        if group.member_ids.is_empty() {
            log::warn!(
                "skipping empty group {}/{}",
                group.product_id,
                group.group_index
            );
            continue;
        }
        let mut member = vec![false; world.users.len()];
        for &uid in &group.member_ids {
            let slot = member
                .get_mut(uid as usize)
                .ok_or_else(|| Error::Lookup(format!("unknown user {uid} in group")))?;
            *slot = true;
        }
        // (clicks, exposures) per creative of this product.
        let mut counts: std::collections::BTreeMap<u32, (u32, u32)> = world
            .creatives_of(group.product_id)
            .map(|c| (c.creative_id, (0, 0)))
            .collect();
        for event in log {
            if event.product_id != group.product_id || !member[event.user_id as usize] {
                continue;
            }
            if let Some((clicks, exposures)) = counts.get_mut(&event.creative_id) {
                *clicks += u32::from(event.clicked);
                *exposures += 1;
            }
        }
        for (creative_id, (clicks, exposures)) in counts {
            if exposures < min_exposure {
                continue;
            }
            records.push(GaipRecord {
                creative_id,
                title_ref: group.product_id,
                group_key: (group.product_id, group.group_index),
                group_embedding: group.flattened(),
                ctr: f64::from(clicks) / f64::from(exposures),
                exposures,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_uniform_config() -> WorldConfig {
        WorldConfig {
            n_users: 1,
            attribute_cardinalities: vec![4],
            n_categories: 1,
            n_products: 1,
            creatives_per_product: 1,
            n_styles: 2,
            n_segments: 1,
            affinity: AffinityKind::Uniform,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let config = WorldConfig::default();
        let a = build_world(&config, 7).unwrap();
        let b = build_world(&config, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let config = WorldConfig::default();
        let a = build_world(&config, 7).unwrap();
        let b = build_world(&config, 8).unwrap();
        let attrs = |w: &World| w.users.iter().map(|u| u.attributes.clone()).collect::<Vec<_>>();
        assert_ne!(attrs(&a), attrs(&b));
    }

    #[test]
    fn zero_attributes_is_a_config_error() {
        let config = WorldConfig {
            attribute_cardinalities: vec![],
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&config, 7), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_oracle_is_one_half() {
        let world = build_world(&tiny_uniform_config(), 3).unwrap();
        let p = oracle_click_prob(
            &world.users[0],
            &world.products[0],
            &world.creatives[0],
            &world.oracle,
        )
        .unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn base_logit_cancels_affinity() {
        let oracle = OracleParams {
            salient_attribute: vec![0],
            n_segments: 1,
            affinity: vec![vec![vec![2.0]]],
            base_logit: -2.0,
        };
        assert_eq!(oracle.click_prob(0, 0, 0).unwrap(), 0.5);
    }

    #[test]
    fn same_segment_means_same_probabilities() {
        let world = build_world(&WorldConfig::default(), 11).unwrap();
        let oracle = &world.oracle;
        // Find two users in the same segment for category 0.
        let seg = |u: &UserProfile| oracle.segment_of(&u.attributes, 0).unwrap();
        let first = &world.users[0];
        let buddy = world.users[1..]
            .iter()
            .find(|u| seg(u) == seg(first))
            .expect("two users share a segment");
        let product = &world.products[0];
        for creative in world.creatives_of(0) {
            let pa = oracle_click_prob(first, product, creative, oracle).unwrap();
            let pb = oracle_click_prob(buddy, product, creative, oracle).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn unknown_category_is_a_lookup_error() {
        let world = build_world(&WorldConfig::default(), 5).unwrap();
        assert!(matches!(
            world.oracle.segment_of(&world.users[0].attributes, 99),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn empirical_ctr_concentrates_on_oracle_prob() {
        let world = build_world(&tiny_uniform_config(), 7).unwrap();
        let log = sample_click_log(&world, 10_000, 7).unwrap();
        assert_eq!(log.len(), 10_000);
        let ctr = log.iter().map(|e| f64::from(e.clicked)).sum::<f64>() / log.len() as f64;
        assert!((ctr - 0.5).abs() < 0.02, "ctr {ctr}");
    }

    #[test]
    fn zero_exposures_is_a_precondition_error() {
        let world = build_world(&tiny_uniform_config(), 7).unwrap();
        assert!(matches!(
            sample_click_log(&world, 0, 7),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn click_log_is_deterministic() {
        let world = build_world(&WorldConfig::default(), 7).unwrap();
        let a = sample_click_log(&world, 2, 13).unwrap();
        let b = sample_click_log(&world, 2, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reversed_affinity_rows_reverse_rankings() {
        let world = build_world(&WorldConfig::reversed(), 7).unwrap();
        for cat in 0..world.config.n_categories as u32 {
            let probs = |seg: usize| -> Vec<f64> {
                (0..world.config.n_styles as u32)
                    .map(|s| world.oracle.click_prob(cat, seg, s).unwrap())
                    .collect()
            };
            let mut rank0: Vec<usize> = (0..world.config.n_styles).collect();
            let mut rank1 = rank0.clone();
            let p0 = probs(0);
            let p1 = probs(1);
            rank0.sort_by(|&a, &b| p0[b].partial_cmp(&p0[a]).unwrap());
            rank1.sort_by(|&a, &b| p1[b].partial_cmp(&p1[a]).unwrap());
            let reversed: Vec<usize> = rank0.iter().rev().copied().collect();
            assert_eq!(rank1, reversed, "category {cat}");
        }
    }

    #[test]
    fn gaip_records_filter_and_recount() {
        let config = WorldConfig {
            n_users: 6,
            attribute_cardinalities: vec![6],
            n_categories: 1,
            n_products: 1,
            creatives_per_product: 3,
            n_styles: 3,
            n_segments: 2,
            affinity: AffinityKind::Uniform,
            exposures_per_pair: 4,
            ..WorldConfig::default()
        };
        let world = build_world(&config, 21).unwrap();
        let log = sample_click_log(&world, 4, 21).unwrap();

        let group = |idx: u32, members: Vec<u32>| GroupRepresentation {
            product_id: 0,
            group_index: idx,
            centroid: vec![0.0; 2],
            peripherals: vec![vec![0.0; 2]],
            member_ids: members,
            degenerate: true,
        };
        // Group 0: 4 users x 4 exposures = 16 per creative. Group 1: 2 x 4 = 8.
        let groups = vec![group(0, vec![0, 1, 2, 3]), group(1, vec![4, 5])];

        let records = export_gaip(&world, &log, &groups, 10).unwrap();
        assert!(records.iter().all(|r| r.group_key == (0, 0)));
        assert_eq!(records.len(), 3, "low-exposure group filtered out");

        // Recount from the raw event list.
        for record in &records {
            let (mut clicks, mut exposures) = (0u32, 0u32);
            for event in &log {
                if event.creative_id == record.creative_id && event.user_id <= 3 {
                    clicks += u32::from(event.clicked);
                    exposures += 1;
                }
            }
            assert_eq!(record.exposures, exposures);
            assert!((record.ctr - f64::from(clicks) / f64::from(exposures)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&record.ctr));
        }

        let records_all = export_gaip(&world, &log, &groups, 5).unwrap();
        assert_eq!(records_all.len(), 6, "both groups pass the lower threshold");

        // Empty groups are skipped, not an error.
        let with_empty = vec![group(0, vec![0, 1, 2, 3]), group(1, vec![])];
        let records_skip = export_gaip(&world, &log, &with_empty, 5).unwrap();
        assert_eq!(records_skip.len(), 3);
    }
}
