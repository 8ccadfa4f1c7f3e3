//! Product-aware user preference model.
//!
//! Three branches explain a click: pooled title features, pooled creative
//! features, and a user embedding that attends first to the product's title
//! tokens and then to the creative's style tokens. Each branch feeds an
//! affine head and the logits add up. Cross-attention keeps a residual
//! connection so the user signal survives even a single pooled key.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{sigmoid, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derive_seed_indexed, gaussian_matrix, rng};
use crate::simworld::{ClickEvent, Creative, Product, UserProfile, World};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefConfig {
    /// Shared embedding width d.
    pub dim: usize,
    /// Per-attribute embedding width d'.
    pub attr_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the click log held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for PrefConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            attr_dim: 16,
            lr: 0.08,
            epochs: 16,
            batch_size: 128,
            holdout_fraction: 0.2,
        }
    }
}

impl PrefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.attr_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("prefnet dims must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("prefnet lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl CrossAttentionParams {
    fn init(dim: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            wq: gaussian_matrix(dim, dim, std, rng),
            wk: gaussian_matrix(dim, dim, std, rng),
            wv: gaussian_matrix(dim, dim, std, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefModelParams {
    /// One embedding table per categorical attribute, card_i x d'.
    pub attr_tables: Vec<Array2<f64>>,
    pub user_w1: Array2<f64>,
    pub user_b1: Array2<f64>,
    pub user_w2: Array2<f64>,
    pub user_b2: Array2<f64>,
    pub proj_text: Array2<f64>,
    pub proj_image: Array2<f64>,
    pub ca1: CrossAttentionParams,
    pub ca2: CrossAttentionParams,
    pub head_t_w: Array2<f64>,
    pub head_t_b: Array2<f64>,
    pub head_v_w: Array2<f64>,
    pub head_v_b: Array2<f64>,
    pub head_uc_w: Array2<f64>,
    pub head_uc_b: Array2<f64>,
}

impl PrefModelParams {
    pub fn init(
        cardinalities: &[usize],
        raw_dim: usize,
        config: &PrefConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if cardinalities.is_empty() {
            return Err(Error::Config("no attribute tables to build".into()));
        }
        let d = config.dim;
        let dp = config.attr_dim;
        let concat = cardinalities.len() * dp;
        let mut r = rng(derive_seed(seed, "prefnet/init"));
        let mut xavier = |rows: usize, cols: usize| {
            gaussian_matrix(rows, cols, (2.0 / (rows + cols) as f64).sqrt(), &mut r)
        };
        let user_w1 = xavier(concat, d);
        let user_w2 = xavier(d, d);
        let proj_text = xavier(raw_dim, d);
        let proj_image = xavier(raw_dim, d);
        let ca1 = CrossAttentionParams::init(d, &mut r);
        let ca2 = CrossAttentionParams::init(d, &mut r);
        Ok(Self {
            attr_tables: cardinalities
                .iter()
                .map(|&card| gaussian_matrix(card, dp, 0.05, &mut r))
                .collect(),
            user_w1,
            user_b1: Array2::zeros((1, d)),
            user_w2,
            user_b2: Array2::zeros((1, d)),
            proj_text,
            proj_image,
            ca1,
            ca2,
            head_t_w: gaussian_matrix(d, 1, 0.05, &mut r),
            head_t_b: Array2::zeros((1, 1)),
            head_v_w: gaussian_matrix(d, 1, 0.05, &mut r),
            head_v_b: Array2::zeros((1, 1)),
            head_uc_w: gaussian_matrix(d, 1, 0.05, &mut r),
            head_uc_b: Array2::zeros((1, 1)),
        })
    }

    pub fn dim(&self) -> usize {
        self.user_w2.ncols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = self
            .attr_tables
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("attr_table.{i}"), t))
            .collect();
        out.extend([
            ("user.w1".to_string(), &self.user_w1),
            ("user.b1".to_string(), &self.user_b1),
            ("user.w2".to_string(), &self.user_w2),
            ("user.b2".to_string(), &self.user_b2),
            ("proj.text".to_string(), &self.proj_text),
            ("proj.image".to_string(), &self.proj_image),
            ("ca1.wq".to_string(), &self.ca1.wq),
            ("ca1.wk".to_string(), &self.ca1.wk),
            ("ca1.wv".to_string(), &self.ca1.wv),
            ("ca2.wq".to_string(), &self.ca2.wq),
            ("ca2.wk".to_string(), &self.ca2.wk),
            ("ca2.wv".to_string(), &self.ca2.wv),
            ("head_t.w".to_string(), &self.head_t_w),
            ("head_t.b".to_string(), &self.head_t_b),
            ("head_v.w".to_string(), &self.head_v_w),
            ("head_v.b".to_string(), &self.head_v_b),
            ("head_uc.w".to_string(), &self.head_uc_w),
            ("head_uc.b".to_string(), &self.head_uc_b),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = self
            .attr_tables
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("attr_table.{i}"), t))
            .collect();
        out.extend([
            ("user.w1".to_string(), &mut self.user_w1),
            ("user.b1".to_string(), &mut self.user_b1),
            ("user.w2".to_string(), &mut self.user_w2),
            ("user.b2".to_string(), &mut self.user_b2),
            ("proj.text".to_string(), &mut self.proj_text),
            ("proj.image".to_string(), &mut self.proj_image),
            ("ca1.wq".to_string(), &mut self.ca1.wq),
            ("ca1.wk".to_string(), &mut self.ca1.wk),
            ("ca1.wv".to_string(), &mut self.ca1.wv),
            ("ca2.wq".to_string(), &mut self.ca2.wq),
            ("ca2.wk".to_string(), &mut self.ca2.wk),
            ("ca2.wv".to_string(), &mut self.ca2.wv),
            ("head_t.w".to_string(), &mut self.head_t_w),
            ("head_t.b".to_string(), &mut self.head_t_b),
            ("head_v.w".to_string(), &mut self.head_v_w),
            ("head_v.b".to_string(), &mut self.head_v_b),
            ("head_uc.w".to_string(), &mut self.head_uc_w),
            ("head_uc.b".to_string(), &mut self.head_uc_b),
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
        let mut attr_tables = Vec::new();
        loop {
            let name = format!("attr_table.{}", attr_tables.len());
            if archive.names().any(|n| n == name) {
                attr_tables.push(archive.get(&name)?.clone());
            } else {
                break;
            }
        }
        if attr_tables.is_empty() {
            return Err(Error::Archive("archive has no attribute tables".into()));
        }
        Ok(Self {
            attr_tables,
            user_w1: archive.get("user.w1")?.clone(),
            user_b1: archive.get("user.b1")?.clone(),
            user_w2: archive.get("user.w2")?.clone(),
            user_b2: archive.get("user.b2")?.clone(),
            proj_text: archive.get("proj.text")?.clone(),
            proj_image: archive.get("proj.image")?.clone(),
            ca1: CrossAttentionParams {
                wq: archive.get("ca1.wq")?.clone(),
                wk: archive.get("ca1.wk")?.clone(),
                wv: archive.get("ca1.wv")?.clone(),
            },
            ca2: CrossAttentionParams {
                wq: archive.get("ca2.wq")?.clone(),
                wk: archive.get("ca2.wk")?.clone(),
                wv: archive.get("ca2.wv")?.clone(),
            },
            head_t_w: archive.get("head_t.w")?.clone(),
            head_t_b: archive.get("head_t.b")?.clone(),
            head_v_w: archive.get("head_v.w")?.clone(),
            head_v_b: archive.get("head_v.b")?.clone(),
            head_uc_w: archive.get("head_uc.w")?.clone(),
            head_uc_b: archive.get("head_uc.b")?.clone(),
        })
    }
}

/// Tape handles for every parameter tensor, in `named_tensors` order.
pub struct PrefVars {
    pub attr_tables: Vec<Var>,
    pub user_w1: Var,
    pub user_b1: Var,
    pub user_w2: Var,
    pub user_b2: Var,
    pub proj_text: Var,
    pub proj_image: Var,
    pub ca1: [Var; 3],
    pub ca2: [Var; 3],
    pub heads: [Var; 6],
}

impl PrefVars {
    pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a PrefModelParams) -> Self {
        Self {
            attr_tables: params.attr_tables.iter().map(|t| tape.leaf(t)).collect(),
            user_w1: tape.leaf(&params.user_w1),
            user_b1: tape.leaf(&params.user_b1),
            user_w2: tape.leaf(&params.user_w2),
            user_b2: tape.leaf(&params.user_b2),
            proj_text: tape.leaf(&params.proj_text),
            proj_image: tape.leaf(&params.proj_image),
            ca1: [
                tape.leaf(&params.ca1.wq),
                tape.leaf(&params.ca1.wk),
                tape.leaf(&params.ca1.wv),
            ],
            ca2: [
                tape.leaf(&params.ca2.wq),
                tape.leaf(&params.ca2.wk),
                tape.leaf(&params.ca2.wv),
            ],
            heads: [
                tape.leaf(&params.head_t_w),
                tape.leaf(&params.head_t_b),
                tape.leaf(&params.head_v_w),
                tape.leaf(&params.head_v_b),
                tape.leaf(&params.head_uc_w),
                tape.leaf(&params.head_uc_b),
            ],
        }
    }

    /// Vars in `named_tensors` order, for gradient extraction.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = self.attr_tables.clone();
        out.extend([
            self.user_w1,
            self.user_b1,
            self.user_w2,
            self.user_b2,
            self.proj_text,
            self.proj_image,
        ]);
        out.extend(self.ca1);
        out.extend(self.ca2);
        out.extend(self.heads);
        out
    }
}

/// All intermediate embeddings of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub e_u: Array2<f64>,
    pub e_t: Array2<f64>,
    pub e_v: Array2<f64>,
    pub e_ut: Array2<f64>,
    pub e_uc: Array2<f64>,
    pub y_hat: f64,
}

/// Tape nodes for the same intermediates.
pub struct TraceVars {
    pub e_u: Var,
    pub e_t: Var,
    pub e_v: Var,
    pub e_ut: Var,
    pub e_uc: Var,
    pub attn1: Var,
    pub attn2: Var,
    pub y_hat: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PrefSample<'a> {
    pub user: &'a UserProfile,
    pub product: &'a Product,
    pub creative: &'a Creative,
    pub label: u8,
}

impl<'a> PrefSample<'a> {
    pub fn from_event(world: &'a World, event: &ClickEvent) -> Result<Self> {
        Ok(Self {
            user: world.user(event.user_id)?,
            product: world.product(event.product_id)?,
            creative: world.creative(event.creative_id)?,
            label: event.clicked,
        })
    }
}

/// Materialize the whole click log as training samples.
pub fn samples_from_log<'a>(world: &'a World, log: &[ClickEvent]) -> Result<Vec<PrefSample<'a>>> {
    log.iter()
        .map(|e| PrefSample::from_event(world, e))
        .collect()
}

/// e_u branch: per-attribute embeddings, concatenated, through the MLP.
pub fn user_embedding_var(tape: &mut Tape<'_>, vars: &PrefVars, attributes: &[u32]) -> Result<Var> {
    if attributes.len() != vars.attr_tables.len() {
        return Err(Error::Shape(format!(
            "{} attribute codes for {} tables",
            attributes.len(),
            vars.attr_tables.len()
        )));
    }
    let mut parts = Vec::with_capacity(attributes.len());
    for (table, &code) in vars.attr_tables.iter().zip(attributes) {
        parts.push(tape.gather_row(*table, code as usize)?);
    }
    let concat = tape.concat_cols(&parts);
    let h = tape.matmul(concat, vars.user_w1);
    let h = tape.add(h, vars.user_b1);
    let h = tape.tanh(h);
    let out = tape.matmul(h, vars.user_w2);
    Ok(tape.add(out, vars.user_b2))
}

/// Single-head scaled dot-product attention with a residual connection.
/// Returns `(query + weights . (keys W_v), weights)`.
pub fn cross_attention_var(tape: &mut Tape<'_>, ca: &[Var; 3], query: Var, keys: Var) -> (Var, Var) {
    let d = tape.value(query).ncols();
    let q = tape.matmul(query, ca[0]);
    let k = tape.matmul(keys, ca[1]);
    let v = tape.matmul(keys, ca[2]);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let attended = tape.matmul(weights, v);
    (tape.add(query, attended), weights)
}

fn affine_scalar(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

/// Build the full forward graph for one sample.
pub fn build_forward<'a>(
    tape: &mut Tape<'a>,
    vars: &PrefVars,
    sample: &PrefSample<'a>,
) -> Result<TraceVars> {
    if sample.creative.product_id != sample.product.product_id {
        return Err(Error::Input(format!(
            "creative {} is not a creative of product {}",
            sample.creative.creative_id, sample.product.product_id
        )));
    }
    let title = tape.leaf(&sample.product.title_tokens);
    let style = tape.leaf(&sample.creative.style_tokens);

    let e_u = user_embedding_var(tape, vars, &sample.user.attributes)?;
    let title_proj = tape.matmul(title, vars.proj_text);
    let style_proj = tape.matmul(style, vars.proj_image);
    let e_t = tape.mean_rows(title_proj);
    let e_v = tape.mean_rows(style_proj);

    let (e_ut, attn1) = cross_attention_var(tape, &vars.ca1, e_u, title_proj);
    let (e_uc, attn2) = cross_attention_var(tape, &vars.ca2, e_ut, style_proj);

    let y_t = affine_scalar(tape, e_t, vars.heads[0], vars.heads[1]);
    let y_v = affine_scalar(tape, e_v, vars.heads[2], vars.heads[3]);
    let y_uc = affine_scalar(tape, e_uc, vars.heads[4], vars.heads[5]);
    let y = tape.add(y_t, y_v);
    let y_hat = tape.add(y, y_uc);

    Ok(TraceVars {
        e_u,
        e_t,
        e_v,
        e_ut,
        e_uc,
        attn1,
        attn2,
        y_hat,
    })
}

/// Binary cross-entropy with logits: `softplus(z) - label * z`.
pub fn bce_with_logits_var(tape: &mut Tape<'_>, logit: Var, label: u8) -> Var {
    let sp = tape.softplus_node(logit);
    if label == 0 {
        sp
    } else {
        tape.sub(sp, logit)
    }
}

/// Encode a user's attributes into e_u.
pub fn encode_user(attributes: &[u32], params: &PrefModelParams) -> Result<Array2<f64>> {
    for (i, (&code, table)) in attributes.iter().zip(&params.attr_tables).enumerate() {
        if code as usize >= table.nrows() {
            return Err(Error::Lookup(format!(
                "attribute {i} code {code} out of range (cardinality {})",
                table.nrows()
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = PrefVars::bind(&mut tape, params);
    let e_u = user_embedding_var(&mut tape, &vars, attributes)?;
    Ok(tape.value(e_u).clone())
}

#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    pub output: Array2<f64>,
    pub weights: Array2<f64>,
}

/// Standalone cross-attention on plain matrices.
pub fn cross_attention(
    query: &Array2<f64>,
    keys: &Array2<f64>,
    ca: &CrossAttentionParams,
) -> Result<CrossAttentionOutput> {
    if keys.nrows() == 0 {
        return Err(Error::Precondition(
            "attention needs at least one key".into(),
        ));
    }
    if query.nrows() != 1 || query.ncols() != ca.wq.nrows() || keys.ncols() != ca.wk.nrows() {
        return Err(Error::Shape(format!(
            "query {:?} / keys {:?} incompatible with attention dims {:?}",
            query.dim(),
            keys.dim(),
            ca.wq.dim()
        )));
    }
    let mut tape = Tape::new();
    let ca_vars = [tape.leaf(&ca.wq), tape.leaf(&ca.wk), tape.leaf(&ca.wv)];
    let q = tape.leaf(query);
    let k = tape.leaf(keys);
    let (out, weights) = cross_attention_var(&mut tape, &ca_vars, q, k);
    Ok(CrossAttentionOutput {
        output: tape.value(out).clone(),
        weights: tape.value(weights).clone(),
    })
}

/// Full forward pass for one sample.
pub fn forward(sample: &PrefSample<'_>, params: &PrefModelParams) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let vars = PrefVars::bind(&mut tape, params);
    let trace = build_forward(&mut tape, &vars, sample)?;
    Ok(ForwardTrace {
        e_u: tape.value(trace.e_u).clone(),
        e_t: tape.value(trace.e_t).clone(),
        e_v: tape.value(trace.e_v).clone(),
        e_ut: tape.value(trace.e_ut).clone(),
        e_uc: tape.value(trace.e_uc).clone(),
        y_hat: tape.scalar_value(trace.y_hat),
    })
}

/// Predicted click probability.
pub fn predict_prob(sample: &PrefSample<'_>, params: &PrefModelParams) -> Result<f64> {
    Ok(sigmoid(forward(sample, params)?.y_hat))
}

fn grads_in_order(grads: &Grads, vars: &PrefVars, params: &PrefModelParams) -> Vec<Array2<f64>> {
    vars.ordered()
        .iter()
        .zip(params.named_tensors())
        .map(|(v, (_, t))| grads.wrt_or_zero(*v, t.dim()))
        .collect()
}

/// Mean binary cross-entropy over a batch and its exact gradient, in
/// `named_tensors` order.
///
/// The whole batch shares one tape; projected token matrices, attention
/// keys/values and user embeddings are cached per entity so repeated
/// products, creatives and users in a batch cost one subgraph each.
pub fn loss_and_grad(
    batch: &[PrefSample<'_>],
    params: &PrefModelParams,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let d = params.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut tape = Tape::new();
    let vars = PrefVars::bind(&mut tape, params);

    // (t_proj, e_t, k1^T, v1) per product; (v_proj, e_v, k2^T, v2) per
    // creative; (e_u, q1) per user; (e_ut, q2) per (user, product).
    let mut title_cache: BTreeMap<u32, [Var; 4]> = BTreeMap::new();
    let mut style_cache: BTreeMap<u32, [Var; 4]> = BTreeMap::new();
    let mut user_cache: BTreeMap<u32, [Var; 2]> = BTreeMap::new();
    let mut ut_cache: BTreeMap<(u32, u32), [Var; 2]> = BTreeMap::new();

    let mut total = None;
    for sample in batch {
        if sample.creative.product_id != sample.product.product_id {
            return Err(Error::Input(format!(
                "creative {} is not a creative of product {}",
                sample.creative.creative_id, sample.product.product_id
            )));
        }
        let [_, e_t, k1t, v1] = match title_cache.entry(sample.product.product_id) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let title = tape.leaf(&sample.product.title_tokens);
                let t_proj = tape.matmul(title, vars.proj_text);
                let e_t = tape.mean_rows(t_proj);
                let k1 = tape.matmul(t_proj, vars.ca1[1]);
                let k1t = tape.transpose(k1);
                let v1 = tape.matmul(t_proj, vars.ca1[2]);
                *e.insert([t_proj, e_t, k1t, v1])
            }
        };
        let [_, e_v, k2t, v2] = match style_cache.entry(sample.creative.creative_id) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let style = tape.leaf(&sample.creative.style_tokens);
                let v_proj = tape.matmul(style, vars.proj_image);
                let e_v = tape.mean_rows(v_proj);
                let k2 = tape.matmul(v_proj, vars.ca2[1]);
                let k2t = tape.transpose(k2);
                let v2 = tape.matmul(v_proj, vars.ca2[2]);
                *e.insert([v_proj, e_v, k2t, v2])
            }
        };
        let [e_u, q1] = match user_cache.entry(sample.user.user_id) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(_) => {
                let e_u = user_embedding_var(&mut tape, &vars, &sample.user.attributes)?;
                let q1 = tape.matmul(e_u, vars.ca1[0]);
                *user_cache.entry(sample.user.user_id).or_insert([e_u, q1])
            }
        };
        let [e_ut, q2] = match ut_cache.entry((sample.user.user_id, sample.product.product_id)) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => {
                let scores = tape.matmul(q1, k1t);
                let scores = tape.scale(scores, inv_sqrt_d);
                let weights = tape.softmax_rows(scores);
                let attended = tape.matmul(weights, v1);
                let e_ut = tape.add(e_u, attended);
                let q2 = tape.matmul(e_ut, vars.ca2[0]);
                *e.insert([e_ut, q2])
            }
        };
        let scores = tape.matmul(q2, k2t);
        let scores = tape.scale(scores, inv_sqrt_d);
        let weights = tape.softmax_rows(scores);
        let attended = tape.matmul(weights, v2);
        let e_uc = tape.add(e_ut, attended);

        let y_t = affine_scalar(&mut tape, e_t, vars.heads[0], vars.heads[1]);
        let y_v = affine_scalar(&mut tape, e_v, vars.heads[2], vars.heads[3]);
        let y_uc = affine_scalar(&mut tape, e_uc, vars.heads[4], vars.heads[5]);
        let y = tape.add(y_t, y_v);
        let y_hat = tape.add(y, y_uc);
        let loss = bce_with_logits_var(&mut tape, y_hat, sample.label);
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss),
        });
    }
    let total = total.expect("non-empty batch");
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss_value = tape.scalar_value(mean);
    let grads = tape.backward(mean);
    Ok((loss_value, grads_in_order(&grads, &vars, params)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PrefModelParams,
    /// `(epoch, mean loss)` curve.
    pub curve: Vec<(usize, f64)>,
}

/// Mini-batch SGD over the dataset. Deterministic given the seed.
pub fn train(
    dataset: &[PrefSample<'_>],
    config: &PrefConfig,
    mut params: PrefModelParams,
    seed: u64,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    config.validate()?;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng(derive_seed_indexed(seed, "prefnet/epoch", epoch as u64));
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<PrefSample> = chunk.iter().map(|&i| dataset[i]).collect();
            let (loss, grads) = loss_and_grad(&batch, &params)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("prefnet epoch {epoch}"),
                    value: loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            for ((_, tensor), grad) in params.named_tensors_mut().into_iter().zip(&grads) {
                tensor.scaled_add(-config.lr, grad);
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::info!("prefnet epoch {epoch}: loss {mean:.6}");
        curve.push((epoch, mean));
    }
    Ok(TrainOutcome { params, curve })
}

/// Product-aware user embeddings: row u is e_u|t for (user u, product).
pub fn extract_user_product_embeddings(
    users: &[UserProfile],
    product: &Product,
    params: &PrefModelParams,
) -> Result<Array2<f64>> {
    let d = params.dim();
    let mut out = Array2::zeros((users.len(), d));
    for (i, user) in users.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = PrefVars::bind(&mut tape, params);
        let title = tape.leaf(&product.title_tokens);
        let title_proj = tape.matmul(title, vars.proj_text);
        let e_u = user_embedding_var(&mut tape, &vars, &user.attributes)?;
        let (e_ut, _) = cross_attention_var(&mut tape, &vars.ca1, e_u, title_proj);
        out.row_mut(i).assign(&tape.value(e_ut).row(0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::simworld::{build_world, sample_click_log, AffinityKind, WorldConfig};
    use ndarray::arr2;

    fn small_config() -> PrefConfig {
        PrefConfig {
            dim: 8,
            attr_dim: 4,
            lr: 0.1,
            epochs: 2,
            batch_size: 4,
            ..PrefConfig::default()
        }
    }

    fn small_world() -> World {
        let config = WorldConfig {
            n_users: 6,
            attribute_cardinalities: vec![6, 4],
            n_categories: 1,
            n_products: 2,
            creatives_per_product: 3,
            n_styles: 3,
            n_segments: 2,
            title_token_count: 3,
            style_token_count: 3,
            raw_dim: 5,
            affinity: AffinityKind::Reversed,
            ..WorldConfig::default()
        };
        build_world(&config, 3).unwrap()
    }

    #[test]
    fn encode_user_zero_params_is_zero() {
        let mut params = PrefModelParams::init(&[4, 5], 3, &small_config(), 1).unwrap();
        for (_, t) in params.named_tensors_mut() {
            t.fill(0.0);
        }
        let e = encode_user(&[1, 2], &params).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_user_is_a_pure_function_of_attributes() {
        let params = PrefModelParams::init(&[4, 5], 3, &small_config(), 1).unwrap();
        let a = encode_user(&[2, 3], &params).unwrap();
        let b = encode_user(&[2, 3], &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_user_identity_mlp_returns_table_row() {
        // One attribute; d = d'. Power-of-two scaling through tanh's exact
        // linear regime makes the MLP an exact identity.
        let config = PrefConfig {
            dim: 4,
            attr_dim: 4,
            ..small_config()
        };
        let mut params = PrefModelParams::init(&[5], 3, &config, 1).unwrap();
        let down = 2.0_f64.powi(-60);
        let up = 2.0_f64.powi(60);
        params.user_w1 = Array2::from_diag_elem(4, down);
        params.user_b1.fill(0.0);
        params.user_w2 = Array2::from_diag_elem(4, up);
        params.user_b2.fill(0.0);
        let e = encode_user(&[3], &params).unwrap();
        assert_eq!(
            e.row(0).to_owned(),
            params.attr_tables[0].row(3).to_owned()
        );
    }

    #[test]
    fn encode_user_out_of_range_code_is_a_lookup_error() {
        let params = PrefModelParams::init(&[4, 5], 3, &small_config(), 1).unwrap();
        assert!(matches!(
            encode_user(&[4, 0], &params),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let params = PrefModelParams::init(&[4], 5, &small_config(), 7).unwrap();
        let query = arr2(&[[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]]);
        let keys = Array2::from_shape_fn((1, 8), |(_, c)| 0.1 * c as f64);
        let out = cross_attention(&query, &keys, &params.ca1).unwrap();
        assert_eq!(out.weights.dim(), (1, 1));
        assert_eq!(out.weights[(0, 0)], 1.0);
        let expected = &query + &keys.dot(&params.ca1.wv);
        for (a, b) in out.output.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_makes_attention_an_identity() {
        let mut params = PrefModelParams::init(&[4], 5, &small_config(), 7).unwrap();
        params.ca1.wv.fill(0.0);
        let query = arr2(&[[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]]);
        let keys = Array2::from_shape_fn((3, 8), |(r, c)| 0.1 * (r + c) as f64);
        let out = cross_attention(&query, &keys, &params.ca1).unwrap();
        assert_eq!(out.output, query);
    }

    #[test]
    fn attention_matches_hand_formula_on_small_fixture() {
        // d=2, m=3; evaluate the softmax formula with straight loops.
        let ca = CrossAttentionParams {
            wq: arr2(&[[0.5, -0.25], [1.0, 0.75]]),
            wk: arr2(&[[0.2, 0.4], [-0.6, 0.3]]),
            wv: arr2(&[[1.5, -0.5], [0.25, 1.0]]),
        };
        let query = arr2(&[[0.8, -0.3]]);
        let keys = arr2(&[[0.1, 0.9], [-0.4, 0.2], [0.7, -0.6]]);
        let got = cross_attention(&query, &keys, &ca).unwrap();

        let q = [
            0.8 * 0.5 + -0.3 * 1.0,
            0.8 * -0.25 + -0.3 * 0.75,
        ];
        let mut scores = [0.0; 3];
        for (m, key) in keys.rows().into_iter().enumerate() {
            let k = [key[0] * 0.2 + key[1] * -0.6, key[0] * 0.4 + key[1] * 0.3];
            scores[m] = (q[0] * k[0] + q[1] * k[1]) / 2.0_f64.sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut attended = [0.0; 2];
        for (m, key) in keys.rows().into_iter().enumerate() {
            let v = [key[0] * 1.5 + key[1] * 0.25, key[0] * -0.5 + key[1] * 1.0];
            attended[0] += weights[m] * v[0];
            attended[1] += weights[m] * v[1];
        }
        let expected = [0.8 + attended[0], -0.3 + attended[1]];
        for i in 0..2 {
            assert!((got.output[(0, i)] - expected[i]).abs() < 1e-12);
        }
        for (w, e) in got.weights.iter().zip(&weights) {
            assert!((w - e).abs() < 1e-12);
        }
        assert!((got.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant_in_keys() {
        let params = PrefModelParams::init(&[4], 5, &small_config(), 7).unwrap();
        let query = arr2(&[[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]]);
        let keys = Array2::from_shape_fn((4, 8), |(r, c)| ((r * 13 + c * 7) % 5) as f64 * 0.2);
        let base = cross_attention(&query, &keys, &params.ca1).unwrap();
        let permuted_rows: Vec<Vec<f64>> = [2usize, 0, 3, 1]
            .iter()
            .map(|&r| keys.row(r).to_vec())
            .collect();
        let permuted = crate::io::matrix_from_rows(&permuted_rows).unwrap();
        let other = cross_attention(&query, &permuted, &params.ca1).unwrap();
        for (a, b) in base.output.iter().zip(other.output.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_zero_params_gives_even_odds() {
        let world = small_world();
        let mut params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 1).unwrap();
        for (_, t) in params.named_tensors_mut() {
            t.fill(0.0);
        }
        let sample = PrefSample {
            user: &world.users[0],
            product: &world.products[0],
            creative: &world.creatives[0],
            label: 1,
        };
        let trace = forward(&sample, &params).unwrap();
        assert_eq!(trace.y_hat, 0.0);
        assert_eq!(predict_prob(&sample, &params).unwrap(), 0.5);
    }

    #[test]
    fn heads_decompose_additively() {
        let world = small_world();
        let params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 5).unwrap();
        let sample = PrefSample {
            user: &world.users[1],
            product: &world.products[1],
            creative: &world.creatives[4],
            label: 0,
        };
        let trace = forward(&sample, &params).unwrap();

        // Zeroing the title head removes exactly its contribution.
        let mut no_title = params.clone();
        no_title.head_t_w.fill(0.0);
        no_title.head_t_b.fill(0.0);
        let trace_no_title = forward(&sample, &no_title).unwrap();
        let contribution =
            trace.e_t.dot(&params.head_t_w)[(0, 0)] + params.head_t_b[(0, 0)];
        assert!((trace.y_hat - trace_no_title.y_hat - contribution).abs() < 1e-12);

        // Zeroing the image and interaction heads leaves only the title branch.
        let mut only_title = params.clone();
        only_title.head_v_w.fill(0.0);
        only_title.head_v_b.fill(0.0);
        only_title.head_uc_w.fill(0.0);
        only_title.head_uc_b.fill(0.0);
        let trace_only_title = forward(&sample, &only_title).unwrap();
        assert!((trace_only_title.y_hat - contribution).abs() < 1e-12);
    }

    /// Straight-line re-implementation of the whole forward pass with plain
    /// loops; the oracle for the tape-built graph.
    fn straight_line_forward(sample: &PrefSample<'_>, params: &PrefModelParams) -> f64 {
        let d = params.dim();
        let mv = |x: &[f64], w: &Array2<f64>| -> Vec<f64> {
            let mut out = vec![0.0; w.ncols()];
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..w.ncols() {
                    out[j] += xi * w[(i, j)];
                }
            }
            out
        };
        // e_u
        let mut concat = Vec::new();
        for (table, &code) in params.attr_tables.iter().zip(&sample.user.attributes) {
            concat.extend(table.row(code as usize).iter().copied());
        }
        let mut h = mv(&concat, &params.user_w1);
        for (j, v) in h.iter_mut().enumerate() {
            *v = (*v + params.user_b1[(0, j)]).tanh();
        }
        let mut e_u = mv(&h, &params.user_w2);
        for (j, v) in e_u.iter_mut().enumerate() {
            *v += params.user_b2[(0, j)];
        }
        // Projections and pooled branches.
        let proj = |tokens: &Array2<f64>, w: &Array2<f64>| -> Vec<Vec<f64>> {
            tokens
                .rows()
                .into_iter()
                .map(|row| mv(&row.to_vec(), w))
                .collect()
        };
        let t_proj = proj(&sample.product.title_tokens, &params.proj_text);
        let v_proj = proj(&sample.creative.style_tokens, &params.proj_image);
        let pool = |rows: &[Vec<f64>]| -> Vec<f64> {
            let mut out = vec![0.0; rows[0].len()];
            for row in rows {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter().map(|v| v / rows.len() as f64).collect()
        };
        let e_t = pool(&t_proj);
        let e_v = pool(&v_proj);
        // Cross-attention with residual.
        let attend = |query: &[f64], keys: &[Vec<f64>], ca: &CrossAttentionParams| -> Vec<f64> {
            let q = mv(query, &ca.wq);
            let mut scores = Vec::new();
            for key in keys {
                let k = mv(key, &ca.wk);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                scores.push(dot / (d as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut out = query.to_vec();
            for (key, e) in keys.iter().zip(&exps) {
                let v = mv(key, &ca.wv);
                for (o, vi) in out.iter_mut().zip(&v) {
                    *o += e / z * vi;
                }
            }
            out
        };
        let e_ut = attend(&e_u, &t_proj, &params.ca1);
        let e_uc = attend(&e_ut, &v_proj, &params.ca2);
        let head = |x: &[f64], w: &Array2<f64>, b: &Array2<f64>| -> f64 {
            x.iter().enumerate().map(|(i, v)| v * w[(i, 0)]).sum::<f64>() + b[(0, 0)]
        };
        head(&e_t, &params.head_t_w, &params.head_t_b)
            + head(&e_v, &params.head_v_w, &params.head_v_b)
            + head(&e_uc, &params.head_uc_w, &params.head_uc_b)
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let world = small_world();
        let params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 11).unwrap();
        for (u, c) in [(0usize, 0usize), (2, 3), (5, 5)] {
            let creative = &world.creatives[c];
            let sample = PrefSample {
                user: &world.users[u],
                product: &world.products[creative.product_id as usize],
                creative,
                label: 1,
            };
            let trace = forward(&sample, &params).unwrap();
            let oracle = straight_line_forward(&sample, &params);
            assert!(
                (trace.y_hat - oracle).abs() < 1e-10,
                "{} vs {}",
                trace.y_hat,
                oracle
            );
        }
    }

    #[test]
    fn bce_loss_at_zero_logit_is_ln2() {
        let world = small_world();
        let mut params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 1).unwrap();
        for (_, t) in params.named_tensors_mut() {
            t.fill(0.0);
        }
        let sample = PrefSample {
            user: &world.users[0],
            product: &world.products[0],
            creative: &world.creatives[0],
            label: 1,
        };
        let (loss, _) = loss_and_grad(&[sample], &params).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_changes_nothing() {
        let world = small_world();
        let params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 2).unwrap();
        let batch: Vec<PrefSample> = world.creatives[..3]
            .iter()
            .map(|creative| PrefSample {
                user: &world.users[0],
                product: &world.products[creative.product_id as usize],
                creative,
                label: 1,
            })
            .collect();
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().copied());
        let (l1, g1) = loss_and_grad(&batch, &params).unwrap();
        let (l2, g2) = loss_and_grad(&doubled, &params).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let world = small_world();
        let config = small_config();
        let params = PrefModelParams::init(&[6, 4], world.config.raw_dim, &config, 13).unwrap();
        let batch: Vec<PrefSample> = world
            .creatives
            .iter()
            .take(4)
            .enumerate()
            .map(|(i, creative)| PrefSample {
                user: &world.users[i % world.users.len()],
                product: &world.products[creative.product_id as usize],
                creative,
                label: (i % 2) as u8,
            })
            .collect();

        let (_, analytic) = loss_and_grad(&batch, &params).unwrap();
        let tensors: Vec<Array2<f64>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();

        let loss_fn = |ps: &[Array2<f64>]| {
            let mut p = params.clone();
            for ((_, t), src) in p.named_tensors_mut().into_iter().zip(ps) {
                t.assign(src);
            }
            let (loss, _) = loss_and_grad(&batch, &p).unwrap();
            loss
        };
        let mut r = rng(99);
        let report = gradcheck::check(&tensors, &analytic, loss_fn, 150, 1e-5, &mut r);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} (names {:?})",
            report.max_rel_err,
            names.len()
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let world = small_world();
        let log = sample_click_log(&world, 1, 5).unwrap();
        let samples = samples_from_log(&world, &log).unwrap();
        let config = PrefConfig {
            lr: 0.0,
            epochs: 1,
            ..small_config()
        };
        let params = PrefModelParams::init(&[6, 4], world.config.raw_dim, &config, 3).unwrap();
        let outcome = train(&samples, &config, params.clone(), 4).unwrap();
        assert_eq!(outcome.params, params);
    }

    #[test]
    fn training_is_deterministic() {
        let world = small_world();
        let log = sample_click_log(&world, 1, 5).unwrap();
        let samples = samples_from_log(&world, &log).unwrap();
        let config = small_config();
        let init = PrefModelParams::init(&[6, 4], world.config.raw_dim, &config, 3).unwrap();
        let a = train(&samples, &config, init.clone(), 4).unwrap();
        let b = train(&samples, &config, init, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn extraction_matches_forward_traces() {
        let world = small_world();
        let params =
            PrefModelParams::init(&[6, 4], world.config.raw_dim, &small_config(), 21).unwrap();
        let product = &world.products[1];
        let rows = extract_user_product_embeddings(&world.users, product, &params).unwrap();
        // Any creative of the product yields the same e_u|t.
        let creative = world.creatives_of(product.product_id).next().unwrap();
        for (i, user) in world.users.iter().enumerate() {
            let sample = PrefSample {
                user,
                product,
                creative,
                label: 0,
            };
            let trace = forward(&sample, &params).unwrap();
            for (a, b) in rows.row(i).iter().zip(trace.e_ut.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Identical users get identical rows.
        let mut users = vec![world.users[0].clone(), world.users[0].clone()];
        users[1].user_id = 99;
        let rows = extract_user_product_embeddings(&users, product, &params).unwrap();
        assert_eq!(rows.row(0), rows.row(1));
    }

    #[test]
    fn archive_roundtrip_preserves_params() {
        let params = PrefModelParams::init(&[4, 5, 6], 7, &small_config(), 31).unwrap();
        let archive = params.to_archive("train-pref", "hash");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefnet.tensors.jsonl");
        archive.save(&path).unwrap();
        let back =
            PrefModelParams::from_archive(&TensorArchive::load(&path).unwrap()).unwrap();
        assert_eq!(back, params);
    }
}
