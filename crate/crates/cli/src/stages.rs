//! Stage runners: each stage checks its prerequisite artifacts, computes,
//! and writes its outputs atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cohort::aligner::{
    align, build_tuples, generate, pretrain_policy, DecodeMode, Judge, JudgeKind, PolicyContext,
    PolicyParams, PreferenceTuple, PromptSeq,
};
use cohort::archive::{config_hash, TensorArchive};
use cohort::grm::{
    build_oracle_pairs, build_pairs, grm_train, pooled, split_pairs, Conditioning, GrmParams,
    LabelSource, PrefPairSample,
};
use cohort::grouping::{encode_group, group_product, index_groups, GroupIndex, GroupRepresentation};
use cohort::io::{atomic_write, read_jsonl, write_jsonl};
use cohort::metrics::{
    auroc, cross_group_ndcg, ctr_table_from_gaip, pair_accuracy, simulated_ctr, EvalReport,
};
use cohort::prefnet::{
    extract_user_product_embeddings, predict_prob, samples_from_log, train, PrefModelParams,
    PrefSample,
};
use cohort::seed::{derive_seed, rng};
use cohort::simworld::{build_world, export_gaip, sample_click_log, ClickEvent, GaipRecord, World};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DecodePolicy, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    /// A prerequisite artifact is missing; exit status 2.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    /// The configuration is invalid; exit status 3.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Core(#[from] cohort::Error),
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::MissingArtifact(_) => 2,
            StageError::InvalidConfig(_) => 3,
            StageError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainPref,
    Cluster,
    TrainGrm,
    PretrainPolicy,
    Align,
    Eval,
}

impl Stage {
    pub fn all() -> [Stage; 7] {
        [
            Stage::GenData,
            Stage::TrainPref,
            Stage::Cluster,
            Stage::TrainGrm,
            Stage::PretrainPolicy,
            Stage::Align,
            Stage::Eval,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainPref => "train-pref",
            Stage::Cluster => "cluster",
            Stage::TrainGrm => "train-grm",
            Stage::PretrainPolicy => "pretrain-policy",
            Stage::Align => "align",
            Stage::Eval => "eval",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gen-data" => Ok(Stage::GenData),
            "train-pref" => Ok(Stage::TrainPref),
            "cluster" => Ok(Stage::Cluster),
            "train-grm" => Ok(Stage::TrainGrm),
            "pretrain-policy" => Ok(Stage::PretrainPolicy),
            "align" => Ok(Stage::Align),
            "eval" => Ok(Stage::Eval),
            other => Err(format!(
                "unknown stage {other}; expected one of {}",
                Stage::all().map(|s| s.name()).join(", ")
            )),
        }
    }
}

/// Artifact layout under one output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    out: PathBuf,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.out
    }

    pub fn users(&self) -> PathBuf {
        self.out.join("users.jsonl")
    }
    pub fn products(&self) -> PathBuf {
        self.out.join("products.jsonl")
    }
    pub fn creatives(&self) -> PathBuf {
        self.out.join("creatives.jsonl")
    }
    pub fn clicks(&self) -> PathBuf {
        self.out.join("clicks.jsonl")
    }
    pub fn gaip(&self) -> PathBuf {
        self.out.join("gaip.jsonl")
    }
    pub fn groups(&self) -> PathBuf {
        self.out.join("groups.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.out.join("pairs.jsonl")
    }
    pub fn tuples(&self) -> PathBuf {
        self.out.join("tuples.jsonl")
    }
    pub fn prefnet(&self) -> PathBuf {
        self.out.join("prefnet.tensors.jsonl")
    }
    pub fn grm(&self) -> PathBuf {
        self.out.join("grm.tensors.jsonl")
    }
    pub fn policy_ref(&self) -> PathBuf {
        self.out.join("policy_ref.tensors.jsonl")
    }
    pub fn policy_group(&self) -> PathBuf {
        self.out.join("policy_group.tensors.jsonl")
    }
    pub fn policy_nogroup(&self) -> PathBuf {
        self.out.join("policy_nogroup.tensors.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.out.join("config.resolved.toml")
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf, StageError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(StageError::MissingArtifact(
                path.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("artifact")
                    .to_string(),
            ))
        }
    }
}

/// One record per preference tuple in tuples.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TupleRecord {
    product_id: u32,
    group_index: u32,
    conditioning: String,
    y_w: Vec<u32>,
    y_l: Vec<u32>,
}

/// Run a single stage against the output directory.
pub fn run_stage(stage: Stage, config: &PipelineConfig, out: &Path) -> Result<(), StageError> {
    config.validate()?;
    let artifacts = Artifacts::new(out);
    std::fs::create_dir_all(out).map_err(cohort::Error::from)?;
    atomic_write(
        &artifacts.resolved_config(),
        config.resolved_toml().as_bytes(),
    )
    .map_err(StageError::Core)?;

    log::info!("stage {} starting", stage.name());
    let started = std::time::Instant::now();
    let result = match stage {
        Stage::GenData => run_gen_data(config, &artifacts),
        Stage::TrainPref => run_train_pref(config, &artifacts),
        Stage::Cluster => run_cluster(config, &artifacts),
        Stage::TrainGrm => run_train_grm(config, &artifacts),
        Stage::PretrainPolicy => run_pretrain_policy(config, &artifacts),
        Stage::Align => run_align(config, &artifacts),
        Stage::Eval => run_eval(config, &artifacts),
    };
    if result.is_ok() {
        log::info!("stage {} done in {:?}", stage.name(), started.elapsed());
    }
    result
}

fn world_of(config: &PipelineConfig) -> Result<World, StageError> {
    Ok(build_world(&config.world, config.seed)?)
}

fn hash_of(config: &PipelineConfig) -> String {
    config_hash(&config.resolved_toml())
}

fn run_gen_data(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let world = world_of(config)?;
    let log = sample_click_log(&world, config.world.exposures_per_pair, config.seed)?;
    write_jsonl(&artifacts.users(), &world.users)?;
    write_jsonl(&artifacts.products(), &world.products)?;
    write_jsonl(&artifacts.creatives(), &world.creatives)?;
    write_jsonl(&artifacts.clicks(), &log)?;
    Ok(())
}

/// Deterministic train/holdout index split over the click log.
fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng(derive_seed(seed, "prefnet/holdout")));
    let n_hold = ((n as f64) * fraction) as usize;
    let (hold, train) = indices.split_at(n_hold);
    (train.to_vec(), hold.to_vec())
}

fn run_train_pref(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let clicks_path = artifacts.require(artifacts.clicks())?;
    let world = world_of(config)?;
    let log: Vec<ClickEvent> = read_jsonl(&clicks_path)?;
    let samples = samples_from_log(&world, &log)?;
    let (train_idx, _) = holdout_split(samples.len(), config.prefnet.holdout_fraction, config.seed);
    let train_set: Vec<PrefSample> = train_idx.iter().map(|&i| samples[i]).collect();
    let init = PrefModelParams::init(
        &config.world.attribute_cardinalities,
        config.world.raw_dim,
        &config.prefnet,
        config.seed,
    )?;
    let outcome = train(&train_set, &config.prefnet, init, config.seed)?;
    outcome
        .params
        .to_archive("train-pref", &hash_of(config))
        .save(&artifacts.prefnet())?;
    Ok(())
}

fn load_groups(artifacts: &Artifacts) -> Result<GroupIndex, StageError> {
    let path = artifacts.require(artifacts.groups())?;
    let groups: Vec<GroupRepresentation> = read_jsonl(&path)?;
    Ok(index_groups(groups))
}

fn run_cluster(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let prefnet_path = artifacts.require(artifacts.prefnet())?;
    let clicks_path = artifacts.require(artifacts.clicks())?;
    let world = world_of(config)?;
    let params = PrefModelParams::from_archive(&TensorArchive::load(&prefnet_path)?)?;
    let log: Vec<ClickEvent> = read_jsonl(&clicks_path)?;

    let user_ids: Vec<u32> = world.users.iter().map(|u| u.user_id).collect();
    let mut groups = Vec::new();
    for product in &world.products {
        let embeddings = extract_user_product_embeddings(&world.users, product, &params)?;
        groups.extend(group_product(
            product.product_id,
            &embeddings.view(),
            &user_ids,
            &config.grouping,
            config.seed,
        )?);
    }
    write_jsonl(&artifacts.groups(), &groups)?;
    let gaip = export_gaip(&world, &log, &groups, config.world.min_exposure)?;
    write_jsonl(&artifacts.gaip(), &gaip)?;
    Ok(())
}

fn run_train_grm(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let gaip_path = artifacts.require(artifacts.gaip())?;
    let world = world_of(config)?;
    let groups = load_groups(artifacts)?;
    let records: Vec<GaipRecord> = read_jsonl(&gaip_path)?;
    let pairs = match config.grm.label_source {
        LabelSource::Empirical => build_pairs(&records),
        LabelSource::Oracle => build_oracle_pairs(&world, &groups)?,
    };
    write_jsonl(&artifacts.pairs(), &pairs)?;
    let (train_pairs, _) = split_pairs(&pairs, config.grm.holdout_fraction, config.seed);
    let rep = groups
        .values()
        .next()
        .ok_or_else(|| StageError::Core(cohort::Error::Precondition("no groups".into())))?;
    let init = GrmParams::init(
        rep.flattened().len(),
        config.grouping.group_embed_dim,
        config.grouping.encoder_hidden,
        config.world.raw_dim,
        &config.grm,
        config.seed,
    )?;
    let outcome = grm_train(
        &train_pairs,
        &world,
        &groups,
        &config.grm,
        init,
        Conditioning::Group,
    )?;
    outcome
        .params
        .to_archive("train-grm", &hash_of(config))
        .save(&artifacts.grm())?;
    Ok(())
}

/// Group-conditioned policy context: trained group token plus pooled title.
fn group_context(
    world: &World,
    grm: &GrmParams,
    group: &GroupRepresentation,
) -> Result<PolicyContext, StageError> {
    let product = world.product(group.product_id)?;
    let e_g = encode_group(group, &grm.encoder)?;
    Ok(PolicyContext {
        group_embed: e_g.row(0).to_vec(),
        title_pooled: pooled(&product.title_tokens).row(0).to_vec(),
    })
}

fn run_pretrain_policy(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let grm_path = artifacts.require(artifacts.grm())?;
    let world = world_of(config)?;
    let groups = load_groups(artifacts)?;
    let grm = GrmParams::from_archive(&TensorArchive::load(&grm_path)?)?;

    // Behaviour cloning on every style template for every group context:
    // the pretrained policy spreads mass over styles and ignores the group.
    let mut dataset = Vec::new();
    for group in groups.values() {
        let context = group_context(&world, &grm, group)?;
        for style in 0..config.world.n_styles as u32 {
            let template =
                PromptSeq::template(style, config.aligner.prompt_len, config.aligner.vocab)?;
            dataset.push((context.clone(), template));
        }
    }
    let context_dim = config.grouping.group_embed_dim + config.world.raw_dim;
    let init = PolicyParams::init(context_dim, &config.aligner, config.seed)?;
    let outcome = pretrain_policy(&dataset, &config.aligner, init)?;
    outcome
        .params
        .to_archive("pretrain-policy", &hash_of(config))
        .save(&artifacts.policy_ref())?;
    Ok(())
}

fn run_align(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let policy_path = artifacts.require(artifacts.policy_ref())?;
    let grm_path = artifacts.require(artifacts.grm())?;
    let world = world_of(config)?;
    let groups = load_groups(artifacts)?;
    let grm = GrmParams::from_archive(&TensorArchive::load(&grm_path)?)?;
    let reference = PolicyParams::from_archive(&TensorArchive::load(&policy_path)?)?;
    let judge = match config.aligner.judge {
        JudgeKind::Grm => Judge::Grm(&grm),
        JudgeKind::Oracle => Judge::Oracle,
    };

    let mut records = Vec::new();
    let mut tuples_group: Vec<PreferenceTuple> = Vec::new();
    let mut tuples_nogroup: Vec<PreferenceTuple> = Vec::new();
    for group in groups.values() {
        let context = group_context(&world, &grm, group)?;
        let conditioned = build_tuples(
            &world,
            group,
            &context,
            &reference,
            &judge,
            config.aligner.n_candidates,
            world.seed,
            derive_seed(config.seed, "tuples/group"),
        )?;
        let agnostic = build_tuples(
            &world,
            group,
            &context.without_group(),
            &reference,
            &judge,
            config.aligner.n_candidates,
            world.seed,
            derive_seed(config.seed, "tuples/nogroup"),
        )?;
        for (conditioning, tuples) in [("group", &conditioned), ("agnostic", &agnostic)] {
            records.extend(tuples.iter().map(|t| TupleRecord {
                product_id: t.product_id,
                group_index: t.group_index,
                conditioning: conditioning.to_string(),
                y_w: t.y_w.tokens.clone(),
                y_l: t.y_l.tokens.clone(),
            }));
        }
        tuples_group.extend(conditioned);
        tuples_nogroup.extend(agnostic);
    }
    write_jsonl(&artifacts.tuples(), &records)?;

    let aligned = align(&tuples_group, &config.aligner, &reference)?;
    aligned
        .params
        .to_archive("align", &hash_of(config))
        .save(&artifacts.policy_group())?;
    let agnostic = align(&tuples_nogroup, &config.aligner, &reference)?;
    agnostic
        .params
        .to_archive("align", &hash_of(config))
        .save(&artifacts.policy_nogroup())?;
    Ok(())
}

fn run_eval(config: &PipelineConfig, artifacts: &Artifacts) -> Result<(), StageError> {
    let clicks_path = artifacts.require(artifacts.clicks())?;
    let prefnet_path = artifacts.require(artifacts.prefnet())?;
    let gaip_path = artifacts.require(artifacts.gaip())?;
    let pairs_path = artifacts.require(artifacts.pairs())?;
    let grm_path = artifacts.require(artifacts.grm())?;
    let ref_path = artifacts.require(artifacts.policy_ref())?;
    let group_path = artifacts.require(artifacts.policy_group())?;
    let nogroup_path = artifacts.require(artifacts.policy_nogroup())?;

    let world = world_of(config)?;
    let groups = load_groups(artifacts)?;
    let grm = GrmParams::from_archive(&TensorArchive::load(&grm_path)?)?;

    // Preference-model quality on held-out clicks.
    let log: Vec<ClickEvent> = read_jsonl(&clicks_path)?;
    let samples = samples_from_log(&world, &log)?;
    let (_, hold_idx) = holdout_split(samples.len(), config.prefnet.holdout_fraction, config.seed);
    let prefnet = PrefModelParams::from_archive(&TensorArchive::load(&prefnet_path)?)?;
    let mut scores = Vec::with_capacity(hold_idx.len());
    let mut labels = Vec::with_capacity(hold_idx.len());
    for &i in &hold_idx {
        scores.push(predict_prob(&samples[i], &prefnet)?);
        labels.push(samples[i].label);
    }
    let auroc_value = auroc(&scores, &labels)?;

    // Ranking divergence between groups.
    let records: Vec<GaipRecord> = read_jsonl(&gaip_path)?;
    let ndcg = cross_group_ndcg(&ctr_table_from_gaip(&records))?;

    // Reward-model quality on held-out pairs.
    let pairs: Vec<PrefPairSample> = read_jsonl(&pairs_path)?;
    let (_, hold_pairs) = split_pairs(&pairs, config.grm.holdout_fraction, config.seed);
    let accuracy = pair_accuracy(&world, &groups, &hold_pairs, &grm, Conditioning::Group)?;

    // Simulated per-group CTR for all three policies.
    let decode = match config.eval.policy_decode {
        DecodePolicy::Argmax => DecodeMode::Argmax,
        DecodePolicy::Sample => DecodeMode::Sample,
    };
    let mut ctr_by_policy = BTreeMap::new();
    for (name, path, conditioned) in [
        ("pretrained", &ref_path, true),
        ("group_agnostic_dpo", &nogroup_path, false),
        ("group_dpo", &group_path, true),
    ] {
        let policy = PolicyParams::from_archive(&TensorArchive::load(path)?)?;
        let mut policy_map = BTreeMap::new();
        for (key, group) in &groups {
            let context = group_context(&world, &grm, group)?;
            let context = if conditioned {
                context
            } else {
                context.without_group()
            };
            let prompt = generate(
                &context,
                &policy,
                decode,
                derive_seed(config.seed, &format!("eval/{name}/{key:?}")),
            )?;
            policy_map.insert(*key, prompt);
        }
        let ctr = simulated_ctr(&world, &groups, &policy_map, world.seed)?;
        ctr_by_policy.insert(name.to_string(), ctr);
    }

    let report = EvalReport {
        ndcg_at_5_mean: ndcg,
        auroc: auroc_value,
        pair_accuracy: accuracy,
        ctr_by_policy,
        n_products: world.products.len(),
        n_pairs: pairs.len(),
    };
    let mut buf = serde_json::to_vec_pretty(&report).map_err(cohort::Error::from)?;
    buf.push(b'\n');
    atomic_write(&artifacts.report(), &buf)?;
    Ok(())
}

/// Run every stage in order and return the final report.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<EvalReport, StageError> {
    for stage in Stage::all() {
        run_stage(stage, config, out)?;
    }
    let text = std::fs::read_to_string(Artifacts::new(out).report()).map_err(cohort::Error::from)?;
    let report: EvalReport = serde_json::from_str(&text).map_err(cohort::Error::from)?;
    Ok(report)
}
