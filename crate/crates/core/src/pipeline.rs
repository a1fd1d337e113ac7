//! Model bundles, ablation modes, the pretraining and instruction-tuning
//! loops, and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::read_shard;
use crate::encoder::{EncoderConfig, HyperTrans};
use crate::error::{Error, Result};
use crate::gformer::{GFormer, GFormerConfig};
use crate::hypergraph::HyperGraph;
use crate::numerics::{checkpoint, Graph, ParamId, ParamStore, Tensor, Trainable, Var};
use crate::toylm::{KvCache, Tokenizer, ToyLm, ToyLmConfig};
use crate::train::{batch_at, lr_schedule, train_step, Adam, AdamConfig, LossLog, LossMode, TrainConfig, TuningMode};

pub const PROMPT_PREFIX: &str = "prompt.";
const STEP_KEY: &str = "train.step";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Pretrained encoder and former, soft prompt from the graph.
    #[default]
    Full,
    /// Same path, fresh encoder and former.
    NoPretrain,
    /// Queries pass through the former's self-attention only.
    NoGnn,
    /// Mean node embedding through one linear map.
    NoGformer,
    /// Free soft-prompt rows, no structure input.
    PromptTuning,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoPretrain,
        Ablation::NoGnn,
        Ablation::NoGformer,
        Ablation::PromptTuning,
    ];

    pub fn uses_pretrained(self) -> bool {
        !matches!(self, Ablation::NoPretrain | Ablation::PromptTuning)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Sizes that train in minutes on one core.
    #[default]
    Desk,
    /// Desk model with 2048-token contexts and rank-32 adapters.
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub encoder: EncoderConfig,
    pub gformer: GFormerConfig,
    pub lm: ToyLmConfig,
    pub ablation: Ablation,
    pub tuning: TuningMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Rows of the free soft prompt in the prompt-tuning mode.
    pub prompt_tokens: usize,
    /// Feed the serialized structure to the language model before the
    /// question.
    pub structure_text: bool,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl BundleConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            encoder: EncoderConfig::default(),
            gformer: GFormerConfig::default(),
            lm: ToyLmConfig::default(),
            ablation: Ablation::Full,
            tuning: TuningMode::FreezeLlm,
            lora_rank: 4,
            lora_alpha: 8.0,
            prompt_tokens: 10,
            structure_text: true,
        };
        match p {
            Preset::Desk => desk,
            Preset::Long => {
                let mut c = desk;
                c.lora_rank = 32;
                c.lora_alpha = 64.0;
                c.lm.max_len = 2048;
                c.lm.max_new = 1024;
                c.lm.max_positions = 4096;
                c.gformer.max_text = 2048;
                c
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gformer.validate()?;
        self.lm.validate()?;
        if self.gformer.node_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "gformer.node_dim {} != encoder.dim {}",
                self.gformer.node_dim, self.encoder.dim
            )));
        }
        if self.gformer.lm_dim != self.lm.dim {
            return Err(Error::Config(format!(
                "gformer.lm_dim {} != lm.dim {}",
                self.gformer.lm_dim, self.lm.dim
            )));
        }
        if self.ablation == Ablation::PromptTuning && self.prompt_tokens == 0 {
            return Err(Error::Config("prompt tuning needs prompt_tokens ≥ 1".into()));
        }
        Ok(())
    }
}

/// The graph side, the language model and the optional free prompt, all
/// reading from one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: HyperTrans,
    pub gformer: GFormer,
    pub lm: ToyLm,
    pub prompt: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub cfg: BundleConfig,
    pub models: Models,
    pub store: ParamStore,
}

/// One instruction-tuning or evaluation example.
#[derive(Clone, Debug)]
pub struct QaSample {
    pub id: String,
    pub template: u8,
    pub graph: Arc<HyperGraph>,
    pub structure: String,
    pub question: String,
    pub answer: String,
}

impl Bundle {
    pub fn new(cfg: BundleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = HyperTrans::new(cfg.encoder.clone(), &mut store)?;
        let gformer = GFormer::new(cfg.gformer.clone(), &mut store)?;
        let mut lm = ToyLm::new(cfg.lm.clone(), &mut store)?;
        if cfg.tuning == TuningMode::Lora {
            lm.apply_lora(&mut store, cfg.lora_rank, cfg.lora_alpha)?;
        }
        let prompt = if cfg.ablation == Ablation::PromptTuning {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::hash::mix(cfg.lm.seed, 0x9f));
            let t = Tensor::randn(cfg.prompt_tokens, cfg.lm.dim, 1.0, &mut rng);
            Some(store.insert(format!("{PROMPT_PREFIX}tokens"), t)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            models: Models {
                encoder,
                gformer,
                lm,
                prompt,
            },
            store,
        })
    }

    /// Builds the bundle for `cfg` and overwrites every parameter present in
    /// `saved` under `prefixes`. Parameters of the bundle that match a prefix
    /// but are missing from `saved` are an error.
    pub fn load_params(&mut self, saved: &ParamStore, prefixes: &[&str]) -> Result<()> {
        for (_, name, _) in self.store.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) && saved.id(name).is_none() {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
        }
        for p in prefixes {
            self.store.load_matching(saved, p)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Parameters that shape the soft prompt in the current ablation mode.
    pub fn prompt_side_params(&self) -> Vec<ParamId> {
        let m = &self.models;
        match self.cfg.ablation {
            Ablation::Full | Ablation::NoPretrain => {
                let mut v = m.encoder.params();
                v.extend(m.gformer.prompt_params());
                v
            }
            Ablation::NoGnn => {
                let g = &m.gformer;
                let mut v = vec![g.query];
                v.extend(g.emb_ln.params());
                for l in &g.layers {
                    v.extend(l.self_attn.params());
                    v.extend(l.ln_self.params());
                    v.extend(l.ffn.params());
                    v.extend(l.ln_ffn.params());
                }
                v.extend(g.fc.params());
                v
            }
            Ablation::NoGformer => {
                let mut v = m.encoder.params();
                v.extend(m.gformer.node_fc.params());
                v
            }
            Ablation::PromptTuning => m.prompt.into_iter().collect(),
        }
    }

    /// Trainable set for instruction tuning: the prompt side plus the
    /// language-model share picked by the tuning mode.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut v = self.prompt_side_params();
        match self.cfg.tuning {
            TuningMode::FreezeLlm => {}
            TuningMode::Lora => v.extend(self.models.lm.adapter_params()),
            TuningMode::Full => v.extend(self.models.lm.base_params()),
        }
        v.sort();
        v.dedup();
        v
    }

    /// Complement of [`Bundle::trainable_params`] within the store.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let t: std::collections::HashSet<_> = self.trainable_params().into_iter().collect();
        self.store.ids().filter(|id| !t.contains(id)).collect()
    }

    /// Graph-side parameters trained during pretraining.
    pub fn pretrain_params(&self) -> Vec<ParamId> {
        let mut v = self.models.encoder.params();
        v.extend(self.models.gformer.params());
        v
    }

    /// Soft prompt for `hg` in the current ablation mode, `m × d_l`.
    pub fn soft_prompt_var(&self, g: &mut Graph, store: &ParamStore, hg: &HyperGraph) -> Result<Var> {
        soft_prompt_var(&self.cfg, &self.models, g, store, hg)
    }

    /// Soft prompt as a plain matrix.
    pub fn extract_soft_prompt(&self, hg: &HyperGraph) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = self.soft_prompt_var(&mut g, &self.store, hg)?;
        Ok(g.value(v).clone())
    }

    fn text_ids(&self, s: &QaSample) -> Vec<usize> {
        text_ids(&self.cfg, &self.models, s)
    }

    /// Greedy answer for one sample.
    pub fn predict(&self, s: &QaSample) -> Result<String> {
        let prompt = self.extract_soft_prompt(&s.graph)?;
        let text = self.text_ids(s);
        self.models
            .lm
            .generate(&self.store, &text, Some(&prompt), self.cfg.lm.max_new)
    }
}

fn soft_prompt_var(cfg: &BundleConfig, m: &Models, g: &mut Graph, store: &ParamStore, hg: &HyperGraph) -> Result<Var> {
    match cfg.ablation {
        Ablation::Full | Ablation::NoPretrain => {
            let (nodes, _) = m.encoder.forward(g, store, hg)?;
            m.gformer.soft_prompt(g, store, Some(nodes))
        }
        Ablation::NoGnn => m.gformer.soft_prompt(g, store, None),
        Ablation::NoGformer => {
            let (nodes, _) = m.encoder.forward(g, store, hg)?;
            m.gformer.direct_prompt(g, store, nodes)
        }
        Ablation::PromptTuning => {
            let id = m
                .prompt
                .ok_or_else(|| Error::Config("bundle has no free prompt".into()))?;
            Ok(g.param(store, id))
        }
    }
}

fn text_ids(cfg: &BundleConfig, m: &Models, s: &QaSample) -> Vec<usize> {
    let structure = if cfg.structure_text { s.structure.as_str() } else { "" };
    m.lm.prompt_text(structure, &s.question).ids
}

/// Loads every shard under `dir` (sorted by name) with its hypergraphs.
pub fn load_corpus(dir: &Path) -> Result<Vec<QaSample>> {
    let mut shards: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("shard-") && n.ends_with(".jsonl"))
        })
        .collect();
    shards.sort();
    let mut graphs: HashMap<String, (Arc<HyperGraph>, String)> = HashMap::new();
    let mut out = Vec::new();
    for shard in &shards {
        for rec in read_shard(shard)? {
            let entry = match graphs.get(&rec.hypergraph_path) {
                Some(e) => e.clone(),
                None => {
                    let p = dir.join(&rec.hypergraph_path);
                    let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    let hg = HyperGraph::from_json(&raw)?;
                    let text = hg.structure_text();
                    let e = (Arc::new(hg), text);
                    graphs.insert(rec.hypergraph_path.clone(), e.clone());
                    e
                }
            };
            out.push(QaSample {
                id: rec.table_id,
                template: rec.template,
                graph: entry.0,
                structure: entry.1,
                question: rec.question,
                answer: rec.answer,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Where training left off.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub opt: Adam,
}

impl TrainState {
    pub fn fresh() -> Self {
        Self {
            step: 0,
            opt: Adam::new(AdamConfig::default()),
        }
    }
}

/// Parameters, optimizer moments and the step counter in one file.
pub fn save_training_checkpoint(bundle: &Bundle, state: &TrainState, path: &Path) -> Result<()> {
    let mut out = bundle.store.clone();
    state.opt.export(&bundle.store, &mut out)?;
    out.insert(STEP_KEY, Tensor::scalar(state.step as f64))?;
    checkpoint::save(&out, path)
}

/// Restores parameters and optimizer state written by
/// [`save_training_checkpoint`] into a bundle built with the same config.
pub fn load_training_checkpoint(bundle: &mut Bundle, path: &Path) -> Result<TrainState> {
    let saved = checkpoint::load(path)?;
    let all: Vec<String> = bundle.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in &all {
        if saved.id(name).is_none() {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
    }
    bundle.store.load_matching(&saved, "")?;
    let step = saved
        .id(STEP_KEY)
        .map(|id| saved.get(id).data()[0] as usize)
        .ok_or_else(|| Error::Checkpoint("missing train.step".into()))?;
    let opt = Adam::import(AdamConfig::default(), &bundle.store, &saved)?;
    Ok(TrainState { step, opt })
}

/// Hook run after every step with the step count; lets callers checkpoint.
pub type StepHook<'a> = dyn FnMut(&Bundle, &TrainState) -> Result<()> + 'a;

/// Pretrains the encoder and the former on answer generation, contrastive
/// alignment, or both alternating 1:1 (even steps answer generation).
pub fn pretrain(
    bundle: &mut Bundle,
    samples: &[QaSample],
    tcfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut LossLog,
    hook: Option<&mut StepHook<'_>>,
) -> Result<()> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !matches!(
        tcfg.loss_mode,
        LossMode::AnswerGen | LossMode::Contrastive | LossMode::Joint
    ) {
        return Err(Error::Config(
            "pretraining takes answer_gen, contrastive or joint".into(),
        ));
    }
    let total = tcfg.total_steps(samples.len());
    let trainable = Trainable::only(bundle.pretrain_params());
    let mut hook = hook;
    let end = tcfg.end_step(samples.len());
    while state.step < end {
        let step = state.step;
        let batch = batch_at(step, samples.len(), tcfg.batch_size, tcfg.seed);
        let task = match tcfg.loss_mode {
            LossMode::Joint if step % 2 == 1 => LossMode::Contrastive,
            LossMode::Joint => LossMode::AnswerGen,
            m => m,
        };
        let lr = lr_schedule(step, total, tcfg.lr, tcfg.warmup_frac);
        let models = &bundle.models;
        let loss = train_step(
            &mut bundle.store,
            &trainable,
            &mut state.opt,
            lr,
            tcfg.clip_norm,
            |g, store| match task {
                LossMode::AnswerGen => {
                    let mut terms = Vec::with_capacity(batch.len());
                    for &i in &batch {
                        let s = &samples[i];
                        let (nodes, _) = models.encoder.forward(g, store, &s.graph)?;
                        let qa = models.gformer.qa_tokens(&s.question, &s.answer)?;
                        terms.push(models.gformer.answer_generation_loss(g, store, Some(nodes), &qa)?);
                    }
                    mean(g, &terms)
                }
                _ => {
                    let mut nodes = Vec::with_capacity(batch.len());
                    let mut texts = Vec::with_capacity(batch.len());
                    for &i in &batch {
                        let s = &samples[i];
                        nodes.push(Some(models.encoder.forward(g, store, &s.graph)?.0));
                        texts.push(models.gformer.cls_tokens(&contrastive_text(s)));
                    }
                    models.gformer.contrastive_loss(g, store, &nodes, &texts)
                }
            },
        )?;
        state.step += 1;
        if step.is_multiple_of(tcfg.log_every) || state.step == total {
            log.push(step, lr, loss, task_name(task));
        }
        if let Some(h) = hook.as_deref_mut() {
            h(bundle, state)?;
        }
    }
    Ok(())
}

/// Text paired with a graph in the contrastive objective.
pub fn contrastive_text(s: &QaSample) -> String {
    format!("{} {}", s.question, s.answer)
}

fn task_name(m: LossMode) -> &'static str {
    match m {
        LossMode::AnswerGen => "answer_gen",
        LossMode::Contrastive => "contrastive",
        LossMode::Joint => "joint",
        LossMode::Instruction => "instruction",
    }
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Next-token loss on the answer given the text and the soft prompt.
pub fn instruction_loss(bundle: &Bundle, g: &mut Graph, store: &ParamStore, s: &QaSample) -> Result<Var> {
    let p = soft_prompt_var(&bundle.cfg, &bundle.models, g, store, &s.graph)?;
    let text = text_ids(&bundle.cfg, &bundle.models, s);
    bundle
        .models
        .lm
        .lm_loss(g, store, &text, Some(p), &Tokenizer.encode(&s.answer))
}

/// Instruction tuning. With a frozen language model and appended prompts
/// the text prefix of each sample is computed once and reused.
pub fn instruction_tune(
    bundle: &mut Bundle,
    samples: &[QaSample],
    tcfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut LossLog,
    hook: Option<&mut StepHook<'_>>,
) -> Result<()> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if tcfg.tuning != bundle.cfg.tuning {
        return Err(Error::Config(
            "train config and bundle disagree on the tuning mode".into(),
        ));
    }
    let total = tcfg.total_steps(samples.len());
    let trainable = Trainable::only(bundle.trainable_params());
    let use_cache =
        bundle.cfg.tuning == TuningMode::FreezeLlm && bundle.cfg.lm.placement == crate::toylm::PromptPlacement::Append;
    let mut caches: Vec<Option<KvCache>> = vec![None; samples.len()];
    let mut hook = hook;
    let end = tcfg.end_step(samples.len());
    while state.step < end {
        let step = state.step;
        let batch = batch_at(step, samples.len(), tcfg.batch_size, tcfg.seed);
        if use_cache {
            for &i in &batch {
                if caches[i].is_none() {
                    let text = text_ids(&bundle.cfg, &bundle.models, &samples[i]);
                    caches[i] = Some(bundle.models.lm.prefix_cache(&bundle.store, &text)?);
                }
            }
        }
        let lr = lr_schedule(step, total, tcfg.lr, tcfg.warmup_frac);
        let (cfg, models) = (&bundle.cfg, &bundle.models);
        let loss = train_step(
            &mut bundle.store,
            &trainable,
            &mut state.opt,
            lr,
            tcfg.clip_norm,
            |g, store| {
                let mut terms = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let s = &samples[i];
                    let p = soft_prompt_var(cfg, models, g, store, &s.graph)?;
                    let answer = Tokenizer.encode(&s.answer);
                    let t = match &caches[i] {
                        Some(c) => models.lm.lm_loss_cached(g, store, c, Some(p), &answer)?,
                        None => {
                            let text = text_ids(cfg, models, s);
                            models.lm.lm_loss(g, store, &text, Some(p), &answer)?
                        }
                    };
                    terms.push(t);
                }
                mean(g, &terms)
            },
        )?;
        state.step += 1;
        if step.is_multiple_of(tcfg.log_every) || state.step == total {
            log.push(step, lr, loss, "instruction");
        }
        if let Some(h) = hook.as_deref_mut() {
            h(bundle, state)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub template: u8,
    pub question: String,
    pub answer: String,
    pub prediction: String,
}

/// Greedy predictions for `samples`; a frozen model reuses text prefixes.
pub fn predict_all(bundle: &Bundle, samples: &[QaSample]) -> Result<Vec<Prediction>> {
    let lm = &bundle.models.lm;
    let cached = lm.cfg.placement == crate::toylm::PromptPlacement::Append;
    samples
        .iter()
        .map(|s| {
            let prediction = if cached {
                let text = bundle.text_ids(s);
                let cache = lm.prefix_cache(&bundle.store, &text)?;
                let prompt = bundle.extract_soft_prompt(&s.graph)?;
                let ids = lm.generate_cached(&bundle.store, &cache, &prompt, bundle.cfg.lm.max_new)?;
                Tokenizer.decode(&ids)
            } else {
                bundle.predict(s)?
            };
            Ok(Prediction {
                id: s.id.clone(),
                template: s.template,
                question: s.question.clone(),
                answer: s.answer.clone(),
                prediction,
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in preds {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Collapses runs of whitespace and trims the ends.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub exact_match: f64,
    pub per_template: BTreeMap<String, f64>,
}

/// Scores a predictions file written by [`write_predictions`]; reads it
/// back from disk rather than taking predictions in memory.
pub fn score_predictions(path: &Path) -> Result<EvalReport> {
    #[derive(Deserialize)]
    struct Row {
        template: u8,
        answer: String,
        prediction: String,
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut hits = 0usize;
    let mut count = 0usize;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let r: Row = serde_json::from_str(line).map_err(|e| Error::Decode(e.to_string()))?;
        let ok = normalize_answer(&r.answer) == normalize_answer(&r.prediction);
        count += 1;
        hits += ok as usize;
        let e = per.entry(format!("t{}", r.template)).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(EvalReport {
        count,
        exact_match: hits as f64 / count as f64,
        per_template: per.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_collapses_whitespace() {
        assert_eq!(normalize_answer("  Miami \t Heat\n"), "Miami Heat");
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut c = BundleConfig::default();
        c.lm.dim = 64;
        assert!(matches!(Bundle::new(c), Err(Error::Config(_))));
    }
}
