use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{derive_seed, file_sha256, hash_files, ExperimentConfig, Manifest, PipelineError};
use crate::datagen::{
    apply_cutoffs, read_frequencies, sample_queries, simulate_nbest, split_corpus, stratify, total_occurrences,
    write_corpus, QueryCounts,
};
use crate::fusion::{
    dataset_hash, extract_features, rescore, select_columns, tune_weights, NGramScorer, NnlmScorer, Objective,
    ScorerRegistry, TuneOptions, TuningData, WeightsFile, WeightsProvenance, WithCacheId,
};
use crate::llmclient::{LlmClient, LlmScorer};
use crate::metrics::{
    build_report, paired_t_test, rank1_selections, selected_counts, EvalReport, Population, Selections, TTest,
};
use crate::nbest::{read_nbest_jsonl, ACOUSTIC, ONDEVICE_LM, write_nbest_jsonl, FeatureMatrix, FusionWeights, NBestList};
use crate::ngram::{prune_ngram, read_arpa, write_arpa, NGramModel, NGramTrainer};
use crate::nnlm::{load_checkpoint, save_checkpoint, train_nnlm, NnlmModel};
use crate::subword::{train_subword, SubwordModel};

/// Evaluation sets, each stratified into head, torso and tail.
pub const SETS: [&str; 2] = ["validation", "test"];
/// The on-device ranking.
pub const BASELINE_SYSTEM: &str = "ondevice";
/// All server-side features tuned together.
pub const FUSION_SYSTEM: &str = "fusion";

const GENERATE: &str = "generate";
const SWEEP: &str = "sweep-ngram";
const TRAIN_NNLM: &str = "train-nnlm";
const SCORE: &str = "score";
const TUNE: &str = "tune";
const RESCORE: &str = "rescore";
const EVALUATE: &str = "evaluate";

fn nbest_rel(set: &str, pop: Population) -> String {
    format!("{GENERATE}/nbest/{set}_{pop}.jsonl")
}

fn features_rel(set: &str, pop: Population) -> String {
    format!("{SCORE}/features/{set}_{pop}.jsonl")
}

fn freq_rel(split: &str) -> String {
    format!("{GENERATE}/corpus/{split}.freq.tsv")
}

/// Collects the files a stage writes, then hashes them into its manifest.
struct Stage<'a> {
    name: &'static str,
    out: &'a Path,
    cfg: &'a ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Stage<'a> {
    fn start(name: &'static str, cfg: &'a ExperimentConfig, out: &'a Path) -> Result<Self, PipelineError> {
        cfg.validate()?;
        // A manifest only ever describes a run that finished.
        let old = Manifest::path(out, name);
        if old.exists() {
            fs::remove_file(old)?;
        }
        let mut stage = Self {
            name,
            out,
            cfg,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        };
        // The resolved config is archived with every stage's outputs.
        stage.write(&format!("{name}/config.toml"), cfg.to_toml().as_bytes())?;
        Ok(stage)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn input(&mut self, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                stage: producer_of(rel),
                path: p,
            });
        }
        self.inputs.insert(rel.to_string(), file_sha256(&p)?);
        Ok(p)
    }

    /// Registers `rel` as an output and returns its path, creating parents.
    fn output(&mut self, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap())?;
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.output(rel)?;
        fs::write(p, bytes)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write(rel, text.as_bytes())
    }

    fn finish(self, summary: serde_json::Value) -> Result<Manifest, PipelineError> {
        let manifest = Manifest {
            version: 1,
            stage: self.name.to_string(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            inputs: self.inputs,
            outputs: hash_files(self.out, &self.outputs)?,
            summary,
        };
        manifest.save(self.out)?;
        log::info!("{}: wrote {} outputs", self.name, manifest.outputs.len());
        Ok(manifest)
    }
}

fn producer_of(rel: &str) -> &'static str {
    [GENERATE, SWEEP, TRAIN_NNLM, SCORE, TUNE, RESCORE, EVALUATE]
        .into_iter()
        .find(|s| rel.starts_with(&format!("{s}/")))
        .unwrap_or(GENERATE)
}

fn format_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| format_err(path, e))
}

fn write_features(features: &[FeatureMatrix], path: &Path) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for fm in features {
        serde_json::to_writer(&mut w, fm).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Vec<FeatureMatrix>, PipelineError> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| format_err(path, e))?);
        }
    }
    Ok(out)
}

/// The three populations of one evaluation set, in population order.
type PopLists = Vec<(Population, Vec<NBestList>)>;

fn load_set(stage: &mut Stage, set: &str) -> Result<PopLists, PipelineError> {
    Population::ALL
        .into_iter()
        .map(|pop| Ok((pop, read_nbest_jsonl(stage.input(&nbest_rel(set, pop))?)?)))
        .collect()
}

fn load_set_features(stage: &mut Stage, set: &str) -> Result<Vec<Vec<FeatureMatrix>>, PipelineError> {
    Population::ALL
        .into_iter()
        .map(|pop| read_features(&stage.input(&features_rel(set, pop))?))
        .collect()
}

fn tuning_data(lists: &PopLists, features: &[Vec<FeatureMatrix>]) -> Result<TuningData, PipelineError> {
    let parts: Vec<(&[NBestList], &[FeatureMatrix])> = lists
        .iter()
        .zip(features)
        .map(|((_, l), f)| (l.as_slice(), f.as_slice()))
        .collect();
    Ok(TuningData::grouped(&parts)?)
}

fn all_lists(sets: &[&PopLists]) -> Vec<NBestList> {
    sets.iter().flat_map(|s| s.iter().flat_map(|(_, l)| l.iter().cloned())).collect()
}

/// Samples queries, splits them, stratifies validation and test, and
/// simulates on-device N-best lists for every population.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(GENERATE, cfg, out)?;
    let grammar = apply_cutoffs(&cfg.grammar.load()?, cfg.grammar.top_templates, cfg.grammar.top_entities);
    stage.write(&format!("{GENERATE}/grammar.tsv"), grammar.to_tsv().as_bytes())?;

    let queries = sample_queries(&grammar, derive_seed(cfg.seed, "sample"), cfg.grammar.sampler)?;
    let (train, validation, test) = split_corpus(&queries, cfg.split.ratios, derive_seed(cfg.seed, "split"))?;
    let corpus_dir = out.join(GENERATE).join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    let mut split_summary = BTreeMap::new();
    for (name, part) in [("train", &train), ("validation", &validation), ("test", &test)] {
        write_corpus(part, &corpus_dir, name)?;
        stage.outputs.push(format!("{GENERATE}/corpus/{name}.txt"));
        stage.outputs.push(freq_rel(name));
        split_summary.insert(name, json!({"unique": part.len(), "occurrences": total_occurrences(part)}));
    }

    let mut strat_summary = BTreeMap::new();
    for (set, part) in [("validation", &validation), ("test", &test)] {
        let strat = stratify(part, cfg.eval_sets.per_population, derive_seed(cfg.seed, &format!("stratify/{set}")))?;
        let mut sizes = BTreeMap::new();
        for pop in Population::ALL {
            let lists = simulate_nbest(
                &strat.samples[&pop],
                &grammar,
                &cfg.eval_sets.noise,
                derive_seed(cfg.seed, &format!("simulate/{set}/{pop}")),
                &format!("{set}-{pop}-"),
            )?;
            write_nbest_jsonl(&lists, stage.output(&nbest_rel(set, pop))?)?;
            sizes.insert(
                pop.as_str(),
                json!({
                    "partition_unique": strat.partitions[&pop].len(),
                    "sampled": lists.len(),
                    "nonempty": lists.iter().filter(|l| !l.is_empty()).count(),
                }),
            );
        }
        stage.write_json(&format!("{GENERATE}/stratification_{set}.json"), &strat)?;
        strat_summary.insert(set, sizes);
    }
    stage.finish(json!({
        "templates": grammar.templates().len(),
        "entities": grammar.entities().len(),
        "splits": split_summary,
        "populations": strat_summary,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub order: usize,
    pub threshold: f64,
    pub ngram_count: usize,
    /// Tuned validation objective (what selection minimizes).
    pub objective: f64,
    pub baseline_objective: f64,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub best: usize,
}

fn train_corpus(path: &Path) -> Result<QueryCounts, PipelineError> {
    Ok(read_frequencies(path)?)
}

/// Tunes the on-device columns plus one server-side feature on validation.
fn tune_single(
    lists: &PopLists,
    flat: &[NBestList],
    scorer: Box<dyn crate::fusion::Scorer>,
    options: &TuneOptions,
) -> Result<crate::fusion::TuneResult, PipelineError> {
    let mut registry = ScorerRegistry::new();
    registry.register(scorer)?;
    let feats = extract_features(flat, &registry)?;
    let per_pop = split_like(lists, feats);
    Ok(tune_weights(&tuning_data(lists, &per_pop)?, options, None)?)
}

/// Splits a flat vector back into per-population chunks.
fn split_like<T>(lists: &PopLists, flat: Vec<T>) -> Vec<Vec<T>> {
    let mut it = flat.into_iter();
    lists.iter().map(|(_, l)| it.by_ref().take(l.len()).collect()).collect()
}

/// Trains one n-gram model per order, prunes it at every threshold, tunes
/// fusion with that single feature and keeps the grid point with the lowest
/// validation objective.
pub fn cmd_sweep_ngram(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(SWEEP, cfg, out)?;
    Manifest::load_verified(out, GENERATE)?;
    let train = train_corpus(&stage.input(&freq_rel("train"))?)?;
    let lists = load_set(&mut stage, "validation")?;
    let flat = all_lists(&[&lists]);
    let options = TuneOptions {
        powell: cfg.fusion.powell.clone(),
        objective: cfg.fusion.single_objective,
    };

    let mut points = Vec::new();
    for &order in &cfg.ngram.orders {
        let model = NGramTrainer::new(order).train_weighted(train.iter().map(|(q, &c)| (q.as_str(), c)))?;
        let evaluated: Vec<SweepPoint> = cfg
            .ngram
            .thresholds
            .par_iter()
            .map(|&threshold| {
                let pruned = if threshold == 0.0 {
                    model.clone()
                } else {
                    prune_ngram(&model, threshold).0
                };
                let ngram_count = pruned.total_ngrams();
                let r = tune_single(&lists, &flat, Box::new(NGramScorer::new("ngram", pruned)), &options)?;
                log::info!("order {order} threshold {threshold:e}: objective {:.5}", r.objective);
                Ok(SweepPoint {
                    order,
                    threshold,
                    ngram_count,
                    objective: r.objective,
                    baseline_objective: r.baseline_objective,
                    weights: r.weights,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        points.extend(evaluated);
    }
    let best = (0..points.len())
        .min_by(|&a, &b| points[a].objective.total_cmp(&points[b].objective).then(a.cmp(&b)))
        .expect("grid is non-empty");
    let chosen = &points[best];
    let model = NGramTrainer::new(chosen.order).train_weighted(train.iter().map(|(q, &c)| (q.as_str(), c)))?;
    let model: NGramModel = if chosen.threshold == 0.0 {
        model
    } else {
        prune_ngram(&model, chosen.threshold).0
    };
    write_arpa(&model, stage.output(&format!("{SWEEP}/best.arpa"))?)?;
    let report = SweepReport { points, best };
    stage.write_json(&format!("{SWEEP}/sweep.json"), &report)?;
    let chosen = &report.points[best];
    stage.finish(json!({
        "grid_points": report.points.len(),
        "best": {"order": chosen.order, "threshold": chosen.threshold, "objective": chosen.objective},
    }))
}

/// Perplexity per sub-word token (end-of-sentence included).
fn perplexity(model: &NnlmModel, tokenizer: &SubwordModel, texts: &[&str]) -> Result<f64, PipelineError> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for t in texts {
        let ids = tokenizer.encode(t).ids;
        tokens += ids.len() + 1;
        nll += model.sequence_nll(&ids)?;
    }
    Ok((nll / tokens.max(1) as f64).exp())
}

/// Trains a sub-word model and a neural LM for every configured spec.
pub fn cmd_train_nnlm(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(TRAIN_NNLM, cfg, out)?;
    Manifest::load_verified(out, GENERATE)?;
    let train = train_corpus(&stage.input(&freq_rel("train"))?)?;
    let validation = load_set(&mut stage, "validation")?;
    let refs: Vec<&str> = validation
        .iter()
        .flat_map(|(_, l)| l.iter().map(|x| x.reference.as_str()))
        .collect();
    let mut summary = BTreeMap::new();
    for spec in &cfg.nnlm {
        let dir = format!("{TRAIN_NNLM}/{}", spec.name);
        let tokenizer = train_subword(train.iter().map(|(q, &c)| (q.as_str(), c)), spec.subword_vocab)?;
        let corpus: Vec<(Vec<u32>, u64)> = train.iter().map(|(q, &c)| (tokenizer.encode(q).ids, c)).collect();
        let config = spec.model_config(tokenizer.vocab_size());
        let (model, log) = train_nnlm(config, &spec.schedule, &corpus, derive_seed(cfg.seed, &format!("nnlm/{}", spec.name)))?;
        tokenizer.save(stage.output(&format!("{dir}/subword.txt"))?)?;
        save_checkpoint(&model, stage.output(&format!("{dir}/model.nnlm"))?)?;
        stage.write_json(&format!("{dir}/train_log.json"), &log)?;
        // Score what the scorer will see: the checkpoint as stored.
        let stored = load_checkpoint(stage.path(&format!("{dir}/model.nnlm")))?;
        let ppl = perplexity(&stored, &tokenizer, &refs)?;
        log::info!("{}: validation perplexity {ppl:.2} (uniform {})", spec.name, tokenizer.vocab_size());
        summary.insert(
            spec.name.clone(),
            json!({
                "parameters": stored.parameter_count(),
                "vocab_size": tokenizer.vocab_size(),
                "final_train_loss": log.epochs.last().map(|e| e.mean_loss),
                "validation_perplexity": ppl,
            }),
        );
    }
    stage.finish(json!({ "models": summary }))
}

fn short_hash(path: &Path) -> Result<String, PipelineError> {
    Ok(file_sha256(path)?[..16].to_string())
}

/// Computes every server-side feature for every hypothesis of the
/// validation and test sets.
pub fn cmd_score(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(SCORE, cfg, out)?;
    Manifest::load_verified(out, GENERATE)?;
    Manifest::load_verified(out, SWEEP)?;
    if !cfg.nnlm.is_empty() {
        Manifest::load_verified(out, TRAIN_NNLM)?;
    }
    let mut registry = ScorerRegistry::with_cache(out.join(SCORE).join("cache"));
    let arpa = stage.input(&format!("{SWEEP}/best.arpa"))?;
    registry.register(Box::new(WithCacheId::new(
        Box::new(NGramScorer::new("ngram", read_arpa(&arpa)?)),
        format!("ngram-{}", short_hash(&arpa)?),
    )))?;
    for spec in &cfg.nnlm {
        let dir = format!("{TRAIN_NNLM}/{}", spec.name);
        let ckpt = stage.input(&format!("{dir}/model.nnlm"))?;
        let tokenizer = SubwordModel::load(stage.input(&format!("{dir}/subword.txt"))?)?;
        registry.register(Box::new(WithCacheId::new(
            Box::new(NnlmScorer::new(spec.name.clone(), load_checkpoint(&ckpt)?, tokenizer)),
            format!("nnlm-{}-{}", spec.name, short_hash(&ckpt)?),
        )))?;
    }
    if cfg.llm.enabled {
        let client = LlmClient::new(cfg.llm.endpoint.clone())?;
        registry.register(Box::new(LlmScorer::new("llm", client)))?;
    }

    let sets: Vec<PopLists> = SETS.iter().map(|s| load_set(&mut stage, s)).collect::<Result<_, _>>()?;
    let flat = all_lists(&sets.iter().collect::<Vec<_>>());
    let mut feats = extract_features(&flat, &registry)?.into_iter();
    for (set, lists) in SETS.iter().zip(&sets) {
        for (pop, l) in lists {
            let chunk: Vec<FeatureMatrix> = feats.by_ref().take(l.len()).collect();
            write_features(&chunk, &stage.output(&features_rel(set, *pop))?)?;
        }
    }
    let columns: Vec<String> = [ACOUSTIC.to_string(), ONDEVICE_LM.to_string()]
        .into_iter()
        .chain(registry.names())
        .collect();
    stage.finish(json!({ "columns": columns }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedSystem {
    pub name: String,
    pub objective: f64,
    pub baseline_objective: f64,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    /// Single-feature systems in column order, then the fusion system.
    pub systems: Vec<TunedSystem>,
    pub best_single: String,
}

fn weights_rel(system: &str) -> String {
    format!("{TUNE}/{system}.weights.json")
}

/// Tunes one system per server-side feature, then all features together,
/// warm-started from the best single-feature weights.
pub fn cmd_tune(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(TUNE, cfg, out)?;
    Manifest::load_verified(out, SCORE)?;
    let lists = load_set(&mut stage, "validation")?;
    let feats = load_set_features(&mut stage, "validation")?;
    let columns = feats
        .iter()
        .flatten()
        .next()
        .map(|f| f.columns.clone())
        .ok_or(crate::fusion::FusionError::EmptyValidation)?;
    let hash = dataset_hash(&all_lists(&[&lists]));
    let opts = |objective: Objective| TuneOptions {
        powell: cfg.fusion.powell.clone(),
        objective,
    };
    let provenance = |ids: Vec<String>, o: &TuneOptions| WeightsProvenance {
        dataset_hash: hash.clone(),
        scorer_ids: ids,
        options: serde_json::to_value(o).expect("serializable"),
    };

    let mut systems = Vec::new();
    for col in &columns[2..] {
        let sub: Vec<Vec<FeatureMatrix>> = feats.iter().map(|f| select_columns(f, &[col])).collect();
        let o = opts(cfg.fusion.single_objective);
        let r = tune_weights(&tuning_data(&lists, &sub)?, &o, None)?;
        log::info!("{col}: validation objective {:.5} (baseline {:.5})", r.objective, r.baseline_objective);
        let file = WeightsFile::new(&r.weights, provenance(vec![col.clone()], &o));
        stage.write_json(&weights_rel(col), &file)?;
        systems.push(TunedSystem {
            name: col.clone(),
            objective: r.objective,
            baseline_objective: r.baseline_objective,
            weights: r.weights,
        });
    }
    let best = systems
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one server-side feature");
    let mut warm = FusionWeights::baseline(&columns);
    for (n, w) in best.weights.names.iter().zip(&best.weights.weights) {
        let i = columns.iter().position(|c| c == n).unwrap();
        warm.weights[i] = *w;
    }
    let best_single = best.name.clone();
    let o = opts(cfg.fusion.fusion_objective);
    let r = tune_weights(&tuning_data(&lists, &feats)?, &o, Some(&warm))?;
    log::info!("fusion: validation objective {:.5}", r.objective);
    stage.write_json(&weights_rel(FUSION_SYSTEM), &WeightsFile::new(&r.weights, provenance(columns[2..].to_vec(), &o)))?;
    systems.push(TunedSystem {
        name: FUSION_SYSTEM.into(),
        objective: r.objective,
        baseline_objective: r.baseline_objective,
        weights: r.weights,
    });
    let summary = TuneSummary { systems, best_single };
    stage.write_json(&format!("{TUNE}/summary.json"), &summary)?;
    stage.finish(serde_json::to_value(&summary).expect("serializable"))
}

fn selections_rel(system: &str, set: &str) -> String {
    format!("{RESCORE}/{system}_{set}.json")
}

/// Applies every tuned system (and the on-device ranking) to validation and
/// test.
pub fn cmd_rescore(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(RESCORE, cfg, out)?;
    Manifest::load_verified(out, TUNE)?;
    let summary: TuneSummary = read_json(&stage.input(&format!("{TUNE}/summary.json"))?)?;
    let mut systems = Vec::new();
    for s in &summary.systems {
        let w = WeightsFile::load(stage.input(&weights_rel(&s.name))?)?;
        systems.push((s.name.clone(), w.fusion_weights()));
    }
    for set in SETS {
        let lists = load_set(&mut stage, set)?;
        let feats = load_set_features(&mut stage, set)?;
        let flat = all_lists(&[&lists]);
        let flat_feats: Vec<FeatureMatrix> = feats.into_iter().flatten().collect();
        stage.write_json(&selections_rel(BASELINE_SYSTEM, set), &rank1_selections(&flat))?;
        for (name, w) in &systems {
            let keep: Vec<&str> = w.names[2..].iter().map(String::as_str).collect();
            let sel = rescore(&flat, &select_columns(&flat_feats, &keep), w)?;
            stage.write_json(&selections_rel(name, set), &sel)?;
        }
    }
    let names: Vec<&str> = std::iter::once(BASELINE_SYSTEM)
        .chain(systems.iter().map(|(n, _)| n.as_str()))
        .collect();
    stage.finish(json!({ "systems": names }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    /// Per set, one report per system with WERR against the on-device
    /// ranking; the baseline comes first.
    pub sets: BTreeMap<String, Vec<SystemReport>>,
    /// Paired t-test on per-utterance word errors of fusion against the
    /// baseline on the test set.
    pub fusion_vs_baseline_test: Option<TTest>,
}

impl EvaluationSummary {
    pub fn load(out: &Path) -> Result<Self, PipelineError> {
        read_json(&out.join(EVALUATE).join("report.json"))
    }

    pub fn report(&self, set: &str, system: &str) -> Option<&EvalReport> {
        self.sets.get(set)?.iter().find(|r| r.system == system).map(|r| &r.report)
    }
}

/// Builds the WER tables and the significance test.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let mut stage = Stage::start(EVALUATE, cfg, out)?;
    let rescored = Manifest::load_verified(out, RESCORE)?;
    let systems: Vec<String> = serde_json::from_value(rescored.summary["systems"].clone())
        .map_err(|e| format_err(&Manifest::path(out, RESCORE), e))?;
    let mut sets = BTreeMap::new();
    let mut text = String::new();
    let mut t_test = None;
    for set in SETS {
        let lists = load_set(&mut stage, set)?;
        let populations: BTreeMap<Population, Vec<NBestList>> = lists.iter().cloned().collect();
        let flat = all_lists(&[&lists]);
        let baseline: Selections = read_json(&stage.input(&selections_rel(BASELINE_SYSTEM, set))?)?;
        let mut reports = Vec::new();
        text += &format!("== {set} ==\n{}\n", EvalReport::table_header());
        for name in &systems {
            let sel: Selections = read_json(&stage.input(&selections_rel(name, set))?)?;
            let report = build_report(&populations, &sel, Some(&baseline))?;
            text += &report.table_row(name);
            text.push('\n');
            if set == "test" && name == FUSION_SYSTEM {
                let errs = |s: &Selections| -> Result<Vec<f64>, PipelineError> {
                    Ok(selected_counts(&flat, s)?.iter().map(|c| c.errors as f64).collect())
                };
                t_test = Some(paired_t_test(&errs(&sel)?, &errs(&baseline)?)?);
            }
            reports.push(SystemReport {
                system: name.clone(),
                report,
            });
        }
        text += "\n";
        text += &reports[0].report.statistics_table();
        text += "\n";
        sets.insert(set.to_string(), reports);
    }
    if let Some(t) = &t_test {
        text += &format!(
            "fusion vs on-device (test, per-utterance errors): mean difference {:.4}, t = {:.3}, p = {:.3e}\n",
            t.mean_difference, t.t, t.p_value
        );
    }
    let summary = EvaluationSummary {
        sets,
        fusion_vs_baseline_test: t_test,
    };
    stage.write(&format!("{EVALUATE}/report.txt"), text.as_bytes())?;
    stage.write_json(&format!("{EVALUATE}/report.json"), &summary)?;
    let avg = |set: &str, sys: &str| summary.report(set, sys).map(|r| r.average);
    stage.finish(json!({
        "test_average_wer": {"ondevice": avg("test", BASELINE_SYSTEM), "fusion": avg("test", FUSION_SYSTEM)},
        "p_value": t_test.map(|t| t.p_value),
    }))
}

/// Runs every stage in order.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Manifest>, PipelineError> {
    type Cmd = fn(&ExperimentConfig, &Path) -> Result<Manifest, PipelineError>;
    let stages: [Cmd; 7] = [
        cmd_generate,
        cmd_sweep_ngram,
        cmd_train_nnlm,
        cmd_score,
        cmd_tune,
        cmd_rescore,
        cmd_evaluate,
    ];
    stages.iter().map(|f| f(cfg, out)).collect()
}
