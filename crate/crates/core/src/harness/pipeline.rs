//! The staged size-reduction run: each stage changes one part of the system,
//! re-evaluates it on dev and measures what it would ship.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;

use super::config::{component_seed, PipelineConfig};
use super::eval::{evaluate, DevQuestion, EvalReport, QaSystem};
use super::synthetic::{gen_synthetic, SyntheticDataset};
use crate::checkpoint::{Checkpoint, Precision};
use crate::corpus::{ingest_text_with_limit, parse_passage_tsv, SubsetCorpus, TokenCorpus};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::filter::{
    select_top_n, subset_to_bytes, train_filter, FilterConfig, FilterSplit, FilterTrace,
};
use crate::index::{quantize, train_quantizer, DenseIndex};
use crate::packaging::{
    compress_resource, measure_footprint, render_ledger, CompressedContainer, FootprintLedger,
    LedgerReport, ResourceKind, ResourceManifest, Role,
};
use crate::reader::{train_reader, ReaderExample};
use crate::retriever::{
    build_passage_index, retrieve, train_retriever, train_shared_retriever, Retriever, TrainingPair,
};
use crate::rng;
use crate::unification::{
    build_read_pool, distill, iterative_finetune, select_checkpoint, TeacherPipeline, TrainLog,
    UnifiedModel,
};

pub const STAGE_LABELS: [&str; 11] = [
    "baseline",
    "filtering",
    "dim-reduction",
    "lightweight-encoder",
    "encoder-sharing",
    "distillation",
    "iterative-finetuning",
    "int8-index",
    "fp16-weights",
    "compression",
    "token-id-corpus",
];

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub label: String,
    pub report: EvalReport,
    pub ledger: FootprintLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub trace: FilterTrace,
    /// Kept passages, original IDs ascending.
    pub subset: Vec<usize>,
    pub positives_kept: usize,
    pub positives_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub stages: Vec<StageRecord>,
    pub ledger: LedgerReport,
    pub filter: FilterSummary,
    pub distill_log: TrainLog,
    pub finetune_log: TrainLog,
    /// Per-epoch mean losses of every retriever trained, by stage.
    pub retriever_losses: Vec<(String, Vec<f64>)>,
}

impl PipelineTrace {
    pub fn stage(&self, label: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.label == label)
    }

    pub fn em(&self, label: &str) -> Option<f64> {
        self.stage(label).map(|s| s.report.best_em)
    }

    pub fn table(&self) -> String {
        stage_table(&self.stages)
    }
}

fn stage_table(stages: &[StageRecord]) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>4} {:>7} {:>7} {:>12}\n",
        "stage", "EM", "m'", "hit@1", "hit@20", "total bytes"
    );
    for st in stages {
        let hit = |k: usize| {
            st.report
                .hit_at
                .iter()
                .find(|(kk, _)| *kk == k)
                .map_or("-".to_string(), |(_, h)| format!("{h:.3}"))
        };
        let _ = writeln!(
            s,
            "{:<22} {:>8.4} {:>4} {:>7} {:>7} {:>12}",
            st.label,
            st.report.best_em,
            st.report.best_m,
            hit(1),
            hit(20),
            st.ledger.total()
        );
    }
    s
}

/// `stage<TAB>best_em<TAB>best_m<TAB>em@m...<TAB>total_bytes` with a header.
fn stage_records(stages: &[StageRecord]) -> String {
    let mut s = String::from("stage\tbest_em\tbest_m\tem_by_m\ttotal_bytes\n");
    for st in stages {
        let ems = st
            .report
            .grid
            .iter()
            .zip(&st.report.em)
            .map(|(m, e)| format!("{m}:{e}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            st.label,
            st.report.best_em,
            st.report.best_m,
            ems,
            st.ledger.total()
        );
    }
    s
}

/// Files shipped by one stage.
struct StageFiles {
    dir: PathBuf,
    manifest: ResourceManifest,
}

impl StageFiles {
    fn new(out: &Path, n: usize, label: &str) -> Result<Self> {
        let dir = out.join("stages").join(format!("{:02}-{label}", n + 1));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            manifest: ResourceManifest::new(),
        })
    }

    fn add(&mut self, name: &str, role: Role, kind: ResourceKind, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.manifest.add(name, role, path, kind)
    }

    fn add_compressed(
        &mut self,
        name: &str,
        role: Role,
        kind: ResourceKind,
        bytes: &[u8],
    ) -> Result<()> {
        let c = compress_resource(name, bytes, kind, None)?;
        self.add(
            &format!("{name}.mrrz"),
            role,
            ResourceKind::Binary,
            &c.to_bytes(),
        )
    }

    fn read(&self, name: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.dir.join(name))?)
    }

    fn read_compressed(&self, name: &str) -> Result<Vec<u8>> {
        CompressedContainer::from_bytes(&self.read(&format!("{name}.mrrz"))?)?.decompress()
    }
}

struct Recorder<'a> {
    out: &'a Path,
    stages: Vec<StageRecord>,
}

impl Recorder<'_> {
    fn files(&self, label: &str) -> Result<StageFiles> {
        StageFiles::new(self.out, self.stages.len(), label)
    }

    fn push(&mut self, label: &str, files: &StageFiles, report: EvalReport) -> Result<()> {
        let ledger = measure_footprint(&files.manifest)?;
        fs::write(files.dir.join("eval.tsv"), report.records())?;
        self.stages.push(StageRecord {
            label: label.to_string(),
            report,
            ledger,
        });
        fs::write(self.out.join("trace.tsv"), stage_records(&self.stages))?;
        fs::write(self.out.join("trace.txt"), stage_table(&self.stages))?;
        Ok(())
    }
}

fn in_stage<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: label.to_string(),
        source: Box::new(e),
    })
}

fn checkpoint_bytes(ck: &Checkpoint, precision: Precision) -> Result<Vec<u8>> {
    ck.to_bytes(precision)
}

/// Training data shared by all stages, indexed into the full corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub pairs: Vec<TrainingPair>,
    pub examples: Vec<ReaderExample>,
    pub dev: Vec<DevQuestion>,
}

impl Prepared {
    /// Dev questions and reader examples re-indexed into `sub`; examples whose
    /// positive was dropped disappear, dev positives become `None`.
    pub fn on_subset(&self, sub: &SubsetCorpus) -> (Vec<DevQuestion>, Vec<ReaderExample>) {
        let dev = self
            .dev
            .iter()
            .map(|q| DevQuestion {
                positive: q
                    .positive
                    .and_then(|p| sub.new_id(p as usize))
                    .map(|p| p as u64),
                ..q.clone()
            })
            .collect();
        let examples = self
            .examples
            .iter()
            .filter_map(|e| {
                sub.new_id(e.positive).map(|p| ReaderExample {
                    positive: p,
                    ..e.clone()
                })
            })
            .collect();
        (dev, examples)
    }
}

pub fn prepare(ds: &SyntheticDataset) -> Prepared {
    let vocab = ds.vocab();
    let pairs = ds
        .train
        .iter()
        .map(|i| {
            let r = &ds.records[*i];
            TrainingPair {
                question: vocab.tokenize(&r.question),
                positive: r.positive_id as usize,
            }
        })
        .collect();
    let examples = ds
        .train
        .iter()
        .map(|i| {
            let r = &ds.records[*i];
            ReaderExample {
                question: vocab.tokenize(&r.question),
                positive: r.positive_id as usize,
                gold: vec![(r.start, r.end)],
            }
        })
        .collect();
    let dev = ds
        .dev
        .iter()
        .map(|i| {
            let r = &ds.records[*i];
            DevQuestion {
                question: vocab.tokenize(&r.question),
                answers: vec![r.answer.clone()],
                positive: Some(r.positive_id),
            }
        })
        .collect();
    Prepared {
        pairs,
        examples,
        dev,
    }
}

/// Positives of dev questions that `retriever` ranks first form the
/// validation positives; training positives are the remaining training
/// positives; negatives are passages no question points to.
pub fn filter_split(
    retriever: &Retriever,
    index: &DenseIndex,
    ds: &SyntheticDataset,
    prep: &Prepared,
    val_negative_ratio: usize,
    seed: u64,
) -> Result<FilterSplit> {
    let mut plus_val = BTreeSet::new();
    for q in &prep.dev {
        let top = retrieve(retriever, &q.question, index, 1)?.ids();
        if let Some(pos) = q.positive {
            if top.first() == Some(&pos) {
                plus_val.insert(pos as usize);
            }
        }
    }
    let mut freq: BTreeMap<usize, u64> = BTreeMap::new();
    for p in &prep.pairs {
        *freq.entry(p.positive).or_default() += 1;
    }
    let plus_train: BTreeSet<usize> = freq
        .keys()
        .copied()
        .filter(|j| !plus_val.contains(j))
        .collect();
    freq.retain(|j, _| plus_train.contains(j));
    let any_positive: BTreeSet<usize> = ds.records.iter().map(|r| r.positive_id as usize).collect();
    let distractors: Vec<usize> = (0..ds.corpus.len())
        .filter(|j| !any_positive.contains(j))
        .collect();
    let n_val = (val_negative_ratio * plus_val.len()).min(distractors.len() / 2);
    let mut rng = rng::derive(seed, "filter-split");
    let minus_val: BTreeSet<usize> = distractors
        .choose_multiple(&mut rng, n_val)
        .copied()
        .collect();
    let minus_train = distractors
        .iter()
        .copied()
        .filter(|j| !minus_val.contains(j))
        .collect();
    Ok(FilterSplit {
        plus_train,
        minus_train,
        plus_val,
        minus_val,
        freq,
    })
}

pub(crate) fn dual_init(vocab: usize, width: usize, seed: u64) -> Retriever {
    Retriever::Dual {
        question: EncoderParams::init(vocab, width, component_seed(seed, "question-encoder")),
        passage: EncoderParams::init(vocab, width, component_seed(seed, "passage-encoder")),
    }
}

/// Runs every stage in order, writing artifacts and running reports under `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineTrace> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let seed = config.seed;
    let ds = in_stage("data", || gen_synthetic(&config.synthetic, seed))?;
    ds.write(&out.join("data"))?;
    let prep = prepare(&ds);
    if prep.dev.is_empty() {
        return Err(Error::config("synthetic config leaves no dev questions"));
    }
    let corpus = &ds.corpus;
    let v = corpus.vocab().len();
    let max_seq_len = config.reader.max_seq_len;
    let (tw, sw) = (config.teacher_width, config.student_width);
    let (tdim, sdim) = (config.teacher_retrieval_dim, config.student_retrieval_dim);
    let mut rec = Recorder {
        out,
        stages: Vec::new(),
    };
    let mut retriever_losses = Vec::new();
    let retriever_cfg = |dim: usize, label: &str| {
        let mut c = config.retriever.clone();
        c.retrieval_dim = dim;
        c.seed = component_seed(seed, label);
        c
    };
    let reader_cfg = |width: usize, label: &str| {
        let mut c = config.reader.clone();
        c.width = width;
        c.seed = component_seed(seed, label);
        c
    };
    let text_resource = |files: &mut StageFiles, corpus: &TokenCorpus| {
        files.add(
            "passages.tsv",
            Role::Text,
            ResourceKind::Text,
            corpus.to_tsv().as_bytes(),
        )
    };

    // 1: dual retriever and reader at teacher width over the full corpus
    let label = STAGE_LABELS[0];
    let teacher = in_stage(label, || {
        let cfg = retriever_cfg(tdim, "omega");
        let (omega, losses) =
            train_retriever(dual_init(v, tw, cfg.seed), corpus, &prep.pairs, &cfg)?;
        retriever_losses.push((label.to_string(), losses));
        let index: DenseIndex = build_passage_index(&omega, corpus, tdim)?.into();
        let xi = train_reader(
            corpus,
            &prep.examples,
            &omega,
            &index,
            &reader_cfg(tw, "xi"),
            |_, _| Ok(()),
        )?;
        let teacher = TeacherPipeline {
            retriever: omega,
            reader: xi,
            retrieval_dim: tdim,
        };
        let mut files = rec.files(label)?;
        files.add(
            "retriever.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &checkpoint_bytes(&teacher.retriever.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "reader.mrrw",
            Role::Reader,
            ResourceKind::Binary,
            &checkpoint_bytes(&teacher.reader.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &index.to_bytes(),
        )?;
        text_resource(&mut files, corpus)?;
        let system = QaSystem::teacher(&teacher, index, corpus.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &prep.dev, &config.eval)?)?;
        Ok((teacher, system.index))
    })?;
    let (teacher, full_index) = teacher;

    // 2: keep the filter's top-n passages
    let label = STAGE_LABELS[1];
    let (filter, sub, dev_sub, examples_sub) = in_stage(label, || {
        let split = filter_split(
            &teacher.retriever,
            &full_index,
            &ds,
            &prep,
            config.val_negative_ratio,
            seed,
        )?;
        let fcfg = FilterConfig {
            seed: component_seed(seed, "filter"),
            ..config.filter.clone()
        };
        let (model, trace) = train_filter(corpus, &split, &fcfg)?;
        let (keep, sub) = select_top_n(&model, corpus, config.subset_size.min(corpus.len()))?;
        fs::write(out.join("subset.bin"), subset_to_bytes(&keep))?;
        let (dev_sub, examples_sub) = prep.on_subset(&sub);
        let all_pos: BTreeSet<usize> = ds.records.iter().map(|r| r.positive_id as usize).collect();
        let summary = FilterSummary {
            trace,
            positives_kept: all_pos.iter().filter(|p| sub.new_id(**p).is_some()).count(),
            positives_total: all_pos.len(),
            subset: keep,
        };
        let index: DenseIndex = build_passage_index(&teacher.retriever, &sub.corpus, tdim)?.into();
        let mut files = rec.files(label)?;
        files.add(
            "retriever.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &checkpoint_bytes(&teacher.retriever.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "reader.mrrw",
            Role::Reader,
            ResourceKind::Binary,
            &checkpoint_bytes(&teacher.reader.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &index.to_bytes(),
        )?;
        text_resource(&mut files, &sub.corpus)?;
        let system = QaSystem::teacher(&teacher, index, sub.corpus.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        Ok((summary, sub, dev_sub, examples_sub))
    })?;
    let sc = &sub.corpus;
    if examples_sub.is_empty() {
        return Err(Error::Stage {
            stage: STAGE_LABELS[1].into(),
            source: Box::new(Error::Data("filter dropped every training positive".into())),
        });
    }

    // 3: retrain the teacher-width retriever with a short retrieval vector
    let label = STAGE_LABELS[2];
    in_stage(label, || {
        let cfg = retriever_cfg(sdim, "omega-short");
        let (omega, losses) =
            train_retriever(dual_init(v, tw, cfg.seed), corpus, &prep.pairs, &cfg)?;
        retriever_losses.push((label.to_string(), losses));
        let index: DenseIndex = build_passage_index(&omega, sc, sdim)?.into();
        let mut files = rec.files(label)?;
        files.add(
            "retriever.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &checkpoint_bytes(&omega.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "reader.mrrw",
            Role::Reader,
            ResourceKind::Binary,
            &checkpoint_bytes(&teacher.reader.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &index.to_bytes(),
        )?;
        text_resource(&mut files, sc)?;
        let t = TeacherPipeline {
            retriever: omega,
            reader: teacher.reader.clone(),
            retrieval_dim: sdim,
        };
        let system = QaSystem::teacher(&t, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)
    })?;

    // 4: student-width retriever pair and reader
    let label = STAGE_LABELS[3];
    let light_reader = in_stage(label, || {
        let cfg = retriever_cfg(sdim, "omega-light");
        let (omega, losses) =
            train_retriever(dual_init(v, sw, cfg.seed), corpus, &prep.pairs, &cfg)?;
        retriever_losses.push((label.to_string(), losses));
        let index: DenseIndex = build_passage_index(&omega, sc, sdim)?.into();
        let reader = train_reader(
            sc,
            &examples_sub,
            &omega,
            &index,
            &reader_cfg(sw, "xi-light"),
            |_, _| Ok(()),
        )?;
        let mut files = rec.files(label)?;
        files.add(
            "retriever.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &checkpoint_bytes(&omega.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "reader.mrrw",
            Role::Reader,
            ResourceKind::Binary,
            &checkpoint_bytes(&reader.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &index.to_bytes(),
        )?;
        text_resource(&mut files, sc)?;
        let t = TeacherPipeline {
            retriever: omega,
            reader,
            retrieval_dim: sdim,
        };
        let system = QaSystem::teacher(&t, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        Ok(t.reader)
    })?;

    // 5: one encoder for questions and passages
    let label = STAGE_LABELS[4];
    let shared = in_stage(label, || {
        let cfg = retriever_cfg(sdim, "theta");
        let theta = train_shared_retriever(corpus, &prep.pairs, sw, &cfg)?;
        let retriever = Retriever::Shared(theta);
        let index: DenseIndex = build_passage_index(&retriever, sc, sdim)?.into();
        let mut files = rec.files(label)?;
        files.add(
            "retriever.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &checkpoint_bytes(&retriever.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "reader.mrrw",
            Role::Reader,
            ResourceKind::Binary,
            &checkpoint_bytes(&light_reader.to_checkpoint(), Precision::Fp32)?,
        )?;
        files.add(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &index.to_bytes(),
        )?;
        text_resource(&mut files, sc)?;
        let t = TeacherPipeline {
            retriever,
            reader: light_reader.clone(),
            retrieval_dim: sdim,
        };
        let system = QaSystem::teacher(&t, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        match t.retriever {
            Retriever::Shared(p) => Ok(p),
            Retriever::Dual { .. } => unreachable!(),
        }
    })?;

    // the unified model is scored on dev after every epoch; the best one moves on
    let questions_sub: Vec<Vec<u32>> = examples_sub.iter().map(|e| e.question.clone()).collect();
    let pick_best = |snapshots: &[UnifiedModel]| -> Result<usize> {
        select_checkpoint(snapshots, |m| {
            let system = QaSystem::unified(m, m.build_index(sc)?, sc.clone(), max_seq_len);
            Ok(evaluate(&system, &dev_sub, &config.eval)?.best_em)
        })
    };
    let unified_files =
        |files: &mut StageFiles, model: &UnifiedModel, index: &DenseIndex, precision: Precision| {
            files.add(
                "unified.mrrw",
                Role::Retriever,
                ResourceKind::Binary,
                &checkpoint_bytes(&model.to_checkpoint(), precision)?,
            )?;
            files.add(
                "index.mrri",
                Role::Index,
                ResourceKind::Binary,
                &index.to_bytes(),
            )?;
            text_resource(files, sc)
        };

    // 6: distil the teacher reader into the shared encoder
    let label = STAGE_LABELS[5];
    let (distilled, distill_log, pools) = in_stage(label, || {
        let dcfg = crate::unification::DistillConfig {
            seed: component_seed(seed, "distill"),
            ..config.distill.clone()
        };
        let pools = build_read_pool(
            &teacher.retriever,
            sc,
            &questions_sub,
            dcfg.pool_depth.min(sc.len()),
            tdim,
        )?;
        let student =
            UnifiedModel::from_retriever(shared, sdim, component_seed(seed, "unified-heads"));
        let mut snapshots = Vec::new();
        let (_, log) = distill(
            student,
            &teacher.reader,
            sc,
            &examples_sub,
            &pools,
            &dcfg,
            |_, m| {
                snapshots.push(m.clone());
                Ok(())
            },
        )?;
        let best = snapshots.swap_remove(pick_best(&snapshots)?);
        let index = best.build_index(sc)?;
        let mut files = rec.files(label)?;
        unified_files(&mut files, &best, &index, Precision::Fp32)?;
        let system = QaSystem::unified(&best, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        Ok((best, log, pools))
    })?;

    // 7: alternate reader steps with reconstruction-regularized retrieval steps
    let label = STAGE_LABELS[6];
    let (finetuned, finetune_log) = in_stage(label, || {
        let fcfg = crate::unification::DistillConfig {
            seed: component_seed(seed, "finetune"),
            ..config.finetune.clone()
        };
        let mut snapshots = Vec::new();
        let (_, log) = iterative_finetune(distilled, sc, &examples_sub, &pools, &fcfg, |_, m| {
            snapshots.push(m.clone());
            Ok(())
        })?;
        let best = snapshots.swap_remove(pick_best(&snapshots)?);
        let index = best.build_index(sc)?;
        let mut files = rec.files(label)?;
        unified_files(&mut files, &best, &index, Precision::Fp32)?;
        let system = QaSystem::unified(&best, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        Ok((best, log))
    })?;

    // 8: 8-bit index codes
    let label = STAGE_LABELS[7];
    let int8_index = in_stage(label, || {
        let flat = build_passage_index(&finetuned.retriever(), sc, sdim)?;
        let params = train_quantizer(&flat);
        let q = quantize(&flat, &params)?;
        let index: DenseIndex = q.index.into();
        let mut files = rec.files(label)?;
        unified_files(&mut files, &finetuned, &index, Precision::Fp32)?;
        let system = QaSystem::unified(&finetuned, index, sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)?;
        Ok(system.index)
    })?;

    // 9: half-precision weights, reloaded from the stored file
    let label = STAGE_LABELS[8];
    in_stage(label, || {
        let mut files = rec.files(label)?;
        unified_files(&mut files, &finetuned, &int8_index, Precision::Fp16)?;
        let model = UnifiedModel::from_checkpoint(
            &Checkpoint::from_bytes(&files.read("unified.mrrw")?)?,
            sdim,
        )?;
        let system = QaSystem::unified(&model, int8_index.clone(), sc.clone(), max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)
    })?;

    // 10: every resource compressed; evaluation reads the containers back
    let label = STAGE_LABELS[9];
    let fp16_bytes = finetuned.to_checkpoint().to_bytes(Precision::Fp16)?;
    in_stage(label, || {
        let mut files = rec.files(label)?;
        files.add_compressed(
            "unified.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &fp16_bytes,
        )?;
        files.add_compressed(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &int8_index.to_bytes(),
        )?;
        files.add_compressed(
            "passages.tsv",
            Role::Text,
            ResourceKind::Text,
            sc.to_tsv().as_bytes(),
        )?;
        let model = UnifiedModel::from_checkpoint(
            &Checkpoint::from_bytes(&files.read_compressed("unified.mrrw")?)?,
            sdim,
        )?;
        let index = DenseIndex::from_bytes(&files.read_compressed("index.mrri")?)?;
        let text = String::from_utf8(files.read_compressed("passages.tsv")?)
            .map_err(|e| Error::Data(format!("passage text is not UTF-8: {e}")))?;
        let lines = parse_passage_tsv(&text)?;
        let max_len = sc.iter().map(<[u32]>::len).max().unwrap_or(1);
        let corpus = ingest_text_with_limit(&lines, sc.vocab().clone(), max_len)?;
        let system = QaSystem::unified(&model, index, corpus, max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)
    })?;

    // 11: passages shipped as packed token IDs
    let label = STAGE_LABELS[10];
    in_stage(label, || {
        let mut files = rec.files(label)?;
        files.add_compressed(
            "unified.mrrw",
            Role::Retriever,
            ResourceKind::Binary,
            &fp16_bytes,
        )?;
        files.add_compressed(
            "index.mrri",
            Role::Index,
            ResourceKind::Binary,
            &int8_index.to_bytes(),
        )?;
        files.add_compressed(
            "corpus.mrrc",
            Role::Text,
            ResourceKind::Binary,
            &sc.to_bytes(),
        )?;
        let model = UnifiedModel::from_checkpoint(
            &Checkpoint::from_bytes(&files.read_compressed("unified.mrrw")?)?,
            sdim,
        )?;
        let index = DenseIndex::from_bytes(&files.read_compressed("index.mrri")?)?;
        let corpus = TokenCorpus::from_bytes(&files.read_compressed("corpus.mrrc")?)?;
        let system = QaSystem::unified(&model, index, corpus, max_seq_len);
        rec.push(label, &files, evaluate(&system, &dev_sub, &config.eval)?)
    })?;

    let rows: Vec<(String, FootprintLedger)> = rec
        .stages
        .iter()
        .map(|s| (s.label.clone(), s.ledger))
        .collect();
    let ledger = render_ledger(&rows)?;
    fs::write(out.join("ledger.txt"), &ledger.table)?;
    fs::write(out.join("ledger.tsv"), &ledger.records)?;
    let log_text = |log: &TrainLog| {
        log.records
            .iter()
            .map(|r| format!("{r}\n"))
            .collect::<String>()
    };
    fs::write(out.join("losses-distill.tsv"), log_text(&distill_log))?;
    fs::write(out.join("losses-finetune.tsv"), log_text(&finetune_log))?;
    Ok(PipelineTrace {
        stages: rec.stages,
        ledger,
        filter,
        distill_log,
        finetune_log,
        retriever_losses,
    })
}
