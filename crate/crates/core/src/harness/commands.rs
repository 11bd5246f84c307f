//! One function per command-line subcommand. Every command works inside an
//! output directory and picks up whatever earlier commands left there:
//!
//! ```text
//! data/                      gen-synthetic
//! teacher/{retriever,reader}.mrrw
//! filter/filter.mrrw         train-filter
//! subset.bin                 filter-corpus
//! retriever/retriever.mrrw   train-retriever (shared, student width)
//! unified/distilled.mrrw     distill
//! unified/finetuned.mrrw     finetune
//! index/{flat,int8}.mrri     build-index, quantize-index
//! package/                   pack
//! ```
//!
//! Each command returns a human-readable report and writes a tab-separated
//! twin next to its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{component_seed, PipelineConfig};
use super::eval::{evaluate, DevQuestion, EvalReport, QaSystem};
use super::pipeline::{dual_init, filter_split, prepare, run_pipeline, Prepared, STAGE_LABELS};
use super::synthetic::{gen_synthetic, SyntheticDataset};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use crate::corpus::{subset_corpus, TokenCorpus};
use crate::error::{Error, Result};
use crate::filter::{
    read_subset, select_top_n, train_filter, write_subset, FilterConfig, FilterModel,
};
use crate::index::{quantize, read_index, train_quantizer, write_index, DenseIndex};
use crate::packaging::{
    compress_resource, measure_footprint, render_ledger, CompressedContainer, FootprintLedger,
    ResourceKind, ResourceManifest, Role,
};
use crate::reader::{train_reader, Reader, ReaderExample};
use crate::retriever::{build_passage_index, retrieve, train_retriever, Retriever};
use crate::unification::{
    build_read_pool, distill, iterative_finetune, select_checkpoint, TrainLog, UnifiedModel,
};

/// Which trained model answers questions or fills an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    /// The teacher retriever and reader.
    Teacher,
    /// The shared student retriever, read by the teacher reader.
    Retriever,
    /// The newest unified model: finetuned if present, else distilled.
    Unified,
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "retriever" => Ok(Self::Retriever),
            "unified" => Ok(Self::Unified),
            _ => Err(Error::config(format!(
                "model must be teacher, retriever or unified, got {s:?}"
            ))),
        }
    }
}

pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

/// The corpus commands operate on, with dev and training data indexed into it.
struct Working {
    corpus: TokenCorpus,
    dev: Vec<DevQuestion>,
    examples: Vec<ReaderExample>,
    prep: Prepared,
    full: TokenCorpus,
}

fn missing(what: &str, path: &Path, hint: &str) -> Error {
    Error::Data(format!(
        "{what} not found at {}; run {hint} first",
        path.display()
    ))
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(fs::write(p, contents)?)
    }

    fn require(&self, rel: &str, what: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(what, &p, hint))
        }
    }

    fn dataset(&self) -> Result<SyntheticDataset> {
        SyntheticDataset::read(&self.require("data", "dataset", "gen-synthetic")?)
    }

    /// The filtered corpus when `subset.bin` exists, else the full one.
    fn working(&self) -> Result<Working> {
        let ds = self.dataset()?;
        let prep = prepare(&ds);
        let full = ds.corpus.clone();
        let subset = self.path("subset.bin");
        if subset.exists() {
            let sub = subset_corpus(&full, &read_subset(&subset)?)?;
            let (dev, examples) = prep.on_subset(&sub);
            Ok(Working {
                corpus: sub.corpus,
                dev,
                examples,
                prep,
                full,
            })
        } else {
            Ok(Working {
                corpus: full.clone(),
                dev: prep.dev.clone(),
                examples: prep.examples.clone(),
                prep,
                full,
            })
        }
    }

    fn teacher(&self) -> Result<(Retriever, Reader)> {
        let r = self.require(
            "teacher/retriever.mrrw",
            "teacher retriever",
            "train-teacher",
        )?;
        let x = self.require("teacher/reader.mrrw", "teacher reader", "train-teacher")?;
        Ok((
            Retriever::from_checkpoint(&load_checkpoint(&r)?)?,
            Reader::from_checkpoint(&load_checkpoint(&x)?)?,
        ))
    }

    fn student_retriever(&self) -> Result<Retriever> {
        let p = self.require(
            "retriever/retriever.mrrw",
            "student retriever",
            "train-retriever",
        )?;
        Retriever::from_checkpoint(&load_checkpoint(&p)?)
    }

    fn unified(&self, name: &str, hint: &str) -> Result<UnifiedModel> {
        let p = self.require(&format!("unified/{name}.mrrw"), "unified model", hint)?;
        UnifiedModel::from_checkpoint(&load_checkpoint(&p)?, self.config.student_retrieval_dim)
    }

    fn newest_unified(&self) -> Result<UnifiedModel> {
        if self.path("unified/finetuned.mrrw").exists() {
            self.unified("finetuned", "finetune")
        } else {
            self.unified("distilled", "distill")
        }
    }

    /// Retriever, reader encoder and heads for `choice`, plus the retrieval
    /// dimension its index uses.
    fn system_parts(&self, choice: ModelChoice) -> Result<(Retriever, Reader, usize)> {
        match choice {
            ModelChoice::Teacher => {
                let (r, x) = self.teacher()?;
                Ok((r, x, self.config.teacher_retrieval_dim))
            }
            ModelChoice::Retriever => {
                let (_, x) = self.teacher()?;
                Ok((
                    self.student_retriever()?,
                    x,
                    self.config.student_retrieval_dim,
                ))
            }
            ModelChoice::Unified => {
                let m = self.newest_unified()?;
                let reader = Reader {
                    encoder: m.encoder.clone(),
                    heads: m.heads.clone(),
                };
                Ok((m.retriever(), reader, m.retrieval_dim))
            }
        }
    }

    fn pick_best(&self, w: &Working, snapshots: &[UnifiedModel]) -> Result<usize> {
        select_checkpoint(snapshots, |m| {
            let system = QaSystem::unified(
                m,
                m.build_index(&w.corpus)?,
                w.corpus.clone(),
                self.config.reader.max_seq_len,
            );
            Ok(evaluate(&system, &w.dev, &self.config.eval)?.best_em)
        })
    }
}

fn eval_unified(ws: &Workspace, w: &Working, m: &UnifiedModel) -> Result<EvalReport> {
    let system = QaSystem::unified(
        m,
        m.build_index(&w.corpus)?,
        w.corpus.clone(),
        ws.config.reader.max_seq_len,
    );
    evaluate(&system, &w.dev, &ws.config.eval)
}

fn losses_tsv(losses: &[f64]) -> String {
    let mut s = String::from("epoch\tloss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{e}\t{l}");
    }
    s
}

fn log_tsv(log: &TrainLog) -> String {
    let mut s = String::from("step\tl_read\tl_ret\tl_recon\tl_nll\n");
    for r in &log.records {
        let _ = writeln!(s, "{r}");
    }
    s
}

pub fn cmd_gen_synthetic(ws: &Workspace) -> Result<String> {
    let ds = gen_synthetic(&ws.config.synthetic, ws.config.seed)?;
    ds.write(&ws.path("data"))?;
    let report = format!(
        "vocabulary {}\npassages {}\nquestions {} ({} train, {} dev)\n",
        ds.vocab().len(),
        ds.corpus.len(),
        ds.records.len(),
        ds.train.len(),
        ds.dev.len()
    );
    ws.write(
        "data/summary.tsv",
        format!(
            "vocabulary\tpassages\ttrain\tdev\n{}\t{}\t{}\t{}\n",
            ds.vocab().len(),
            ds.corpus.len(),
            ds.train.len(),
            ds.dev.len()
        ),
    )?;
    Ok(report)
}

/// Teacher-width dual retriever and reader over the full corpus.
pub fn cmd_train_teacher(ws: &Workspace) -> Result<String> {
    let ds = ws.dataset()?;
    let prep = prepare(&ds);
    let c = &ws.config;
    let mut rcfg = c.retriever.clone();
    rcfg.retrieval_dim = c.teacher_retrieval_dim;
    rcfg.seed = component_seed(c.seed, "omega");
    let init = dual_init(ds.corpus.vocab().len(), c.teacher_width, rcfg.seed);
    let (omega, losses) = train_retriever(init, &ds.corpus, &prep.pairs, &rcfg)?;
    let index: DenseIndex =
        build_passage_index(&omega, &ds.corpus, c.teacher_retrieval_dim)?.into();
    let mut xcfg = c.reader.clone();
    xcfg.width = c.teacher_width;
    xcfg.seed = component_seed(c.seed, "xi");
    let xi = train_reader(&ds.corpus, &prep.examples, &omega, &index, &xcfg, |_, _| {
        Ok(())
    })?;
    fs::create_dir_all(ws.path("teacher"))?;
    save_checkpoint(
        &omega.to_checkpoint(),
        Precision::Fp32,
        &ws.path("teacher/retriever.mrrw"),
    )?;
    save_checkpoint(
        &xi.to_checkpoint(),
        Precision::Fp32,
        &ws.path("teacher/reader.mrrw"),
    )?;
    ws.write("teacher/losses.tsv", losses_tsv(&losses))?;
    let system = QaSystem {
        retriever: omega,
        reader_encoder: xi.encoder,
        heads: xi.heads,
        index,
        corpus: ds.corpus.clone(),
        max_seq_len: c.reader.max_seq_len,
    };
    let report = evaluate(&system, &prep.dev, &c.eval)?;
    ws.write("teacher/eval.tsv", report.records())?;
    Ok(format!("teacher on the full corpus\n{}", report.table()))
}

pub fn cmd_train_filter(ws: &Workspace) -> Result<String> {
    let ds = ws.dataset()?;
    let prep = prepare(&ds);
    let (omega, _) = ws.teacher()?;
    let index: DenseIndex =
        build_passage_index(&omega, &ds.corpus, ws.config.teacher_retrieval_dim)?.into();
    let split = filter_split(
        &omega,
        &index,
        &ds,
        &prep,
        ws.config.val_negative_ratio,
        ws.config.seed,
    )?;
    let fcfg = FilterConfig {
        seed: component_seed(ws.config.seed, "filter"),
        ..ws.config.filter.clone()
    };
    let (model, trace) = train_filter(&ds.corpus, &split, &fcfg)?;
    fs::create_dir_all(ws.path("filter"))?;
    save_checkpoint(
        &model.to_checkpoint(),
        Precision::Fp32,
        &ws.path("filter/filter.mrrw"),
    )?;
    let mut tsv = String::from("step\thit_val\tselected\n");
    let mut table = format!("{:>8} {:>8}\n", "step", "hit_val");
    for (i, ck) in trace.checkpoints.iter().enumerate() {
        let sel = i == trace.selected;
        let _ = writeln!(tsv, "{}\t{}\t{}", ck.step, ck.hit_val, u8::from(sel));
        let _ = writeln!(
            table,
            "{:>8} {:>8.4}{}",
            ck.step,
            ck.hit_val,
            if sel { "  *" } else { "" }
        );
    }
    ws.write("filter/trace.tsv", tsv)?;
    Ok(format!(
        "filter trained on {} positives, {} negatives; {} validation positives\n{table}",
        split.plus_train.len(),
        split.minus_train.len(),
        split.plus_val.len()
    ))
}

pub fn cmd_filter_corpus(ws: &Workspace, n: Option<usize>) -> Result<String> {
    let ds = ws.dataset()?;
    let p = ws.require("filter/filter.mrrw", "filter", "train-filter")?;
    let model = FilterModel::from_checkpoint(&load_checkpoint(&p)?)?;
    let n = n.unwrap_or(ws.config.subset_size).min(ds.corpus.len());
    let (keep, sub) = select_top_n(&model, &ds.corpus, n)?;
    write_subset(&keep, &ws.path("subset.bin"))?;
    let positives: std::collections::BTreeSet<usize> =
        ds.records.iter().map(|r| r.positive_id as usize).collect();
    let kept = positives
        .iter()
        .filter(|p| sub.new_id(**p).is_some())
        .count();
    ws.write(
        "subset.tsv",
        format!(
            "kept\tcorpus\tpositives_kept\tpositives\n{n}\t{}\t{kept}\t{}\n",
            ds.corpus.len(),
            positives.len()
        ),
    )?;
    Ok(format!(
        "kept {n} of {} passages; {kept} of {} positives survive\n",
        ds.corpus.len(),
        positives.len()
    ))
}

/// Shared retriever at student width, trained on all training pairs.
pub fn cmd_train_retriever(ws: &Workspace) -> Result<String> {
    let w = ws.working()?;
    let c = &ws.config;
    let mut rcfg = c.retriever.clone();
    rcfg.retrieval_dim = c.student_retrieval_dim;
    rcfg.seed = component_seed(c.seed, "theta");
    let init = Retriever::Shared(crate::encoder::EncoderParams::init(
        w.full.vocab().len(),
        c.student_width,
        rcfg.seed,
    ));
    let (theta, losses) = train_retriever(init, &w.full, &w.prep.pairs, &rcfg)?;
    fs::create_dir_all(ws.path("retriever"))?;
    save_checkpoint(
        &theta.to_checkpoint(),
        Precision::Fp32,
        &ws.path("retriever/retriever.mrrw"),
    )?;
    ws.write("retriever/losses.tsv", losses_tsv(&losses))?;
    let index: DenseIndex = build_passage_index(&theta, &w.corpus, c.student_retrieval_dim)?.into();
    let ks: Vec<usize> = c
        .eval
        .hit_ks
        .iter()
        .map(|k| (*k).min(index.len()))
        .collect();
    let mut hits = vec![0usize; ks.len()];
    let depth = ks.iter().copied().max().unwrap_or(1);
    for q in &w.dev {
        let ids = retrieve(&theta, &q.question, &index, depth)?.ids();
        if let Some(p) = q.positive {
            for (h, k) in hits.iter_mut().zip(&ks) {
                *h += usize::from(ids[..*k].contains(&p));
            }
        }
    }
    let n = w.dev.len().max(1) as f64;
    let mut table = format!(
        "shared retriever, width {}, dim {}\n",
        c.student_width, c.student_retrieval_dim
    );
    let mut tsv = String::from("k\thit\n");
    for (k, h) in ks.iter().zip(&hits) {
        let _ = writeln!(table, "hit@{k:<4} {:.4}", *h as f64 / n);
        let _ = writeln!(tsv, "{k}\t{}", *h as f64 / n);
    }
    ws.write("retriever/eval.tsv", tsv)?;
    Ok(table)
}

pub fn cmd_distill(ws: &Workspace) -> Result<String> {
    let w = ws.working()?;
    let c = &ws.config;
    let (omega, xi) = ws.teacher()?;
    let shared = match ws.student_retriever()? {
        Retriever::Shared(p) => p,
        Retriever::Dual { .. } => {
            return Err(Error::config(
                "distillation needs a shared student retriever",
            ))
        }
    };
    let dcfg = crate::unification::DistillConfig {
        seed: component_seed(c.seed, "distill"),
        ..c.distill.clone()
    };
    let questions: Vec<Vec<u32>> = w.examples.iter().map(|e| e.question.clone()).collect();
    let pools = build_read_pool(
        &omega,
        &w.corpus,
        &questions,
        dcfg.pool_depth.min(w.corpus.len()),
        c.teacher_retrieval_dim,
    )?;
    let student = UnifiedModel::from_retriever(
        shared,
        c.student_retrieval_dim,
        component_seed(c.seed, "unified-heads"),
    );
    let mut snapshots = Vec::new();
    let (_, log) = distill(
        student,
        &xi,
        &w.corpus,
        &w.examples,
        &pools,
        &dcfg,
        |_, m| {
            snapshots.push(m.clone());
            Ok(())
        },
    )?;
    let best = snapshots.swap_remove(ws.pick_best(&w, &snapshots)?);
    fs::create_dir_all(ws.path("unified"))?;
    save_checkpoint(
        &best.to_checkpoint(),
        Precision::Fp32,
        &ws.path("unified/distilled.mrrw"),
    )?;
    ws.write("unified/losses-distill.tsv", log_tsv(&log))?;
    let report = eval_unified(ws, &w, &best)?;
    ws.write("unified/eval-distilled.tsv", report.records())?;
    Ok(format!(
        "distilled unified model ({} questions skipped)\n{}",
        log.skipped_questions,
        report.table()
    ))
}

pub fn cmd_finetune(ws: &Workspace) -> Result<String> {
    let w = ws.working()?;
    let c = &ws.config;
    let (omega, _) = ws.teacher()?;
    let start = ws.unified("distilled", "distill")?;
    let fcfg = crate::unification::DistillConfig {
        seed: component_seed(c.seed, "finetune"),
        ..c.finetune.clone()
    };
    let questions: Vec<Vec<u32>> = w.examples.iter().map(|e| e.question.clone()).collect();
    let pools = build_read_pool(
        &omega,
        &w.corpus,
        &questions,
        fcfg.pool_depth.min(w.corpus.len()),
        c.teacher_retrieval_dim,
    )?;
    let mut snapshots = Vec::new();
    let (_, log) = iterative_finetune(start, &w.corpus, &w.examples, &pools, &fcfg, |_, m| {
        snapshots.push(m.clone());
        Ok(())
    })?;
    let best = snapshots.swap_remove(ws.pick_best(&w, &snapshots)?);
    save_checkpoint(
        &best.to_checkpoint(),
        Precision::Fp32,
        &ws.path("unified/finetuned.mrrw"),
    )?;
    ws.write("unified/losses-finetune.tsv", log_tsv(&log))?;
    let report = eval_unified(ws, &w, &best)?;
    ws.write("unified/eval-finetuned.tsv", report.records())?;
    Ok(format!("finetuned unified model\n{}", report.table()))
}

pub fn cmd_build_index(ws: &Workspace, choice: ModelChoice) -> Result<String> {
    let w = ws.working()?;
    let (retriever, _, dim) = ws.system_parts(choice)?;
    let flat = build_passage_index(&retriever, &w.corpus, dim)?;
    let index: DenseIndex = flat.into();
    fs::create_dir_all(ws.path("index"))?;
    write_index(&index, &ws.path("index/flat.mrri"))?;
    ws.write(
        "index/flat.tsv",
        format!(
            "rows\tdim\tfile_bytes\n{}\t{}\t{}\n",
            index.len(),
            index.dim(),
            index.to_bytes().len()
        ),
    )?;
    Ok(format!(
        "flat index: {} rows x {} dims, {} bytes\n",
        index.len(),
        index.dim(),
        index.to_bytes().len()
    ))
}

pub fn cmd_quantize_index(ws: &Workspace) -> Result<String> {
    let p = ws.require("index/flat.mrri", "flat index", "build-index")?;
    let flat = match read_index(&p)? {
        DenseIndex::Flat(f) => f,
        DenseIndex::Int8 { .. } => {
            return Err(Error::Data(format!("{} is already quantized", p.display())))
        }
    };
    let params = train_quantizer(&flat);
    let q = quantize(&flat, &params)?;
    let index: DenseIndex = q.index.into();
    write_index(&index, &ws.path("index/int8.mrri"))?;
    let (a, b) = (flat.file_bytes(), index.to_bytes().len());
    ws.write(
        "index/int8.tsv",
        format!(
            "flat_bytes\tint8_bytes\tratio\n{a}\t{b}\t{}\n",
            b as f64 / a as f64
        ),
    )?;
    Ok(format!(
        "int8 index: {a} -> {b} bytes (ratio {:.4})\n",
        b as f64 / a as f64
    ))
}

/// The newest unified model at half precision, the best index available and
/// the corpus as token IDs, each compressed.
pub fn cmd_pack(ws: &Workspace) -> Result<String> {
    let w = ws.working()?;
    let model = ws.newest_unified()?;
    let index = if ws.path("index/int8.mrri").exists() {
        read_index(&ws.path("index/int8.mrri"))?
    } else {
        model.build_index(&w.corpus)?
    };
    if index.len() != w.corpus.len() {
        return Err(Error::Alignment(format!(
            "index holds {} rows for {} passages; rebuild it",
            index.len(),
            w.corpus.len()
        )));
    }
    let dir = ws.path("package");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut manifest = ResourceManifest::new();
    let parts: [(&str, Role, Vec<u8>); 3] = [
        (
            "unified.mrrw",
            Role::Retriever,
            model.to_checkpoint().to_bytes(Precision::Fp16)?,
        ),
        ("index.mrri", Role::Index, index.to_bytes()),
        ("corpus.mrrc", Role::Text, w.corpus.to_bytes()),
    ];
    for (name, role, bytes) in parts {
        let c = compress_resource(name, &bytes, ResourceKind::Binary, None)?;
        let file = format!("{name}.mrrz");
        fs::write(dir.join(&file), c.to_bytes())?;
        manifest.add(&file, role, dir.join(&file), ResourceKind::Binary)?;
    }
    let ledger = measure_footprint(&manifest)?;
    let report = render_ledger(&[("package".to_string(), ledger)])?;
    fs::write(dir.join("ledger.tsv"), &report.records)?;
    Ok(report.table)
}

/// Loads a packed system back from its compressed containers.
fn unpack(ws: &Workspace) -> Result<(UnifiedModel, DenseIndex, TokenCorpus)> {
    let dir = ws.require("package", "package", "pack")?;
    let read = |name: &str| -> Result<Vec<u8>> {
        CompressedContainer::from_bytes(&fs::read(dir.join(format!("{name}.mrrz")))?)?.decompress()
    };
    let ck = crate::checkpoint::Checkpoint::from_bytes(&read("unified.mrrw")?)?;
    Ok((
        UnifiedModel::from_checkpoint(&ck, ws.config.student_retrieval_dim)?,
        DenseIndex::from_bytes(&read("index.mrri")?)?,
        TokenCorpus::from_bytes(&read("corpus.mrrc")?)?,
    ))
}

/// Where `evaluate` takes its system from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalSource {
    /// A trained model with a freshly built index, or `index` if given.
    Model {
        choice: ModelChoice,
        index: Option<PathBuf>,
    },
    /// The packed system under `package/`.
    Package,
}

pub fn cmd_evaluate(ws: &Workspace, source: &EvalSource) -> Result<String> {
    let w = ws.working()?;
    let msl = ws.config.reader.max_seq_len;
    let (system, label) = match source {
        EvalSource::Package => {
            let (m, index, corpus) = unpack(ws)?;
            (
                QaSystem::unified(&m, index, corpus, msl),
                "package".to_string(),
            )
        }
        EvalSource::Model { choice, index } => {
            let (retriever, reader, dim) = ws.system_parts(*choice)?;
            let index = match index {
                Some(p) => read_index(p)?,
                None => build_passage_index(&retriever, &w.corpus, dim)?.into(),
            };
            let system = QaSystem {
                retriever,
                reader_encoder: reader.encoder,
                heads: reader.heads,
                index,
                corpus: w.corpus.clone(),
                max_seq_len: msl,
            };
            (system, format!("{choice:?}").to_lowercase())
        }
    };
    let report = evaluate(&system, &w.dev, &ws.config.eval)?;
    ws.write(&format!("eval-{label}.tsv"), report.records())?;
    let mut s = format!(
        "{label} on {} dev questions\n{}",
        w.dev.len(),
        report.table()
    );
    for warning in &report.warnings {
        let _ = writeln!(s, "warning: {warning}");
    }
    Ok(s)
}

fn role_for(file: &str) -> Option<Role> {
    let stem = file.split('.').next().unwrap_or("");
    match stem {
        "retriever" | "unified" => Some(Role::Retriever),
        "reader" => Some(Role::Reader),
        "index" => Some(Role::Index),
        "passages" | "corpus" => Some(Role::Text),
        _ => None,
    }
}

fn measure_dir(dir: &Path) -> Result<FootprintLedger> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut manifest = ResourceManifest::new();
    for name in names {
        if let Some(role) = role_for(&name) {
            manifest.add(&name, role, dir.join(&name), ResourceKind::Binary)?;
        }
    }
    measure_footprint(&manifest)
}

/// Footprint of every stage directory a `run-all` left behind, followed by
/// `package/` if present.
pub fn cmd_ledger(ws: &Workspace) -> Result<String> {
    let mut rows: Vec<(String, FootprintLedger)> = Vec::new();
    let stages = ws.path("stages");
    if stages.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&stages)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            let name = d
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let label = name
                .split_once('-')
                .map_or(name.clone(), |(_, l)| l.to_string());
            rows.push((label, measure_dir(&d)?));
        }
    }
    let package = ws.path("package");
    if package.is_dir() {
        rows.push(("package".to_string(), measure_dir(&package)?));
    }
    if rows.is_empty() {
        return Err(missing(
            "stage or package directories",
            &ws.root,
            "run-all or pack",
        ));
    }
    let report = render_ledger(&rows)?;
    ws.write("ledger.txt", &report.table)?;
    ws.write("ledger.tsv", &report.records)?;
    Ok(report.table)
}

pub fn cmd_run_all(ws: &Workspace) -> Result<String> {
    let trace = run_pipeline(&ws.config, &ws.root)?;
    let mut s = trace.table();
    s.push('\n');
    s.push_str(&trace.ledger.table);
    let _ = writeln!(
        s,
        "\nfilter kept {}/{} positives; {} stages",
        trace.filter.positives_kept,
        trace.filter.positives_total,
        STAGE_LABELS.len()
    );
    Ok(s)
}
