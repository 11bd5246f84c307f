//! Pipeline configuration and its `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::RngCore;

use super::eval::EvalConfig;
use super::synthetic::SyntheticConfig;
use crate::encoder::{STUDENT_RETRIEVAL_DIM, STUDENT_WIDTH, TEACHER_WIDTH};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::optim::OptimizerKind;
use crate::reader::{ExtractionMode, ReaderConfig};
use crate::retriever::RetrieverConfig;
use crate::rng;
use crate::unification::DistillConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub teacher_width: usize,
    pub student_width: usize,
    /// Retrieval width of the baseline retriever, before truncation.
    pub teacher_retrieval_dim: usize,
    pub student_retrieval_dim: usize,
    pub retriever: RetrieverConfig,
    pub reader: ReaderConfig,
    pub filter: FilterConfig,
    /// `n`: passages kept by the filter.
    pub subset_size: usize,
    /// Validation negatives per validation positive for the filter.
    pub val_negative_ratio: usize,
    pub distill: DistillConfig,
    pub finetune: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synthetic: SyntheticConfig::default(),
            teacher_width: TEACHER_WIDTH,
            student_width: STUDENT_WIDTH,
            teacher_retrieval_dim: TEACHER_WIDTH,
            student_retrieval_dim: STUDENT_RETRIEVAL_DIM,
            retriever: RetrieverConfig::default(),
            reader: ReaderConfig::default(),
            filter: FilterConfig {
                lr: 0.03,
                epochs: 12,
                ..FilterConfig::default()
            },
            subset_size: 500,
            val_negative_ratio: 10,
            // Adam's per-coordinate steps drag the dense mixing matrices away
            // from the retrieval solution while the span terms dominate
            distill: DistillConfig {
                lr: 0.01,
                optimizer: OptimizerKind::Sgd,
                ..DistillConfig::default()
            },
            finetune: DistillConfig {
                lr: 0.001,
                epochs: 3,
                optimizer: OptimizerKind::Sgd,
                clip_norm: None,
                ..DistillConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// A per-component seed derived from the master seed.
pub fn component_seed(seed: u64, label: &str) -> u64 {
    rng::derive(seed, label).next_u64()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_optimizer(key: &str, value: &str) -> Result<OptimizerKind> {
    match value {
        "adam" => Ok(OptimizerKind::adam()),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(Error::config(format!(
            "{key} must be adam or sgd, got {value:?}"
        ))),
    }
}

fn optimizer_name(kind: OptimizerKind) -> String {
    match kind {
        OptimizerKind::Sgd => "sgd".into(),
        OptimizerKind::Adam { .. } => "adam".into(),
    }
}

/// A positive norm, or `none`.
fn parse_clip(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn clip_name(clip: Option<f64>) -> String {
    clip.map_or("none".into(), |c| c.to_string())
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "vocab_size" => self.synthetic.vocab_size = parse(k, v)?,
            "passages" => self.synthetic.passages = parse(k, v)?,
            "passage_len" => self.synthetic.passage_len = parse(k, v)?,
            "questions" => self.synthetic.questions = parse(k, v)?,
            "keys_per_passage" => self.synthetic.keys_per_passage = parse(k, v)?,
            "dev_fraction" => self.synthetic.dev_fraction = parse(k, v)?,
            "teacher_width" => self.teacher_width = parse(k, v)?,
            "student_width" => self.student_width = parse(k, v)?,
            "teacher_retrieval_dim" => self.teacher_retrieval_dim = parse(k, v)?,
            "student_retrieval_dim" => self.student_retrieval_dim = parse(k, v)?,
            "retriever.lr" => self.retriever.lr = parse(k, v)?,
            "retriever.epochs" => self.retriever.epochs = parse(k, v)?,
            "retriever.negatives" => self.retriever.negatives = parse(k, v)?,
            "reader.lr" => self.reader.lr = parse(k, v)?,
            "reader.epochs" => self.reader.epochs = parse(k, v)?,
            "reader.passages" => self.reader.passages_per_question = parse(k, v)?,
            "reader.negative_pool" => self.reader.negative_pool = parse(k, v)?,
            "reader.optimizer" => self.reader.optimizer = parse_optimizer(k, v)?,
            "max_seq_len" => {
                let n = parse(k, v)?;
                self.reader.max_seq_len = n;
                self.distill.max_seq_len = n;
                self.finetune.max_seq_len = n;
            }
            "filter.width" => self.filter.width = parse(k, v)?,
            "filter.lr" => self.filter.lr = parse(k, v)?,
            "filter.epochs" => self.filter.epochs = parse(k, v)?,
            "filter.eval_interval" => self.filter.eval_interval = parse(k, v)?,
            "filter.log_base" => self.filter.log_base = parse(k, v)?,
            "subset_size" => self.subset_size = parse(k, v)?,
            "val_negative_ratio" => self.val_negative_ratio = parse(k, v)?,
            "distill.lr" => self.distill.lr = parse(k, v)?,
            "distill.epochs" => self.distill.epochs = parse(k, v)?,
            "distill.passages" => self.distill.passages = parse(k, v)?,
            "distill.pool_depth" => self.distill.pool_depth = parse(k, v)?,
            "distill.temperature" => self.distill.temperature = parse(k, v)?,
            "distill.optimizer" => self.distill.optimizer = parse_optimizer(k, v)?,
            "distill.clip" => self.distill.clip_norm = parse_clip(k, v)?,
            "finetune.lr" => self.finetune.lr = parse(k, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(k, v)?,
            "finetune.passages" => self.finetune.passages = parse(k, v)?,
            "finetune.pool_depth" => self.finetune.pool_depth = parse(k, v)?,
            "finetune.temperature" => self.finetune.temperature = parse(k, v)?,
            "eval.grid" => self.eval.grid = parse_list(k, v)?,
            "eval.hit_ks" => self.eval.hit_ks = parse_list(k, v)?,
            "eval.max_span_len" => self.eval.max_span_len = parse(k, v)?,
            "eval.mode" => {
                self.eval.mode = match v {
                    "top" => ExtractionMode::TopRanked,
                    "weighted" => ExtractionMode::Weighted {
                        lambda: crate::reader::REFERENCE_LAMBDA,
                    },
                    _ => {
                        return Err(Error::config(format!(
                            "eval.mode must be top or weighted, got {v:?}"
                        )))
                    }
                }
            }
            "eval.lambda" => {
                self.eval.mode = ExtractionMode::Weighted {
                    lambda: parse(k, v)?,
                };
            }
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The effective settings, in the same text form `from_text` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        let list = |xs: &[usize]| {
            xs.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        kv("seed", self.seed.to_string());
        kv("vocab_size", self.synthetic.vocab_size.to_string());
        kv("passages", self.synthetic.passages.to_string());
        kv("passage_len", self.synthetic.passage_len.to_string());
        kv("questions", self.synthetic.questions.to_string());
        kv(
            "keys_per_passage",
            self.synthetic.keys_per_passage.to_string(),
        );
        kv("dev_fraction", self.synthetic.dev_fraction.to_string());
        kv("teacher_width", self.teacher_width.to_string());
        kv("student_width", self.student_width.to_string());
        kv(
            "teacher_retrieval_dim",
            self.teacher_retrieval_dim.to_string(),
        );
        kv(
            "student_retrieval_dim",
            self.student_retrieval_dim.to_string(),
        );
        kv("retriever.lr", self.retriever.lr.to_string());
        kv("retriever.epochs", self.retriever.epochs.to_string());
        kv("retriever.negatives", self.retriever.negatives.to_string());
        kv("reader.lr", self.reader.lr.to_string());
        kv("reader.epochs", self.reader.epochs.to_string());
        kv(
            "reader.passages",
            self.reader.passages_per_question.to_string(),
        );
        kv(
            "reader.negative_pool",
            self.reader.negative_pool.to_string(),
        );
        kv("reader.optimizer", optimizer_name(self.reader.optimizer));
        kv("max_seq_len", self.reader.max_seq_len.to_string());
        kv("filter.width", self.filter.width.to_string());
        kv("filter.lr", self.filter.lr.to_string());
        kv("filter.epochs", self.filter.epochs.to_string());
        kv(
            "filter.eval_interval",
            self.filter.eval_interval.to_string(),
        );
        kv("filter.log_base", self.filter.log_base.to_string());
        kv("subset_size", self.subset_size.to_string());
        kv("val_negative_ratio", self.val_negative_ratio.to_string());
        for (name, d) in [("distill", &self.distill), ("finetune", &self.finetune)] {
            kv(&format!("{name}.lr"), d.lr.to_string());
            kv(&format!("{name}.epochs"), d.epochs.to_string());
            kv(&format!("{name}.passages"), d.passages.to_string());
            kv(&format!("{name}.pool_depth"), d.pool_depth.to_string());
            kv(&format!("{name}.temperature"), d.temperature.to_string());
        }
        kv("distill.optimizer", optimizer_name(self.distill.optimizer));
        kv("distill.clip", clip_name(self.distill.clip_norm));
        kv("eval.grid", list(&self.eval.grid));
        kv("eval.hit_ks", list(&self.eval.hit_ks));
        kv("eval.max_span_len", self.eval.max_span_len.to_string());
        match self.eval.mode {
            ExtractionMode::TopRanked => kv("eval.mode", "top".into()),
            ExtractionMode::Weighted { lambda } => kv("eval.lambda", lambda.to_string()),
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("eval.grid", "1,3").unwrap();
        cfg.set("finetune.lr", "0.5").unwrap();
        assert_eq!(PipelineConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_text("nope"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_text("mystery=1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_text("seed=x"),
            Err(Error::Config(_))
        ));
        let cfg = PipelineConfig::from_text("# comment\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }
}
