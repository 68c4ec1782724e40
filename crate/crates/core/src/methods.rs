//! Adaptation methods selectable by name.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::baseline::train_source_only;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::DatasetSplit;
use crate::metrics::Predictor;
use crate::train::{TrainConfig, TrainHistory, Trainer, PSEUDO_LABEL_HEADER};
use crate::{CoreError, Result};

/// Checkpointing and resumption, honored by methods that support them.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Written after every `checkpoint_every` epochs and after the last one.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
    /// Per-epoch pseudo-labels of every training window, as CSV.
    pub pseudo_label_log: Option<PathBuf>,
}

pub struct Fitted {
    pub model: Box<dyn Predictor>,
    /// Per-epoch record, for methods that keep one.
    pub history: Option<TrainHistory>,
}

pub trait AdaptationMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, cfg: &TrainConfig, split: &DatasetSplit, opts: &FitOptions) -> Result<Fitted>;
}

#[derive(Default)]
pub struct Dgdata;

impl AdaptationMethod for Dgdata {
    fn name(&self) -> &'static str {
        "dgdata"
    }

    fn fit(&self, cfg: &TrainConfig, split: &DatasetSplit, opts: &FitOptions) -> Result<Fitted> {
        let mut trainer = match &opts.resume {
            Some(path) => {
                let mut state = load_checkpoint(path)?;
                if state.config.epochs < cfg.epochs {
                    state.config.epochs = cfg.epochs;
                }
                Trainer::resume(state, split)?
            }
            None => Trainer::new(cfg.clone(), split)?,
        };
        let mut log = match &opts.pseudo_label_log {
            Some(path) => {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(opts.resume.is_some())
                    .write(true)
                    .truncate(opts.resume.is_none())
                    .open(path)
                    .map_err(|e| CoreError::io(path, e))?;
                if f.metadata().map_err(|e| CoreError::io(path, e))?.len() == 0 {
                    f.write_all(PSEUDO_LABEL_HEADER.as_bytes()).map_err(|e| CoreError::io(path, e))?;
                }
                Some((path, BufWriter::new(f)))
            }
            None => None,
        };
        while !trainer.is_finished() {
            let epoch = trainer.run_epoch()?.epoch;
            if let Some((path, w)) = &mut log {
                w.write_all(trainer.pseudo_label_rows().as_bytes()).map_err(|e| CoreError::io(&**path, e))?;
            }
            if let Some(path) = &opts.checkpoint {
                let periodic = opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0;
                if periodic || trainer.is_finished() {
                    save_checkpoint(path, &trainer.state)?;
                }
            }
        }
        if let Some((path, mut w)) = log {
            w.flush().map_err(|e| CoreError::io(path, e))?;
        }
        let state = trainer.state;
        let (model, history) = (state.model, state.history);
        Ok(Fitted {
            model: Box::new(model),
            history: Some(history),
        })
    }
}

/// Feature extractor and linear head trained on the source user only.
#[derive(Default)]
pub struct SourceOnly;

impl AdaptationMethod for SourceOnly {
    fn name(&self) -> &'static str {
        "source-only"
    }

    fn fit(&self, cfg: &TrainConfig, split: &DatasetSplit, opts: &FitOptions) -> Result<Fitted> {
        if opts.resume.is_some() || opts.checkpoint.is_some() || opts.pseudo_label_log.is_some() {
            return Err(CoreError::Config("source-only training keeps no checkpoints or pseudo-labels".into()));
        }
        Ok(Fitted {
            model: Box::new(train_source_only(cfg, split)?),
            history: None,
        })
    }
}

pub struct MethodRegistry {
    methods: Vec<Box<dyn AdaptationMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self { methods: Vec::new() };
        r.register(Box::new(Dgdata));
        r.register(Box::new(SourceOnly));
        r
    }
}

impl MethodRegistry {
    /// Adds a method, replacing any registered under the same name.
    pub fn register(&mut self, method: Box<dyn AdaptationMethod>) {
        self.methods.retain(|m| m.name() != method.name());
        self.methods.push(method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AdaptationMethod> {
        self.methods
            .iter()
            .find(|m| m.name() == name)
            .map(|m| m.as_ref())
            .ok_or_else(|| CoreError::Config(format!("unknown method {name:?}; known: {}", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.iter().map(|m| m.name()).collect()
    }
}
