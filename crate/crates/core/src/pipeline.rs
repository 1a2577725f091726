//! Whole-run helpers: corpus, codebook, both training stages and evaluation
//! driven by one [`RunConfig`].

use std::path::Path;

use ndarray::{concatenate, Axis};

use crate::benchkit::{build_corpus, evaluate, CorpusManifest, EvalReport, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::trainer::{run_stage, Dataset, RunOptions, Stage, StageOutcome};
use crate::units::{fit_kmeans_with, Codebook, FeatureMatrix};
use crate::vfnet::{FieldNet, InputMode};

/// Stacks feature matrices of equal width.
pub fn stack_features(feats: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    if feats.is_empty() {
        return Err(Error::invalid("no features to stack"));
    }
    let views: Vec<_> = feats.iter().map(|f| f.rows().view()).collect();
    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::invalid(format!("feature widths differ: {e}")))?;
    FeatureMatrix::new(stacked)
}

/// Clean features of every training entry, stacked.
pub fn clean_train_features(corpus: &CorpusManifest) -> Result<FeatureMatrix> {
    let feats = corpus
        .split(Split::Train)
        .map(|e| io::read_features(&corpus.resolve(&e.clean_feature_path)))
        .collect::<Result<Vec<_>>>()?;
    if feats.is_empty() {
        return Err(Error::invalid("corpus has no training entries"));
    }
    stack_features(&feats)
}

/// Codebook fit on the clean training features.
pub fn fit_codebook(corpus: &CorpusManifest, cfg: &RunConfig) -> Result<Codebook> {
    let feats = clean_train_features(corpus)?;
    fit_kmeans_with(&feats, cfg.kmeans.k, cfg.kmeans_seed(), &cfg.kmeans_config())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub corpus: CorpusManifest,
    pub codebook: Codebook,
    pub pretrain: StageOutcome,
    pub finetune: StageOutcome,
    pub report: EvalReport,
}

/// Builds the corpus under `dir/corpus`, trains both stages into
/// `dir/pretrain` and `dir/finetune` and evaluates on the test split.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpus = build_corpus(&dir.join("corpus"), &cfg.corpus_config()?, cfg.paths.workers)?;
    let codebook = fit_codebook(&corpus, cfg)?;
    let mode = cfg.model.input_mode;
    let model = cfg.model_config();
    let cb = (mode == InputMode::Units).then_some(&codebook);

    let data = Dataset::from_corpus(&corpus, cb, Stage::Pretrain, mode)?;
    let pre_opts = RunOptions { out_dir: dir.join("pretrain"), ..Default::default() };
    let pretrain = run_stage(&data, &model, &cfg.train_config(Stage::Pretrain), &pre_opts)?;

    let data = Dataset::from_corpus(&corpus, cb, Stage::Finetune, mode)?;
    let fine_opts = RunOptions {
        out_dir: dir.join("finetune"),
        init: Some(pretrain.checkpoint.clone()),
        ..Default::default()
    };
    let finetune = run_stage(&data, &model, &cfg.train_config(Stage::Finetune), &fine_opts)?;

    let net = FieldNet::new(finetune.state.net.params.clone());
    let report = evaluate(&corpus, &net, cb, &cfg.eval_config(data.median_duplication()))?;
    Ok(RunOutcome { corpus, codebook, pretrain, finetune, report })
}
