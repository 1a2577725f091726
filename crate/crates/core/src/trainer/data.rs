use ndarray::{s, Array2};
use rand::seq::SliceRandom;

use super::Stage;
use crate::benchkit::{CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::rng_for;
use crate::units::{assign, collapse, Codebook, UnitSequence};
use crate::vfnet::InputMode;

const EPOCH_SALT: u64 = 0xE90C_4B47_C4ED;
/// Shuffled indices are length-sorted within pools of this size before
/// packing, so batches hold utterances of similar length.
const BUCKET_POOL: usize = 64;

/// Conditioning stored with a training example.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleCond {
    /// Collapsed units.
    Units(UnitSequence),
    /// Mel frames (clean for pretraining, degraded for finetuning).
    Mel(Array2<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// Clean mel, `T x mel_dim`.
    pub target: Array2<f32>,
    pub cond: ExampleCond,
}

impl Example {
    /// Frames the network sees: the target, or the conditioning when it is
    /// a longer mel.
    pub fn seq_len(&self) -> usize {
        match &self.cond {
            ExampleCond::Units(_) => self.target.nrows(),
            ExampleCond::Mel(m) => self.target.nrows().max(m.nrows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub mode: InputMode,
    /// Codebook size (units mode) or zero.
    pub k: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, mode: InputMode, k: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        for e in &examples {
            let ok = match (&e.cond, mode) {
                (ExampleCond::Units(u), InputMode::Units) => {
                    u.collapsed && u.len() <= e.target.nrows() && u.ids.iter().all(|&id| id < k)
                }
                (ExampleCond::Mel(m), InputMode::MelInput) => m.ncols() == e.target.ncols() && m.nrows() > 0,
                _ => false,
            };
            if !ok || e.target.nrows() == 0 {
                return Err(Error::invalid(format!("example {} does not fit the {mode:?} dataset", e.id)));
            }
        }
        Ok(Self { examples, mode, k })
    }

    /// Training split of a corpus. Pretraining conditions on the clean
    /// utterance itself; finetuning on its degraded rendition.
    pub fn from_corpus(
        corpus: &CorpusManifest,
        codebook: Option<&Codebook>,
        stage: Stage,
        mode: InputMode,
    ) -> Result<Self> {
        Self::from_entries(corpus, Split::Train, codebook, stage, mode)
    }

    pub fn from_entries(
        corpus: &CorpusManifest,
        split: Split,
        codebook: Option<&Codebook>,
        stage: Stage,
        mode: InputMode,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        for e in corpus.split(split) {
            let target = io::read_mel(&corpus.resolve(&e.clean_mel_path))?.into_frames();
            let cond = match mode {
                InputMode::Units => {
                    let cb = codebook.ok_or_else(|| Error::invalid("units mode needs a codebook"))?;
                    let path = match stage {
                        Stage::Pretrain => &e.clean_feature_path,
                        Stage::Finetune => &e.degraded_feature_path,
                    };
                    let feats = io::read_features(&corpus.resolve(path))?;
                    ExampleCond::Units(collapse(&assign(&feats, cb)?))
                }
                InputMode::MelInput => match stage {
                    Stage::Pretrain => ExampleCond::Mel(target.clone()),
                    Stage::Finetune => ExampleCond::Mel(io::read_mel(&corpus.resolve(&e.degraded_mel_path))?.into_frames()),
                },
            };
            examples.push(Example {
                id: e.id.clone(),
                target,
                cond,
            });
        }
        Self::new(examples, mode, codebook.map_or(0, Codebook::k))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Median of target frames over conditioning length (collapsed units or
    /// conditioning mel frames).
    pub fn median_duplication(&self) -> f64 {
        let mut ratios: Vec<f64> = self
            .examples
            .iter()
            .map(|e| {
                let c = match &e.cond {
                    ExampleCond::Units(u) => u.len(),
                    ExampleCond::Mel(m) => m.nrows(),
                };
                e.target.nrows() as f64 / c.max(1) as f64
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        let n = ratios.len();
        if n % 2 == 1 {
            ratios[n / 2]
        } else {
            0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
        }
    }
}

/// Batches for one epoch: shuffle, sort by length inside pools, pack
/// greedily so that `count x longest <= budget`, then shuffle the batches.
/// An utterance longer than the budget gets a batch of its own.
pub fn plan_epoch(lengths: &[usize], budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_for(seed ^ EPOCH_SALT, epoch);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in order.chunks(BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for i in pool {
            let l = lengths[i].max(longest);
            if !cur.is_empty() && (cur.len() + 1) * l > budget {
                batches.push(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(lengths[i]);
            cur.push(i);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
    }
    batches.shuffle(&mut rng);
    batches
}

/// Copies `m` into the top rows of a zero matrix with `rows` rows.
pub(crate) fn pad_rows<F: ndarray::NdFloat>(m: &Array2<F>, rows: usize) -> Array2<F> {
    if m.nrows() == rows {
        return m.clone();
    }
    let mut out = Array2::zeros((rows, m.ncols()));
    out.slice_mut(s![..m.nrows(), ..]).assign(m);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn plan_covers_every_item_once(
            lengths in proptest::collection::vec(1usize..120, 1..150),
            budget in 50usize..600,
            seed in any::<u64>(),
        ) {
            let plan = plan_epoch(&lengths, budget, seed, 3);
            let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            for b in &plan {
                prop_assert!(!b.is_empty());
                let longest = b.iter().map(|&i| lengths[i]).max().unwrap();
                prop_assert!(b.len() == 1 || b.len() * longest <= budget);
            }
            prop_assert_eq!(plan_epoch(&lengths, budget, seed, 3), plan);
        }
    }
}
