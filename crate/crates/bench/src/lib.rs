//! In-memory fixtures shared by the benchmarks.

use unitflow::benchkit::{make_clean_sample, SymbolBank, SymbolScript, DEFAULT_ALPHABET, DEFAULT_DURATION};
use unitflow::trainer::{Example, ExampleCond};
use unitflow::units::{assign, collapse, fit_kmeans, Codebook, FeatureMatrix};
use unitflow::pipeline::stack_features;
use unitflow::vfnet::ModelConfig;

pub struct Fixture {
    pub examples: Vec<Example>,
    pub features: FeatureMatrix,
    pub codebook: Codebook,
}

impl Fixture {
    /// `n` clean utterances of 5 to 8 symbols with their collapsed units.
    pub fn new(n: usize) -> Self {
        let bank = SymbolBank::new(DEFAULT_ALPHABET).unwrap();
        let samples: Vec<_> = (0..n)
            .map(|i| {
                let len = 5 + i % 4;
                let symbols = (0..len).map(|j| (i * 5 + j * 7) % DEFAULT_ALPHABET).collect();
                let script = SymbolScript::uniform(symbols, DEFAULT_DURATION).unwrap();
                make_clean_sample(&bank, &script, i as u64).unwrap()
            })
            .collect();
        let feats: Vec<FeatureMatrix> = samples.iter().map(|(_, f)| f.clone()).collect();
        let features = stack_features(&feats).unwrap();
        let codebook = fit_kmeans(&features, DEFAULT_ALPHABET, 1).unwrap();
        let examples = samples
            .into_iter()
            .enumerate()
            .map(|(i, (mel, f))| Example {
                id: format!("b{i:04}"),
                target: mel.into_frames(),
                cond: ExampleCond::Units(collapse(&assign(&f, &codebook).unwrap())),
            })
            .collect();
        Self { examples, features, codebook }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::tiny(self.codebook.vocab_size())
    }
}
