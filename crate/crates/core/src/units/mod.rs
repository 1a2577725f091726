//! Discrete acoustic units: nearest-centroid quantization of feature
//! frames, run collapsing and filler padding up to the mel frame count.

mod kmeans;

pub use kmeans::{fit_kmeans, fit_kmeans_with, KmeansConfig, TrainingMeta};

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// One feature vector per 20 ms stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: Array2<f32>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::invalid(format!(
                "feature matrix must be non-empty, got {:?}",
                rows.dim()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix holds non-finite values"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.rows
    }

    pub fn num_frames(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f32>,
    pub meta: TrainingMeta,
}

impl Codebook {
    pub fn new(centroids: Array2<f32>, meta: TrainingMeta) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(Error::invalid("a codebook needs at least two centroids"));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook holds non-finite centroids"));
        }
        Ok(Self { centroids, meta })
    }

    pub fn centroids(&self) -> &Array2<f32> {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Id appended after collapsed units to reach the mel length.
    pub fn filler_id(&self) -> usize {
        self.k()
    }

    /// Id used by the trainer to pad utterances inside a batch.
    pub fn batch_pad_id(&self) -> usize {
        self.k() + 1
    }

    /// Embedding vocabulary: K units plus filler plus batch padding.
    pub fn vocab_size(&self) -> usize {
        self.k() + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnitSequence {
    pub ids: Vec<usize>,
    pub collapsed: bool,
}

impl UnitSequence {
    pub fn raw(ids: Vec<usize>) -> Self {
        Self {
            ids,
            collapsed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unit ids padded with the filler id to an exact frame count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedUnits {
    pub ids: Vec<usize>,
    pub filler: usize,
}

impl PaddedUnits {
    pub fn target_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of leading non-filler ids.
    pub fn content_len(&self) -> usize {
        self.ids.iter().take_while(|&&id| id != self.filler).count()
    }
}

pub(crate) fn squared_distance(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid for one vector; ties go to the lowest index.
pub fn nearest_centroid(x: ArrayView1<f32>, centroids: &Array2<f32>) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    best
}

/// Maps every feature row to the id of its nearest centroid (Euclidean).
pub fn assign(features: &FeatureMatrix, codebook: &Codebook) -> Result<UnitSequence> {
    if features.dim() != codebook.feature_dim() {
        return Err(Error::invalid(format!(
            "features have dimension {} but the codebook expects {}",
            features.dim(),
            codebook.feature_dim()
        )));
    }
    let ids = features
        .rows()
        .rows()
        .into_iter()
        .map(|row| nearest_centroid(row, codebook.centroids()))
        .collect();
    Ok(UnitSequence::raw(ids))
}

/// Merges runs of identical consecutive ids into one.
pub fn collapse(units: &UnitSequence) -> UnitSequence {
    let mut ids = units.ids.clone();
    ids.dedup();
    UnitSequence {
        ids,
        collapsed: true,
    }
}

/// Run lengths of consecutive identical ids, in order.
pub fn run_lengths(ids: &[usize]) -> Vec<usize> {
    ids.chunk_by(|a, b| a == b).map(<[usize]>::len).collect()
}

/// Appends filler ids (`k`) until the sequence is `target_len` long.
pub fn pad_to_frames(units: &UnitSequence, target_len: usize, k: usize) -> Result<PaddedUnits> {
    if !units.collapsed {
        return Err(Error::invalid("only collapsed unit sequences are padded"));
    }
    if units.len() > target_len {
        return Err(Error::LengthOverflow {
            len: units.len(),
            target: target_len,
        });
    }
    if let Some(&bad) = units.ids.iter().find(|&&id| id >= k) {
        return Err(Error::invalid(format!("unit id {bad} outside codebook of {k}")));
    }
    let mut ids = units.ids.clone();
    ids.resize(target_len, k);
    Ok(PaddedUnits { ids, filler: k })
}
