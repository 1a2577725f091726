use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{InputMode, ModelConfig};
use crate::error::{Error, Result};

/// A named, row-major parameter tensor (rank 1 or 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F> Tensor<F> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub unit_emb: Option<usize>,
    pub cond_w: Option<usize>,
    pub cond_b: Option<usize>,
    pub cond_pad: Option<usize>,
    pub in_w: usize,
    pub in_b: usize,
    pub t_w1: usize,
    pub t_b1: usize,
    pub t_w2: usize,
    pub t_b2: usize,
    pub layers: Vec<LayerIdx>,
    pub fin_g: usize,
    pub fin_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    /// N(0, std^2).
    Normal(f64),
    /// Input projection: each input group (x_t, x_ctx, condition) gets its
    /// own fan-in so that every group contributes equal variance.
    InBlocks { mel: usize, emb: usize, cols: usize },
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<Spec>) {
        let mut specs: Vec<Spec> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(Spec { name, shape, init });
            specs.len() - 1
        };
        let (d, e, m, f) = (cfg.dim, cfg.unit_emb_dim, cfg.mel_dim, cfg.ff_dim());
        let a = cfg.attn_dim();
        let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());

        let (unit_emb, cond_w, cond_b, cond_pad) = match cfg.input_mode {
            InputMode::Units => (
                Some(push("unit_emb".into(), vec![cfg.unit_vocab, e], Init::Normal(1.0))),
                None,
                None,
                None,
            ),
            InputMode::MelInput => (
                None,
                Some(push("cond_proj.w".into(), vec![m, e], fan(m))),
                Some(push("cond_proj.b".into(), vec![e], Init::Zero)),
                Some(push("cond_pad".into(), vec![e], Init::Normal(1.0))),
            ),
        };
        let in_w = push("in_proj.w".into(), vec![2 * m + e, d], Init::InBlocks { mel: m, emb: e, cols: d });
        let in_b = push("in_proj.b".into(), vec![d], Init::Zero);
        let t_w1 = push("time.w1".into(), vec![d, d], fan(d));
        let t_b1 = push("time.b1".into(), vec![d], Init::Zero);
        let t_w2 = push("time.w2".into(), vec![d, d], fan(d));
        let t_b2 = push("time.b2".into(), vec![d], Init::Zero);
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut p = |n: &str, shape: Vec<usize>, init| push(format!("layers.{i}.{n}"), shape, init);
                LayerIdx {
                    ln1_g: p("ln1.g", vec![d], Init::One),
                    ln1_b: p("ln1.b", vec![d], Init::Zero),
                    wq: p("attn.wq", vec![d, a], fan(d)),
                    bq: p("attn.bq", vec![a], Init::Zero),
                    wk: p("attn.wk", vec![d, a], fan(d)),
                    bk: p("attn.bk", vec![a], Init::Zero),
                    wv: p("attn.wv", vec![d, a], fan(d)),
                    bv: p("attn.bv", vec![a], Init::Zero),
                    wo: p("attn.wo", vec![a, d], fan(a)),
                    bo: p("attn.bo", vec![d], Init::Zero),
                    ln2_g: p("ln2.g", vec![d], Init::One),
                    ln2_b: p("ln2.b", vec![d], Init::Zero),
                    ff_w1: p("ff.w1", vec![d, f], fan(d)),
                    ff_b1: p("ff.b1", vec![f], Init::Zero),
                    ff_w2: p("ff.w2", vec![f, d], fan(f)),
                    ff_b2: p("ff.b2", vec![d], Init::Zero),
                }
            })
            .collect();
        let fin_g = push("final_ln.g".into(), vec![d], Init::One);
        let fin_b = push("final_ln.b".into(), vec![d], Init::Zero);
        let out_w = push("out.w".into(), vec![d, m], Init::Zero);
        let out_b = push("out.b".into(), vec![m], Init::Zero);
        let layout = Layout {
            unit_emb,
            cond_w,
            cond_b,
            cond_pad,
            in_w,
            in_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            layers,
            fin_g,
            fin_b,
            out_w,
            out_b,
        };
        (layout, specs)
    }
}

/// All network weights, stored as a flat list of named tensors so that the
/// optimizer and checkpoint code can treat them uniformly. Gradients use
/// the same type.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    config: ModelConfig,
    tensors: Vec<Tensor<F>>,
    pub(crate) layout: Layout,
}

impl<F: NdFloat> ModelParams<F> {
    /// Seeded initialisation. Values are drawn in `f64` and rounded through
    /// `f32`, so `f32` and `f64` instances built from one seed agree exactly.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = Layout::build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = (0..n)
                    .map(|i| {
                        let v = match s.init {
                            Init::Zero => 0.0,
                            Init::One => 1.0,
                            Init::Normal(std) => {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z * std
                            }
                            Init::InBlocks { mel, emb, cols } => {
                                let group = if i / cols < 2 * mel { mel } else { emb };
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z / (3.0 * group as f64).sqrt()
                            }
                        };
                        F::from(v as f32).unwrap()
                    })
                    .collect();
                Tensor {
                    name: s.name,
                    shape: s.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tensors,
            layout,
        })
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: vec![F::zero(); t.data.len()],
            })
            .collect();
        Self {
            config: self.config.clone(),
            tensors,
            layout: self.layout.clone(),
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = Layout::build(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.name != t.name || spec.shape != t.shape {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
            if t.data.len() != spec.shape.iter().product::<usize>() {
                return Err(Error::IncompatibleCheckpoint(format!("tensor {} has wrong length", t.name)));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: NdFloat>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| G::from(v).unwrap()).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn mat(&self, idx: usize) -> ArrayView2<'_, F> {
        let t = &self.tensors[idx];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
    }

    pub(crate) fn vec(&self, idx: usize) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.tensors[idx].data[..])
    }

    pub(crate) fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, F> {
        let t = &mut self.tensors[idx];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("rank-2 tensor")
    }

    pub(crate) fn vec_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.tensors[idx].data[..])
    }
}
