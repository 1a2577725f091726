use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat};

use super::params::{LayerIdx, ModelParams};
use super::{InputMode, ModelConfig};
use crate::error::{Error, Result};
use crate::units::PaddedUnits;

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;
const TIME_SCALE: f64 = 1000.0;

/// Raw conditioning handed to the network.
#[derive(Debug, Clone, Copy)]
pub enum CondInput<'a> {
    Units(&'a [usize]),
    /// Mel frames and the number of sequence frames they describe (the
    /// target length); rows past the mel use the learned pad row.
    Mel(ArrayView2<'a, f32>, usize),
}

fn c<F: NdFloat>(v: f64) -> F {
    F::from(v).unwrap()
}

/// Looks up one embedding row per padded unit id.
pub fn embed_units<F: NdFloat>(units: &PaddedUnits, params: &ModelParams<F>) -> Result<Array2<F>> {
    embed_condition(CondInput::Units(&units.ids), units.ids.len(), params)
}

/// Builds the `len x unit_emb_dim` conditioning matrix for either mode.
pub fn embed_condition<F: NdFloat>(
    cond: CondInput<'_>,
    len: usize,
    params: &ModelParams<F>,
) -> Result<Array2<F>> {
    let cfg = params.config();
    let lay = &params.layout;
    match (cond, cfg.input_mode) {
        (CondInput::Units(ids), InputMode::Units) => {
            if ids.len() != len {
                return Err(Error::invalid(format!("{} unit ids for {len} frames", ids.len())));
            }
            let table = params.mat(lay.unit_emb.expect("units layout"));
            let mut out = Array2::zeros((len, cfg.unit_emb_dim));
            for (row, &id) in out.rows_mut().into_iter().zip(ids) {
                if id >= cfg.unit_vocab {
                    return Err(Error::invalid(format!(
                        "unit id {id} outside vocabulary of {}",
                        cfg.unit_vocab
                    )));
                }
                let mut row = row;
                row.assign(&table.row(id));
            }
            Ok(out)
        }
        (CondInput::Mel(mel, _), InputMode::MelInput) => {
            if mel.ncols() != cfg.mel_dim {
                return Err(Error::invalid(format!(
                    "conditioning mel has {} channels, expected {}",
                    mel.ncols(),
                    cfg.mel_dim
                )));
            }
            if mel.nrows() > len {
                return Err(Error::invalid(format!(
                    "conditioning mel of {} frames exceeds sequence length {len}",
                    mel.nrows()
                )));
            }
            let w = params.mat(lay.cond_w.expect("mel layout"));
            let b = params.vec(lay.cond_b.expect("mel layout"));
            let pad = params.vec(lay.cond_pad.expect("mel layout"));
            let n = mel.nrows();
            let mut out = Array2::zeros((len, cfg.unit_emb_dim));
            let projected = mel.mapv(|v| F::from(v).unwrap()).dot(&w) + &b;
            out.slice_mut(s![..n, ..]).assign(&projected);
            for mut row in out.slice_mut(s![n.., ..]).rows_mut() {
                row.assign(&pad);
            }
            Ok(out)
        }
        (CondInput::Units(_), InputMode::MelInput) => {
            Err(Error::invalid("model expects mel conditioning, got unit ids"))
        }
        (CondInput::Mel(..), InputMode::Units) => {
            Err(Error::invalid("model expects unit ids, got mel conditioning"))
        }
    }
}

/// The conditioning rows the network consumes: the embedding plus, when
/// `cond_pos` is set, the sinusoid of the frame each row should cover if
/// the conditioning were spread evenly over its span.
pub fn condition_input<F: NdFloat>(cond: CondInput<'_>, len: usize, params: &ModelParams<F>) -> Result<Array2<F>> {
    let cfg = params.config();
    let mut out = embed_condition(cond, len, params)?;
    if cfg.cond_pos {
        match cond {
            CondInput::Units(ids) => {
                // Content ids come first, then filler, then batch padding.
                let k = cfg.unit_vocab - 2;
                let content = ids.iter().take_while(|&&id| id < k).count();
                let covered = ids.iter().filter(|&&id| id != k + 1).count();
                add_spread_positions(&mut out, content, covered);
            }
            CondInput::Mel(mel, span) => add_spread_positions(&mut out, mel.nrows(), span),
        }
    }
    Ok(out)
}

/// Predicted field for one sequence, from an already embedded condition.
pub fn forward<F: NdFloat>(
    x_t: ArrayView2<F>,
    x_ctx: ArrayView2<F>,
    cond_emb: ArrayView2<F>,
    t: F,
    params: &ModelParams<F>,
) -> Result<Array2<F>> {
    check_shapes(params.config(), x_t, x_ctx, cond_emb.nrows(), cond_emb.ncols())?;
    let n = x_t.nrows();
    let (out, _) = run(params, x_t, x_ctx, cond_emb.to_owned(), t, n, false);
    Ok(out)
}

fn check_shapes<F: NdFloat>(
    cfg: &ModelConfig,
    x_t: ArrayView2<F>,
    x_ctx: ArrayView2<F>,
    cond_rows: usize,
    cond_cols: usize,
) -> Result<()> {
    let n = x_t.nrows();
    if n == 0 {
        return Err(Error::invalid("empty input sequence"));
    }
    if x_t.ncols() != cfg.mel_dim || x_ctx.dim() != x_t.dim() {
        return Err(Error::invalid(format!(
            "x_t {:?} and x_ctx {:?} must both be T x {}",
            x_t.dim(),
            x_ctx.dim(),
            cfg.mel_dim
        )));
    }
    if cond_rows != n || cond_cols != cfg.unit_emb_dim {
        return Err(Error::invalid(format!(
            "conditioning is {cond_rows} x {cond_cols}, expected {n} x {}",
            cfg.unit_emb_dim
        )));
    }
    if n > cfg.max_frames {
        return Err(Error::invalid(format!(
            "{n} frames exceed max_frames {}",
            cfg.max_frames
        )));
    }
    Ok(())
}

/// Convenience wrapper bundling a parameter set with the prediction and
/// gradient entry points used by the trainer and sampler.
#[derive(Debug, Clone)]
pub struct FieldNet<F> {
    pub params: ModelParams<F>,
}

/// Loss bookkeeping for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGrad<F> {
    /// Sum of squared errors over masked entries.
    pub sq_err: F,
    /// Number of masked entries (frames x channels).
    pub count: usize,
}

impl<F: NdFloat> FieldNet<F> {
    pub fn new(params: ModelParams<F>) -> Self {
        Self { params }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// Field prediction. Frames at or past `valid_len` are batch padding:
    /// they are hidden from attention as keys.
    pub fn predict(
        &self,
        x_t: ArrayView2<F>,
        x_ctx: ArrayView2<F>,
        cond: CondInput<'_>,
        t: F,
        valid_len: usize,
    ) -> Result<Array2<F>> {
        let emb = condition_input(cond, x_t.nrows(), &self.params)?;
        check_shapes(self.config(), x_t, x_ctx, emb.nrows(), emb.ncols())?;
        check_valid_len(valid_len, x_t.nrows())?;
        let (out, _) = run(&self.params, x_t, x_ctx, emb, t, valid_len, false);
        Ok(out)
    }

    /// Forward, masked squared error against `u_t`, and backward.
    ///
    /// `grads` receives `scale * d(sum of squared errors)/d(theta)`, so a
    /// batch mean over `N` entries uses `scale = 1 / N`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_grad(
        &self,
        x_t: ArrayView2<F>,
        x_ctx: ArrayView2<F>,
        cond: CondInput<'_>,
        t: F,
        valid_len: usize,
        u_t: ArrayView2<F>,
        mask: &[bool],
        scale: F,
        grads: &mut ModelParams<F>,
    ) -> Result<SampleGrad<F>> {
        let n = x_t.nrows();
        let emb = condition_input(cond, n, &self.params)?;
        check_shapes(self.config(), x_t, x_ctx, emb.nrows(), emb.ncols())?;
        check_valid_len(valid_len, n)?;
        if u_t.dim() != x_t.dim() || mask.len() != n {
            return Err(Error::invalid("target field or mask does not match the input shape"));
        }
        let (out, cache) = run(&self.params, x_t, x_ctx, emb, t, valid_len, true);
        let cache = cache.expect("cache requested");
        let mut d_out = Array2::zeros(out.dim());
        let mut sq_err = F::zero();
        let mut count = 0;
        for (i, &m) in mask.iter().enumerate() {
            if !m || i >= valid_len {
                continue;
            }
            for j in 0..out.ncols() {
                let diff = out[[i, j]] - u_t[[i, j]];
                sq_err += diff * diff;
                d_out[[i, j]] = (diff + diff) * scale;
            }
            count += out.ncols();
        }
        backward(&self.params, &cache, cond, d_out, grads);
        Ok(SampleGrad { sq_err, count })
    }
}

fn check_valid_len(valid_len: usize, n: usize) -> Result<()> {
    if valid_len == 0 || valid_len > n {
        return Err(Error::invalid(format!("valid length {valid_len} outside 1..={n}")));
    }
    Ok(())
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LnCache<F>,
    a2: Array2<F>,
    z: Array2<F>,
    g: Array2<F>,
}

struct Cache<F> {
    input: Array2<F>,
    t_sin: Array1<F>,
    t_z1: Array1<F>,
    t_a1: Array1<F>,
    layers: Vec<LayerCache<F>>,
    fin: LnCache<F>,
    a_fin: Array2<F>,
    rope: Rope<F>,
}

struct Rope<F> {
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: NdFloat> Rope<F> {
    fn new(n: usize, head_dim: usize) -> Self {
        let pairs = head_dim / 2;
        let angle = |p: usize, i: usize| p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
        Self {
            cos: Array2::from_shape_fn((n, pairs), |(p, i)| c(angle(p, i).cos())),
            sin: Array2::from_shape_fn((n, pairs), |(p, i)| c(angle(p, i).sin())),
        }
    }

    /// Rotates every head's consecutive channel pairs by the frame angle;
    /// `inverse` applies the transpose rotation.
    fn apply(&self, m: &mut Array2<F>, heads: usize, inverse: bool) {
        let pairs = self.cos.ncols();
        let head_dim = 2 * pairs;
        for (p, mut row) in m.rows_mut().into_iter().enumerate() {
            for h in 0..heads {
                for i in 0..pairs {
                    let (cs, mut sn) = (self.cos[[p, i]], self.sin[[p, i]]);
                    if inverse {
                        sn = -sn;
                    }
                    let a = h * head_dim + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * cs - x1 * sn;
                    row[a + 1] = x0 * sn + x1 * cs;
                }
            }
        }
    }
}

fn sinusoid<F: NdFloat>(pos: f64, dim: usize) -> impl Iterator<Item = F> {
    let half = dim / 2;
    let freq = move |i: usize| (-(ROPE_BASE.ln()) * i as f64 / half as f64).exp();
    (0..half)
        .map(move |i| c((pos * freq(i)).sin()))
        .chain((0..half).map(move |i| c((pos * freq(i)).cos())))
}

/// Adds to row `i < rows` the sinusoid of the frame position at the center
/// of the `i`-th of `rows` equal shares of `span` frames.
fn add_spread_positions<F: NdFloat>(out: &mut Array2<F>, rows: usize, span: usize) {
    if rows == 0 || span == 0 {
        return;
    }
    let dim = out.ncols();
    let ratio = span as f64 / rows as f64;
    for (i, mut row) in out.rows_mut().into_iter().take(rows).enumerate() {
        let pos = (i as f64 + 0.5) * ratio - 0.5;
        for (dst, v) in row.iter_mut().zip(sinusoid::<F>(pos, dim)) {
            *dst += v;
        }
    }
}

fn position_table<F: NdFloat>(n: usize, dim: usize) -> Array2<F> {
    let mut out = Array2::zeros((n, dim));
    for (p, mut row) in out.rows_mut().into_iter().enumerate() {
        for (dst, v) in row.iter_mut().zip(sinusoid::<F>(p as f64, dim)) {
            *dst = v;
        }
    }
    out
}

fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: NdFloat>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: NdFloat>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn gelu<F: NdFloat>(x: F) -> F {
    let k: F = c((2.0 / std::f64::consts::PI).sqrt());
    let a: F = c(0.044_715);
    let half: F = c(0.5);
    half * x * (F::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: NdFloat>(x: F) -> F {
    let k: F = c((2.0 / std::f64::consts::PI).sqrt());
    let a: F = c(0.044_715);
    let half: F = c(0.5);
    let three: F = c(3.0);
    let th = (k * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * k * (F::one() + three * a * x * x)
}

fn layer_norm<F: NdFloat>(x: ArrayView2<F>, g: ArrayView1<F>, b: ArrayView1<F>) -> (Array2<F>, LnCache<F>) {
    let d: F = c(x.ncols() as f64);
    let eps: F = c(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back<F: NdFloat>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    dg: &mut ndarray::ArrayViewMut1<F>,
    db: &mut ndarray::ArrayViewMut1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d: F = c(dy.ncols() as f64);
    let mut dx = dy * &g;
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b) / d;
        for (v, &xv) in row.iter_mut().zip(xh.iter()) {
            *v = rs * (*v - mean_d - xv * mean_dx);
        }
    }
    dx
}

/// `acc += a^T b`.
fn add_at_b<F: NdFloat>(acc: &mut ndarray::ArrayViewMut2<F>, a: ArrayView2<F>, b: ArrayView2<F>) {
    general_mat_mul(F::one(), &a.t(), &b, F::one(), acc);
}

fn add_vec<F: NdFloat, S: ndarray::Data<Elem = F>>(
    acc: &mut ndarray::ArrayViewMut1<F>,
    x: &ndarray::ArrayBase<S, ndarray::Ix1>,
) {
    *acc += x;
}

fn add_rows<F: NdFloat>(acc: &mut ndarray::ArrayViewMut1<F>, x: &Array2<F>) {
    *acc += &x.sum_axis(Axis(0));
}

fn run<F: NdFloat>(
    params: &ModelParams<F>,
    x_t: ArrayView2<F>,
    x_ctx: ArrayView2<F>,
    emb: Array2<F>,
    t: F,
    valid_len: usize,
    keep: bool,
) -> (Array2<F>, Option<Cache<F>>) {
    let cfg = params.config();
    let lay = &params.layout;
    let n = x_t.nrows();
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let input = concatenate![Axis(1), x_t, x_ctx, emb];
    let mut h = input.dot(&params.mat(lay.in_w)) + &params.vec(lay.in_b);
    if cfg.abs_pos {
        h += &position_table::<F>(n, cfg.dim);
    }

    let t_sin: Array1<F> = sinusoid(t.to_f64().unwrap() * TIME_SCALE, cfg.dim).collect();
    let t_z1 = t_sin.dot(&params.mat(lay.t_w1)) + &params.vec(lay.t_b1);
    let t_a1 = t_z1.mapv(silu);
    let temb = t_a1.dot(&params.mat(lay.t_w2)) + &params.vec(lay.t_b2);
    h += &temb;

    let rope = Rope::new(n, hd);
    let scale: F = c(1.0 / (hd as f64).sqrt());
    let mut layer_caches = Vec::with_capacity(if keep { cfg.layers } else { 0 });
    for li in &lay.layers {
        let (a1, ln1) = layer_norm(h.view(), params.vec(li.ln1_g), params.vec(li.ln1_b));
        let mut q = a1.dot(&params.mat(li.wq)) + &params.vec(li.bq);
        let mut k = a1.dot(&params.mat(li.wk)) + &params.vec(li.bk);
        let v = a1.dot(&params.mat(li.wv)) + &params.vec(li.bv);
        rope.apply(&mut q, heads, false);
        rope.apply(&mut k, heads, false);

        let mut attn = Array2::zeros((n, cfg.attn_dim()));
        let mut probs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let cols = s![.., hi * hd..(hi + 1) * hd];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in p.rows_mut() {
                let mut max = F::neg_infinity();
                for (j, v) in row.iter_mut().enumerate() {
                    if j < valid_len {
                        *v *= scale;
                        max = max.max(*v);
                    }
                }
                let mut sum = F::zero();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j < valid_len { (*v - max).exp() } else { F::zero() };
                    sum += *v;
                }
                row.mapv_inplace(|v| v / sum);
            }
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        h += &(attn.dot(&params.mat(li.wo)) + &params.vec(li.bo));

        let (a2, ln2) = layer_norm(h.view(), params.vec(li.ln2_g), params.vec(li.ln2_b));
        let z = a2.dot(&params.mat(li.ff_w1)) + &params.vec(li.ff_b1);
        let g = z.mapv(gelu);
        h += &(g.dot(&params.mat(li.ff_w2)) + &params.vec(li.ff_b2));

        if keep {
            layer_caches.push(LayerCache {
                ln1,
                a1,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                a2,
                z,
                g,
            });
        }
    }
    let (a_fin, fin) = layer_norm(h.view(), params.vec(lay.fin_g), params.vec(lay.fin_b));
    let out = a_fin.dot(&params.mat(lay.out_w)) + &params.vec(lay.out_b);
    let cache = keep.then(|| Cache {
        input,
        t_sin,
        t_z1,
        t_a1,
        layers: layer_caches,
        fin,
        a_fin,
        rope,
    });
    (out, cache)
}

fn backward<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &Cache<F>,
    cond: CondInput<'_>,
    d_out: Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let cfg = params.config();
    let lay = &params.layout;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let scale: F = c(1.0 / (hd as f64).sqrt());

    add_at_b(&mut grads.mat_mut(lay.out_w), cache.a_fin.view(), d_out.view());
    add_rows(&mut grads.vec_mut(lay.out_b), &d_out);
    let da = d_out.dot(&params.mat(lay.out_w).t());
    let mut dh = ln_back_into(grads, &da, &cache.fin, params.vec(lay.fin_g), lay.fin_g, lay.fin_b);

    for (li, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        dh = layer_backward(params, grads, li, lc, &cache.rope, heads, hd, scale, dh);
    }

    let dtemb = dh.sum_axis(Axis(0));
    outer_add(&mut grads.mat_mut(lay.t_w2), cache.t_a1.view(), dtemb.view());
    add_vec(&mut grads.vec_mut(lay.t_b2), &dtemb);
    let da1 = params.mat(lay.t_w2).dot(&dtemb);
    let dz1 = Array1::from_iter(da1.iter().zip(&cache.t_z1).map(|(&g, &z)| g * silu_grad(z)));
    outer_add(&mut grads.mat_mut(lay.t_w1), cache.t_sin.view(), dz1.view());
    add_vec(&mut grads.vec_mut(lay.t_b1), &dz1);

    add_at_b(&mut grads.mat_mut(lay.in_w), cache.input.view(), dh.view());
    add_rows(&mut grads.vec_mut(lay.in_b), &dh);

    let off = 2 * cfg.mel_dim;
    let w_emb = params.mat(lay.in_w);
    let d_emb = dh.dot(&w_emb.slice(s![off.., ..]).t());
    match cond {
        CondInput::Units(ids) => {
            let mut table = grads.mat_mut(lay.unit_emb.expect("units layout"));
            for (row, &id) in d_emb.rows().into_iter().zip(ids) {
                let mut dst = table.row_mut(id);
                dst += &row;
            }
        }
        CondInput::Mel(mel, _) => {
            let n = mel.nrows();
            let melf = mel.mapv(|v| F::from(v).unwrap());
            let head = d_emb.slice(s![..n, ..]);
            add_at_b(&mut grads.mat_mut(lay.cond_w.expect("mel layout")), melf.view(), head);
            add_vec(&mut grads.vec_mut(lay.cond_b.expect("mel layout")), &head.sum_axis(Axis(0)));
            add_vec(&mut grads.vec_mut(lay.cond_pad.expect("mel layout")), &d_emb.slice(s![n.., ..]).sum_axis(Axis(0)));
        }
    }
}

fn outer_add<F: NdFloat>(acc: &mut ndarray::ArrayViewMut2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    for (i, &av) in a.iter().enumerate() {
        let mut row = acc.row_mut(i);
        row.scaled_add(av, &b);
    }
}

fn ln_back_into<F: NdFloat>(
    grads: &mut ModelParams<F>,
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    g_idx: usize,
    b_idx: usize,
) -> Array2<F> {
    let mut dg = Array1::zeros(g.len());
    let mut db = Array1::zeros(g.len());
    let dx = layer_norm_back(dy, cache, g, &mut dg.view_mut(), &mut db.view_mut());
    add_vec(&mut grads.vec_mut(g_idx), &dg);
    add_vec(&mut grads.vec_mut(b_idx), &db);
    dx
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<F: NdFloat>(
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    li: &LayerIdx,
    lc: &LayerCache<F>,
    rope: &Rope<F>,
    heads: usize,
    hd: usize,
    scale: F,
    mut dh: Array2<F>,
) -> Array2<F> {
    // Feed-forward block.
    add_at_b(&mut grads.mat_mut(li.ff_w2), lc.g.view(), dh.view());
    add_rows(&mut grads.vec_mut(li.ff_b2), &dh);
    let mut dz = dh.dot(&params.mat(li.ff_w2).t());
    ndarray::Zip::from(&mut dz).and(&lc.z).for_each(|d, &z| *d *= gelu_grad(z));
    add_at_b(&mut grads.mat_mut(li.ff_w1), lc.a2.view(), dz.view());
    add_rows(&mut grads.vec_mut(li.ff_b1), &dz);
    let da2 = dz.dot(&params.mat(li.ff_w1).t());
    dh += &ln_back_into(grads, &da2, &lc.ln2, params.vec(li.ln2_g), li.ln2_g, li.ln2_b);

    // Attention block.
    add_at_b(&mut grads.mat_mut(li.wo), lc.attn.view(), dh.view());
    add_rows(&mut grads.vec_mut(li.bo), &dh);
    let d_attn = dh.dot(&params.mat(li.wo).t());
    let n = dh.nrows();
    let dim = heads * hd;
    let mut dq = Array2::zeros((n, dim));
    let mut dk = Array2::zeros((n, dim));
    let mut dv = Array2::zeros((n, dim));
    for (hi, p) in lc.probs.iter().enumerate().take(heads) {
        let cols = s![.., hi * hd..(hi + 1) * hd];
        let d_o = d_attn.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let mut ds = d_o.dot(&lc.v.slice(cols).t());
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.iter().zip(prow.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            for (d, &pv) in row.iter_mut().zip(prow.iter()) {
                *d = pv * (*d - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
    }
    rope.apply(&mut dq, heads, true);
    rope.apply(&mut dk, heads, true);
    add_at_b(&mut grads.mat_mut(li.wq), lc.a1.view(), dq.view());
    add_rows(&mut grads.vec_mut(li.bq), &dq);
    add_at_b(&mut grads.mat_mut(li.wk), lc.a1.view(), dk.view());
    add_rows(&mut grads.vec_mut(li.bk), &dk);
    add_at_b(&mut grads.mat_mut(li.wv), lc.a1.view(), dv.view());
    add_rows(&mut grads.vec_mut(li.bv), &dv);
    let da1 = dq.dot(&params.mat(li.wq).t()) + dk.dot(&params.mat(li.wk).t()) + dv.dot(&params.mat(li.wv).t());
    dh += &ln_back_into(grads, &da1, &lc.ln1, params.vec(li.ln1_g), li.ln1_g, li.ln1_b);
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(mode: InputMode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 32,
            head_dim: None,
            ff_mult: 2,
            unit_vocab: 7,
            unit_emb_dim: 16,
            mel_dim: 6,
            max_frames: 64,
            input_mode: mode,
            abs_pos: true,
            cond_pos: true,
        }
    }

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    #[test]
    fn zero_head_gives_zero_field() {
        let cfg = tiny(InputMode::Units);
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 7, 33] {
            let x = randn((n, 6), &mut rng);
            let ids: Vec<usize> = (0..n).map(|i| i % 7).collect();
            let net = FieldNet::new(params.clone());
            let out = net.predict(x.view(), x.view(), CondInput::Units(&ids), 0.3, n).unwrap();
            assert_eq!(out.dim(), (n, 6));
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embedding_lookup() {
        let cfg = tiny(InputMode::Units);
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let e = embed_units(&PaddedUnits { ids: vec![0, 0, 5], filler: 5 }, &params).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
        assert!(embed_units(&PaddedUnits { ids: vec![7], filler: 5 }, &params).is_err());
    }

    #[test]
    fn padding_keys_do_not_leak() {
        // Extra batch-padding frames must not change predictions on valid frames.
        let cfg = tiny(InputMode::Units);
        let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in params.tensors_mut() {
            if t.name.starts_with("out.") {
                t.data.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
            }
        }
        let net = FieldNet::new(params);
        let x = randn((10, 6), &mut rng);
        let ids: Vec<usize> = (0..10).map(|i| if i < 8 { i % 5 } else { 6 }).collect();
        let full = net.predict(x.view(), x.view(), CondInput::Units(&ids), 0.5, 8).unwrap();
        let short = net
            .predict(x.slice(s![..8, ..]), x.slice(s![..8, ..]), CondInput::Units(&ids[..8]), 0.5, 8)
            .unwrap();
        for (a, b) in full.slice(s![..8, ..]).iter().zip(short.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mel_condition_pads_with_learned_row() {
        let cfg = tiny(InputMode::MelInput);
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let mel = Array2::<f32>::ones((3, 6));
        let e = embed_condition(CondInput::Mel(mel.view(), 5), 5, &params).unwrap();
        assert_eq!(e.row(3), e.row(4));
        assert_eq!(e.row(3), params.tensor("cond_pad").map(|t| Array1::from(t.data.clone())).unwrap());
        assert!(embed_condition(CondInput::Mel(mel.view(), 5), 2, &params).is_err());
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny(InputMode::Units);
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let x = Array2::<f64>::zeros((4, 6));
        let emb = Array2::<f64>::zeros((3, 16));
        assert!(forward(x.view(), x.view(), emb.view(), 0.1, &params).is_err());
        let too_long = Array2::<f64>::zeros((65, 6));
        let emb = Array2::<f64>::zeros((65, 16));
        assert!(forward(too_long.view(), too_long.view(), emb.view(), 0.1, &params).is_err());
    }
}
