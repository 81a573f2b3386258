//! The trainable model: embeddings, a 2-layer self-attention encoder
//! producing `H`, an L-layer GCN over the normalized adjacency, a
//! residual fusion `R = H + G_L`, and a 2-layer causal decoder with
//! cross-attention over `R`.
//!
//! Forward passes cache every intermediate; [`backward_sample`]
//! produces analytic gradients for all parameters. The adjacency is
//! treated as a constant during backpropagation: its dependence on `H`
//! goes through an argmax, which is piecewise constant.

pub mod decode;
pub mod layers;
pub mod optim;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{TokenSequence, BOS_ID};
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalize, GraphMode, NormalizedAdjacency};
use crate::num::{real, Real};
use crate::tensor::{softmax_inplace, Matrix};

use layers::{
    cross_attn_backward, cross_attn_forward, ffn_backward, ffn_forward, rmsnorm_rows,
    rmsnorm_rows_backward, self_attn_backward, self_attn_forward, AttnWeights, CrossAttnCache,
    FeedForward, FfnCache, RmsCache, SelfAttnCache,
};

pub const ENCODER_LAYERS: usize = 2;
pub const DECODER_LAYERS: usize = 2;
/// Feed-forward hidden width as a multiple of `d`.
pub const FF_MULT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub gcn_layers: usize,
    pub n_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<R: Real> {
    pub attn: AttnWeights<R>,
    pub ff: FeedForward<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<R: Real> {
    pub self_attn: AttnWeights<R>,
    pub cross_attn: AttnWeights<R>,
    pub ff: FeedForward<R>,
}

/// Every trainable tensor. Also used as the gradient and optimizer
/// state container, since those mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<R: Real> {
    pub dims: ModelDims,
    pub embed: Matrix<R>,
    pub enc: Vec<EncoderLayer<R>>,
    pub gcn: Vec<Matrix<R>>,
    pub dec: Vec<DecoderLayer<R>>,
    pub out_proj: Matrix<R>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// GCN weight stack; trained with its own learning rate.
    Gcn,
    Main,
}

impl<R: Real> ModelParams<R> {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.d;
        let hidden = d * FF_MULT;
        ModelParams {
            dims,
            embed: Matrix::zeros(dims.vocab, d),
            enc: (0..ENCODER_LAYERS)
                .map(|_| EncoderLayer {
                    attn: AttnWeights::zeros(d),
                    ff: FeedForward::zeros(d, hidden),
                })
                .collect(),
            gcn: (0..dims.gcn_layers).map(|_| Matrix::zeros(d, d)).collect(),
            dec: (0..DECODER_LAYERS)
                .map(|_| DecoderLayer {
                    self_attn: AttnWeights::zeros(d),
                    cross_attn: AttnWeights::zeros(d),
                    ff: FeedForward::zeros(d, hidden),
                })
                .collect(),
            out_proj: Matrix::zeros(d, dims.vocab),
        }
    }

    /// Symmetric uniform fan-based initialization, deterministic per seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, tensor) in params.tensors_mut() {
            let bound = (6.0 / (tensor.rows() + tensor.cols()) as f64).sqrt();
            for v in tensor.data_mut() {
                *v = real::<R>(rng.gen_range(-bound..bound));
            }
        }
        params
    }

    /// All tensors in canonical order with names and group tags.
    pub fn tensors(&self) -> Vec<(TensorInfo, &Matrix<R>)> {
        let mut out: Vec<(TensorInfo, &Matrix<R>)> = Vec::new();
        out.push((TensorInfo::main("embed"), &self.embed));
        for (i, layer) in self.enc.iter().enumerate() {
            out.push((TensorInfo::main(format!("enc.{i}.attn.wq")), &layer.attn.wq));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wk")), &layer.attn.wk));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wv")), &layer.attn.wv));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wo")), &layer.attn.wo));
            out.push((TensorInfo::main(format!("enc.{i}.ff.w1")), &layer.ff.w1));
            out.push((TensorInfo::main(format!("enc.{i}.ff.w2")), &layer.ff.w2));
        }
        for (i, w) in self.gcn.iter().enumerate() {
            out.push((TensorInfo::gcn(format!("gcn.{i}")), w));
        }
        for (i, layer) in self.dec.iter().enumerate() {
            out.push((TensorInfo::main(format!("dec.{i}.self.wq")), &layer.self_attn.wq));
            out.push((TensorInfo::main(format!("dec.{i}.self.wk")), &layer.self_attn.wk));
            out.push((TensorInfo::main(format!("dec.{i}.self.wv")), &layer.self_attn.wv));
            out.push((TensorInfo::main(format!("dec.{i}.self.wo")), &layer.self_attn.wo));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wq")), &layer.cross_attn.wq));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wk")), &layer.cross_attn.wk));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wv")), &layer.cross_attn.wv));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wo")), &layer.cross_attn.wo));
            out.push((TensorInfo::main(format!("dec.{i}.ff.w1")), &layer.ff.w1));
            out.push((TensorInfo::main(format!("dec.{i}.ff.w2")), &layer.ff.w2));
        }
        out.push((TensorInfo::main("out_proj"), &self.out_proj));
        out
    }

    /// Mutable variant of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorInfo, &mut Matrix<R>)> {
        let mut out: Vec<(TensorInfo, &mut Matrix<R>)> = Vec::new();
        out.push((TensorInfo::main("embed"), &mut self.embed));
        for (i, layer) in self.enc.iter_mut().enumerate() {
            let EncoderLayer { attn, ff } = layer;
            out.push((TensorInfo::main(format!("enc.{i}.attn.wq")), &mut attn.wq));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wk")), &mut attn.wk));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wv")), &mut attn.wv));
            out.push((TensorInfo::main(format!("enc.{i}.attn.wo")), &mut attn.wo));
            out.push((TensorInfo::main(format!("enc.{i}.ff.w1")), &mut ff.w1));
            out.push((TensorInfo::main(format!("enc.{i}.ff.w2")), &mut ff.w2));
        }
        for (i, w) in self.gcn.iter_mut().enumerate() {
            out.push((TensorInfo::gcn(format!("gcn.{i}")), w));
        }
        for (i, layer) in self.dec.iter_mut().enumerate() {
            let DecoderLayer {
                self_attn,
                cross_attn,
                ff,
            } = layer;
            out.push((TensorInfo::main(format!("dec.{i}.self.wq")), &mut self_attn.wq));
            out.push((TensorInfo::main(format!("dec.{i}.self.wk")), &mut self_attn.wk));
            out.push((TensorInfo::main(format!("dec.{i}.self.wv")), &mut self_attn.wv));
            out.push((TensorInfo::main(format!("dec.{i}.self.wo")), &mut self_attn.wo));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wq")), &mut cross_attn.wq));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wk")), &mut cross_attn.wk));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wv")), &mut cross_attn.wv));
            out.push((TensorInfo::main(format!("dec.{i}.cross.wo")), &mut cross_attn.wo));
            out.push((TensorInfo::main(format!("dec.{i}.ff.w1")), &mut ff.w1));
            out.push((TensorInfo::main(format!("dec.{i}.ff.w2")), &mut ff.w2));
        }
        out.push((TensorInfo::main("out_proj"), &mut self.out_proj));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
}

impl TensorInfo {
    fn main(name: impl Into<String>) -> Self {
        TensorInfo {
            name: name.into(),
            group: ParamGroup::Main,
        }
    }

    fn gcn(name: impl Into<String>) -> Self {
        TensorInfo {
            name: name.into(),
            group: ParamGroup::Gcn,
        }
    }
}

/// Sinusoidal position encoding; fixed, so positions carry no
/// trainable parameters.
pub fn positional_encoding<R: Real>(pos: usize, d: usize) -> Vec<R> {
    let mut enc = vec![R::zero(); d];
    for k in 0..d {
        let pair = (k / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d as f64);
        enc[k] = real::<R>(if k % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    enc
}

// ---------------------------------------------------------------------------
// encoder

struct EncLayerCache<R: Real> {
    x_in: Matrix<R>,
    rms1: RmsCache<R>,
    attn: SelfAttnCache<R>,
    x_mid: Matrix<R>,
    rms2: RmsCache<R>,
    ffn: FfnCache<R>,
}

pub struct EncodeCache<R: Real> {
    layers: Vec<EncLayerCache<R>>,
    pub h: Matrix<R>,
    n: usize,
}

fn embed_sequence<R: Real>(seq: &TokenSequence, params: &ModelParams<R>) -> Matrix<R> {
    let d = params.dims.d;
    let mut e = Matrix::zeros(seq.n_max(), d);
    for i in 0..seq.true_len {
        let emb = params.embed.row(seq.ids[i]);
        let pe = positional_encoding::<R>(i, d);
        for (out, (&a, b)) in e.row_mut(i).iter_mut().zip(emb.iter().zip(pe)) {
            *out = a + b;
        }
    }
    e
}

fn encode_cached<R: Real>(seq: &TokenSequence, params: &ModelParams<R>) -> EncodeCache<R> {
    let n = seq.true_len;
    let mut x = embed_sequence(seq, params);
    let mut layers = Vec::with_capacity(params.enc.len());
    for layer in &params.enc {
        let rms1 = rmsnorm_rows(&x, n);
        let (attn_out, attn) = self_attn_forward(&rms1.normed, &layer.attn, n, false);
        let x_mid = x.add(&attn_out);
        let rms2 = rmsnorm_rows(&x_mid, n);
        let (ffn_out, ffn) = ffn_forward(&rms2.normed, &layer.ff, n);
        let x_out = x_mid.add(&ffn_out);
        layers.push(EncLayerCache {
            x_in: x,
            rms1,
            attn,
            x_mid,
            rms2,
            ffn,
        });
        x = x_out;
    }
    EncodeCache { layers, h: x, n }
}

/// Encoder output `H`: one row per position, pad rows exactly zero.
pub fn encode<R: Real>(seq: &TokenSequence, params: &ModelParams<R>) -> Matrix<R> {
    encode_cached(seq, params).h
}

fn encode_backward<R: Real>(
    cache: &EncodeCache<R>,
    seq: &TokenSequence,
    params: &ModelParams<R>,
    d_h: &Matrix<R>,
    grads: &mut ModelParams<R>,
) {
    let n = cache.n;
    let mut d_x = d_h.clone();
    for (layer_cache, (layer, glayer)) in cache
        .layers
        .iter()
        .zip(params.enc.iter().zip(grads.enc.iter_mut()))
        .rev()
    {
        // ffn sublayer
        let mut d_n2 = Matrix::zeros(d_x.rows(), d_x.cols());
        ffn_backward(
            &d_x,
            &layer_cache.rms2.normed,
            &layer.ff,
            &layer_cache.ffn,
            &mut d_n2,
            &mut glayer.ff,
        );
        let mut d_mid = d_x; // residual path
        rmsnorm_rows_backward(&d_n2, &layer_cache.x_mid, &layer_cache.rms2, n, &mut d_mid);

        // attention sublayer
        let mut d_n1 = Matrix::zeros(d_mid.rows(), d_mid.cols());
        self_attn_backward(
            &d_mid,
            &layer_cache.rms1.normed,
            &layer.attn,
            &layer_cache.attn,
            n,
            false,
            &mut d_n1,
            &mut glayer.attn,
        );
        let mut d_in = d_mid;
        rmsnorm_rows_backward(&d_n1, &layer_cache.x_in, &layer_cache.rms1, n, &mut d_in);
        d_x = d_in;
    }
    for i in 0..n {
        let d = d_x.row(i).to_vec();
        for (g, v) in grads.embed.row_mut(seq.ids[i]).iter_mut().zip(d) {
            *g += v;
        }
    }
}

// ---------------------------------------------------------------------------
// GCN

struct GcnLayerCache<R: Real> {
    a_g: Matrix<R>,
    pre: Matrix<R>,
    g_out: Matrix<R>,
}

pub struct GcnCache<R: Real> {
    layers: Vec<GcnLayerCache<R>>,
}

impl<R: Real> GcnCache<R> {
    pub fn last(&self) -> &Matrix<R> {
        &self.layers.last().expect("gcn has at least one layer").g_out
    }

    pub fn layer_outputs(&self) -> Vec<Matrix<R>> {
        self.layers.iter().map(|l| l.g_out.clone()).collect()
    }
}

fn gcn_cached<R: Real>(
    h: &Matrix<R>,
    adj: &NormalizedAdjacency<R>,
    params: &ModelParams<R>,
) -> GcnCache<R> {
    let mut layers = Vec::with_capacity(params.gcn.len());
    let mut g = h.clone();
    for w in &params.gcn {
        let a_g = adj.mat.matmul(&g);
        let pre = a_g.matmul(w);
        let g_out = pre.map(|v| v.max(R::zero()));
        layers.push(GcnLayerCache {
            a_g,
            pre,
            g_out: g_out.clone(),
        });
        g = g_out;
    }
    GcnCache { layers }
}

/// `G_L` after the full stack: `G_l = ReLU(Ã · G_{l-1} · W_l)`,
/// `G_0 = H`.
pub fn gcn_forward<R: Real>(
    h: &Matrix<R>,
    adj: &NormalizedAdjacency<R>,
    params: &ModelParams<R>,
) -> Matrix<R> {
    gcn_cached(h, adj, params).last().clone()
}

/// Returns the gradient flowing back into `H` through the GCN stack.
fn gcn_backward<R: Real>(
    cache: &GcnCache<R>,
    h: &Matrix<R>,
    adj: &NormalizedAdjacency<R>,
    params: &ModelParams<R>,
    d_g_last: &Matrix<R>,
    grads: &mut ModelParams<R>,
) -> Matrix<R> {
    let mut d_g = d_g_last.clone();
    for (l, layer_cache) in cache.layers.iter().enumerate().rev() {
        let mut d_pre = d_g;
        for (dp, &p) in d_pre.data_mut().iter_mut().zip(layer_cache.pre.data()) {
            if p <= R::zero() {
                *dp = R::zero();
            }
        }
        grads.gcn[l].add_assign(&layer_cache.a_g.matmul_at_b(&d_pre));
        let d_a_g = d_pre.matmul_a_bt(&params.gcn[l]);
        // Ã is symmetric, so Ãᵀ · d_a_g = Ã · d_a_g
        d_g = adj.mat.matmul(&d_a_g);
    }
    let _ = h;
    d_g
}

/// Residual fusion `R = H + G_L`.
pub fn fuse<R: Real>(h: &Matrix<R>, g_last: &Matrix<R>) -> Result<Matrix<R>> {
    if h.rows() != g_last.rows() || h.cols() != g_last.cols() {
        return Err(Error::Shape(format!(
            "fuse: H is {}x{}, G_L is {}x{}",
            h.rows(),
            h.cols(),
            g_last.rows(),
            g_last.cols()
        )));
    }
    Ok(h.add(g_last))
}

// ---------------------------------------------------------------------------
// decoder

struct DecLayerCache<R: Real> {
    x_in: Matrix<R>,
    rms1: RmsCache<R>,
    self_attn: SelfAttnCache<R>,
    x2: Matrix<R>,
    rms2: RmsCache<R>,
    cross: CrossAttnCache<R>,
    x3: Matrix<R>,
    rms3: RmsCache<R>,
    ffn: FfnCache<R>,
}

pub struct DecodeCache<R: Real> {
    layers: Vec<DecLayerCache<R>>,
    x_final: Matrix<R>,
    pub dists: Vec<Vec<R>>,
    t: usize,
}

fn embed_prefix<R: Real>(prefix: &[usize], params: &ModelParams<R>) -> Matrix<R> {
    let d = params.dims.d;
    let mut x = Matrix::zeros(prefix.len(), d);
    for (t, &id) in prefix.iter().enumerate() {
        let emb = params.embed.row(id);
        let pe = positional_encoding::<R>(t, d);
        for (out, (&a, b)) in x.row_mut(t).iter_mut().zip(emb.iter().zip(pe)) {
            *out = a + b;
        }
    }
    x
}

fn decoder_cached<R: Real>(
    prefix: &[usize],
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
) -> DecodeCache<R> {
    let t = prefix.len();
    let mut x = embed_prefix(prefix, params);
    let mut layers = Vec::with_capacity(params.dec.len());
    for layer in &params.dec {
        let rms1 = rmsnorm_rows(&x, t);
        let (sa_out, self_attn) = self_attn_forward(&rms1.normed, &layer.self_attn, t, true);
        let x2 = x.add(&sa_out);
        let rms2 = rmsnorm_rows(&x2, t);
        let (ca_out, cross) = cross_attn_forward(&rms2.normed, r, &layer.cross_attn, t, n_ctx);
        let x3 = x2.add(&ca_out);
        let rms3 = rmsnorm_rows(&x3, t);
        let (ff_out, ffn) = ffn_forward(&rms3.normed, &layer.ff, t);
        let x_out = x3.add(&ff_out);
        layers.push(DecLayerCache {
            x_in: x,
            rms1,
            self_attn,
            x2,
            rms2,
            cross,
            x3,
            rms3,
            ffn,
        });
        x = x_out;
    }
    let logits = x.matmul(&params.out_proj);
    let mut dists = Vec::with_capacity(t);
    for i in 0..t {
        let mut row = logits.row(i).to_vec();
        softmax_inplace(&mut row);
        dists.push(row);
    }
    DecodeCache {
        layers,
        x_final: x,
        dists,
        t,
    }
}

/// Next-token distribution after the given prefix (which must start
/// with BOS). `n_ctx` is the number of active rows of `r`.
pub fn decode_step<R: Real>(
    r: &Matrix<R>,
    n_ctx: usize,
    prefix: &[usize],
    params: &ModelParams<R>,
) -> Result<Vec<R>> {
    if prefix.first() != Some(&BOS_ID) {
        return Err(Error::Shape("decoder prefix must start with BOS".into()));
    }
    let cache = decoder_cached(prefix, r, n_ctx, params);
    Ok(cache.dists.last().expect("prefix non-empty").clone())
}

/// All teacher-forced step distributions for a target sequence:
/// position `t` sees gold tokens `< t` and predicts `targets[t]`.
pub fn teacher_forced_dists<R: Real>(
    targets: &[usize],
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
) -> Vec<Vec<R>> {
    let cache = decoder_cached(&teacher_prefix(targets), r, n_ctx, params);
    cache.dists
}

fn teacher_prefix(targets: &[usize]) -> Vec<usize> {
    let mut prefix = Vec::with_capacity(targets.len());
    prefix.push(BOS_ID);
    prefix.extend_from_slice(&targets[..targets.len() - 1]);
    prefix
}

fn decoder_backward<R: Real>(
    cache: &DecodeCache<R>,
    prefix: &[usize],
    r: &Matrix<R>,
    n_ctx: usize,
    params: &ModelParams<R>,
    d_logits: &Matrix<R>,
    grads: &mut ModelParams<R>,
    d_r: &mut Matrix<R>,
) {
    let t = cache.t;
    grads
        .out_proj
        .add_assign(&cache.x_final.matmul_at_b(d_logits));
    let mut d_x = d_logits.matmul_a_bt(&params.out_proj);

    for (layer_cache, (layer, glayer)) in cache
        .layers
        .iter()
        .zip(params.dec.iter().zip(grads.dec.iter_mut()))
        .rev()
    {
        // ffn sublayer
        let mut d_n3 = Matrix::zeros(t, params.dims.d);
        ffn_backward(
            &d_x,
            &layer_cache.rms3.normed,
            &layer.ff,
            &layer_cache.ffn,
            &mut d_n3,
            &mut glayer.ff,
        );
        let mut d_x3 = d_x;
        rmsnorm_rows_backward(&d_n3, &layer_cache.x3, &layer_cache.rms3, t, &mut d_x3);

        // cross-attention sublayer
        let mut d_n2 = Matrix::zeros(t, params.dims.d);
        cross_attn_backward(
            &d_x3,
            &layer_cache.rms2.normed,
            r,
            &layer.cross_attn,
            &layer_cache.cross,
            t,
            n_ctx,
            &mut d_n2,
            d_r,
            &mut glayer.cross_attn,
        );
        let mut d_x2 = d_x3;
        rmsnorm_rows_backward(&d_n2, &layer_cache.x2, &layer_cache.rms2, t, &mut d_x2);

        // causal self-attention sublayer
        let mut d_n1 = Matrix::zeros(t, params.dims.d);
        self_attn_backward(
            &d_x2,
            &layer_cache.rms1.normed,
            &layer.self_attn,
            &layer_cache.self_attn,
            t,
            true,
            &mut d_n1,
            &mut glayer.self_attn,
        );
        let mut d_in = d_x2;
        rmsnorm_rows_backward(&d_n1, &layer_cache.x_in, &layer_cache.rms1, t, &mut d_in);
        d_x = d_in;
    }
    for (pos, &id) in prefix.iter().enumerate() {
        let d = d_x.row(pos).to_vec();
        for (g, v) in grads.embed.row_mut(id).iter_mut().zip(d) {
            *g += v;
        }
    }
}

// ---------------------------------------------------------------------------
// loss

/// Mean negative log-probability of the target tokens (EOS included
/// as the final target; pads never enter `targets`).
pub fn loss<R: Real>(dists: &[Vec<R>], targets: &[usize]) -> Result<R> {
    if targets.is_empty() {
        return Err(Error::Training("empty target sequence".into()));
    }
    if dists.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} step distributions for {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let n = real::<R>(targets.len() as f64);
    let mut total = R::zero();
    for (dist, &target) in dists.iter().zip(targets) {
        total -= dist[target].ln();
    }
    Ok(total / n)
}

// ---------------------------------------------------------------------------
// whole-sample forward / backward

/// Stage outputs exposed for inspection and ablation checks.
#[derive(Clone, Debug)]
pub struct ForwardTrace<R: Real> {
    pub h: Matrix<R>,
    pub g_layers: Vec<Matrix<R>>,
    pub r: Matrix<R>,
    pub dists: Vec<Vec<R>>,
}

pub struct SampleForward<R: Real> {
    pub loss: R,
    pub adj: Option<NormalizedAdjacency<R>>,
    pub r: Matrix<R>,
    enc: EncodeCache<R>,
    gcn: Option<GcnCache<R>>,
    dec: DecodeCache<R>,
}

impl<R: Real> SampleForward<R> {
    pub fn trace(&self) -> ForwardTrace<R> {
        ForwardTrace {
            h: self.enc.h.clone(),
            g_layers: self
                .gcn
                .as_ref()
                .map(|g| g.layer_outputs())
                .unwrap_or_default(),
            r: self.r.clone(),
            dists: self.dec.dists.clone(),
        }
    }
}

/// Teacher-forced forward pass for one sample: encode, build and
/// normalize the graph for `mode`, run the GCN (skipped entirely in
/// `SelfLoops` mode, where the decoder consumes `H` directly), fuse,
/// decode against the gold prefix.
pub fn forward_sample<R: Real>(
    seq: &TokenSequence,
    targets: &[usize],
    params: &ModelParams<R>,
    mode: GraphMode,
) -> Result<SampleForward<R>> {
    let enc = encode_cached(seq, params);
    let (adj, use_gcn) = match mode {
        GraphMode::SelfLoops => (None, false),
        _ => {
            let graph = build_graph(seq, &enc.h, mode);
            (Some(normalize::<R>(&graph)), true)
        }
    };
    forward_from_encoded(seq, targets, params, enc, adj, use_gcn)
}

/// Forward pass with a caller-supplied normalized adjacency, treated
/// as a constant. Training and gradient verification share this path.
pub fn forward_sample_with_adj<R: Real>(
    seq: &TokenSequence,
    targets: &[usize],
    params: &ModelParams<R>,
    adj: &NormalizedAdjacency<R>,
) -> Result<SampleForward<R>> {
    let enc = encode_cached(seq, params);
    forward_from_encoded(seq, targets, params, enc, Some(adj.clone()), true)
}

fn forward_from_encoded<R: Real>(
    seq: &TokenSequence,
    targets: &[usize],
    params: &ModelParams<R>,
    enc: EncodeCache<R>,
    adj: Option<NormalizedAdjacency<R>>,
    use_gcn: bool,
) -> Result<SampleForward<R>> {
    if targets.is_empty() {
        return Err(Error::Training("empty target sequence".into()));
    }
    let (gcn, r) = if use_gcn {
        let adj_ref = adj.as_ref().expect("adjacency present when gcn runs");
        let gcn = gcn_cached(&enc.h, adj_ref, params);
        let r = fuse(&enc.h, gcn.last())?;
        (Some(gcn), r)
    } else {
        (None, enc.h.clone())
    };
    let dec = decoder_cached(&teacher_prefix(targets), &r, seq.true_len, params);
    let loss_value = loss(&dec.dists, targets)?;
    Ok(SampleForward {
        loss: loss_value,
        adj,
        r,
        enc,
        gcn,
        dec,
    })
}

/// Accumulates analytic gradients of the sample loss into `grads`.
pub fn backward_sample<R: Real>(
    fwd: &SampleForward<R>,
    seq: &TokenSequence,
    targets: &[usize],
    params: &ModelParams<R>,
    grads: &mut ModelParams<R>,
) {
    let t = targets.len();
    let vocab = params.dims.vocab;
    let inv_n = real::<R>(1.0 / t as f64);

    // fused softmax + cross-entropy gradient
    let mut d_logits = Matrix::zeros(t, vocab);
    for (i, (dist, &target)) in fwd.dec.dists.iter().zip(targets).enumerate() {
        let row = d_logits.row_mut(i);
        for (j, &p) in dist.iter().enumerate() {
            row[j] = p * inv_n;
        }
        row[target] -= inv_n;
    }

    let prefix = teacher_prefix(targets);
    let mut d_r = Matrix::zeros(fwd.r.rows(), fwd.r.cols());
    decoder_backward(
        &fwd.dec,
        &prefix,
        &fwd.r,
        seq.true_len,
        params,
        &d_logits,
        grads,
        &mut d_r,
    );

    let d_h = match (&fwd.gcn, &fwd.adj) {
        (Some(gcn), Some(adj)) => {
            // R = H + G_L: the fusion passes d_r to both branches
            let d_from_gcn = gcn_backward(gcn, &fwd.enc.h, adj, params, &d_r, grads);
            d_r.add(&d_from_gcn)
        }
        _ => d_r,
    };
    encode_backward(&fwd.enc, seq, params, &d_h, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_parts, AssemblyParts, Vocabulary};
    use crate::graph::{build_graph, normalize};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab: 12,
            d: 6,
            gcn_layers: 2,
            n_max: 8,
        }
    }

    fn tiny_seq() -> TokenSequence {
        let vocab = Vocabulary::from_token_stream(["a", "b", "c", "d", "e", "f", "g", "h"], 1);
        assemble_parts(
            &AssemblyParts {
                caption_tokens: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                ..Default::default()
            },
            &vocab,
            8,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::<f64>::init(tiny_dims(), 42);
        let b = ModelParams::<f64>::init(tiny_dims(), 42);
        let c = ModelParams::<f64>::init(tiny_dims(), 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn encode_zeroes_pad_rows_and_is_deterministic() {
        let params = ModelParams::<f64>::init(tiny_dims(), 1);
        let seq = tiny_seq();
        let h1 = encode(&seq, &params);
        let h2 = encode(&seq, &params);
        assert_eq!(h1, h2);
        for i in seq.true_len..seq.n_max() {
            assert!(h1.row(i).iter().all(|&v| v == 0.0), "pad row {i} nonzero");
        }
        assert!(h1.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encode_ignores_pad_content() {
        // contents past true_len must not affect active rows (mask rule)
        let params = ModelParams::<f64>::init(tiny_dims(), 1);
        let seq = tiny_seq();
        let mut tampered = seq.clone();
        tampered.ids[6] = 5; // garbage id in a pad slot
        let h1 = encode(&seq, &params);
        let h2 = encode(&tampered, &params);
        for i in 0..seq.true_len {
            assert_eq!(h1.row(i), h2.row(i));
        }
    }

    #[test]
    fn gcn_identity_passthrough() {
        // Ã = I and W_l = I keep a nonnegative H unchanged
        let dims = tiny_dims();
        let mut params = ModelParams::<f64>::zeros(dims);
        for w in &mut params.gcn {
            for i in 0..dims.d {
                w.set(i, i, 1.0);
            }
        }
        let seq = tiny_seq();
        let graph = build_graph(&seq, &Matrix::<f64>::zeros(8, dims.d), GraphMode::SelfLoops);
        let adj = normalize::<f64>(&graph);
        let mut h = Matrix::zeros(8, dims.d);
        for i in 0..seq.true_len {
            for j in 0..dims.d {
                h.set(i, j, (i + j) as f64 * 0.1);
            }
        }
        let g = gcn_forward(&h, &adj, &params);
        assert_eq!(g, h);
    }

    #[test]
    fn gcn_zero_input_zero_output() {
        let params = ModelParams::<f64>::init(tiny_dims(), 2);
        let seq = tiny_seq();
        let h = Matrix::<f64>::zeros(8, tiny_dims().d);
        let graph = build_graph(&seq, &h, GraphMode::Rules);
        let adj = normalize::<f64>(&graph);
        let g = gcn_forward(&h, &adj, &params);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_matches_straight_line_reimplementation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dims = ModelDims {
            vocab: 12,
            d: 4,
            gcn_layers: 2,
            n_max: 8,
        };
        let params = ModelParams::<f64>::init(dims, 3);
        let seq = tiny_seq();
        let mut h = Matrix::zeros(8, 4);
        for i in 0..seq.true_len {
            for j in 0..4 {
                h.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let graph = build_graph(&seq, &h, GraphMode::Rules);
        let adj = normalize::<f64>(&graph);
        let fast = gcn_forward(&h, &adj, &params);

        // independent elementwise reimplementation of the two layers
        let n_max = 8;
        let d = 4;
        let mut g = h.clone();
        for w in &params.gcn {
            let mut ag = vec![vec![0.0; d]; n_max];
            for i in 0..n_max {
                for j in 0..n_max {
                    let a = adj.mat.get(i, j);
                    for c in 0..d {
                        ag[i][c] += a * g.get(j, c);
                    }
                }
            }
            let mut next = Matrix::zeros(n_max, d);
            for i in 0..n_max {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += ag[i][k] * w.get(k, c);
                    }
                    next.set(i, c, acc.max(0.0));
                }
            }
            g = next;
        }
        assert!(fast.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn gcn_outputs_nonnegative() {
        let params = ModelParams::<f64>::init(tiny_dims(), 5);
        let seq = tiny_seq();
        let h = encode(&seq, &params);
        let graph = build_graph(&seq, &h, GraphMode::Rules);
        let adj = normalize::<f64>(&graph);
        let cache = gcn_cached(&h, &adj, &params);
        for layer in &cache.layers {
            assert!(layer.g_out.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fuse_adds_elementwise_and_checks_shape() {
        let a = Matrix::from_vec(2, 2, vec![1.0; 4]);
        let b = Matrix::from_vec(2, 2, vec![2.0; 4]);
        assert_eq!(fuse(&a, &b).unwrap().data(), &[3.0; 4]);
        assert_eq!(fuse(&a, &Matrix::zeros(2, 2)).unwrap(), a);
        assert_eq!(fuse(&Matrix::zeros(2, 2), &b).unwrap(), b);
        assert!(fuse(&a, &Matrix::<f64>::zeros(3, 2)).is_err());
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let params = ModelParams::<f64>::init(tiny_dims(), 7);
        let seq = tiny_seq();
        let h = encode(&seq, &params);
        let dist = decode_step(&h, seq.true_len, &[BOS_ID, 4, 5], &params).unwrap();
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(dist.iter().all(|&p| p > 0.0));
        let again = decode_step(&h, seq.true_len, &[BOS_ID, 4, 5], &params).unwrap();
        assert_eq!(dist, again);
        assert!(decode_step(&h, seq.true_len, &[4, 5], &params).is_err());
    }

    #[test]
    fn decode_step_is_causal() {
        // step distributions do not change when the prefix is extended
        let params = ModelParams::<f64>::init(tiny_dims(), 8);
        let seq = tiny_seq();
        let h = encode(&seq, &params);
        let short = decoder_cached(&[BOS_ID, 4], &h, seq.true_len, &params);
        let long = decoder_cached(&[BOS_ID, 4, 5, 6], &h, seq.true_len, &params);
        for t in 0..2 {
            let a = &short.dists[t];
            let b = &long.dists[t];
            let max_diff = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-12, "step {t} diverged by {max_diff}");
        }
    }

    #[test]
    fn loss_perfect_prediction_is_zero() {
        let mut dist = vec![0.0; 4];
        dist[2] = 1.0;
        let l = loss::<f64>(&[dist.clone(), dist], &[2, 2]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_uniform_is_log_vocab() {
        let dist = vec![0.25f64; 4];
        let l = loss(&[dist.clone(), dist], &[0, 3]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_nonnegative_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let v = 5;
            let steps = rng.gen_range(1..5);
            let dists: Vec<Vec<f64>> = (0..steps)
                .map(|_| {
                    let mut d: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = d.iter().sum();
                    d.iter_mut().for_each(|x| *x /= s);
                    d
                })
                .collect();
            let targets: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..v)).collect();
            assert!(loss(&dists, &targets).unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_empty_targets_errors() {
        assert!(loss::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn teacher_forced_matches_stepwise_decode() {
        let params = ModelParams::<f64>::init(tiny_dims(), 11);
        let seq = tiny_seq();
        let h = encode(&seq, &params);
        let targets = [4usize, 5, 6, crate::assembly::EOS_ID];
        let full = teacher_forced_dists(&targets, &h, seq.true_len, &params);
        let mut prefix = vec![BOS_ID];
        for (t, &target) in targets.iter().enumerate() {
            let step = decode_step(&h, seq.true_len, &prefix, &params).unwrap();
            let max_diff = step
                .iter()
                .zip(&full[t])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-12, "step {t} differs by {max_diff}");
            prefix.push(target);
        }
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        // the acceptance suite runs the exhaustive version; this is a
        // spot check across every tensor on a tiny instance
        let dims = ModelDims {
            vocab: 10,
            d: 4,
            gcn_layers: 2,
            n_max: 8,
        };
        let params = ModelParams::<f64>::init(dims, 21);
        let seq = tiny_seq();
        let targets = vec![4usize, 6, crate::assembly::EOS_ID];

        let h0 = encode(&seq, &params);
        let graph = build_graph(&seq, &h0, GraphMode::Rules);
        let adj = normalize::<f64>(&graph);

        let fwd = forward_sample_with_adj(&seq, &targets, &params, &adj).unwrap();
        let mut grads = ModelParams::zeros(dims);
        backward_sample(&fwd, &seq, &targets, &params, &mut grads);

        let f = |p: &ModelParams<f64>| {
            forward_sample_with_adj(&seq, &targets, p, &adj).unwrap().loss
        };
        let h = 1e-5;
        let named_grads = grads.tensors();
        for (ti, (info, tensor)) in params.tensors().iter().enumerate() {
            let (flat_idx_list, rows, cols) = {
                let r = tensor.rows();
                let c = tensor.cols();
                // probe a few entries per tensor
                (vec![0usize, (r * c) / 2, r * c - 1], r, c)
            };
            for flat in flat_idx_list {
                let (i, j) = (flat / cols, flat % cols);
                let mut pp = params.clone();
                let mut pm = params.clone();
                {
                    let mut ts = pp.tensors_mut();
                    let v = ts[ti].1.get(i, j);
                    ts[ti].1.set(i, j, v + h);
                }
                {
                    let mut ts = pm.tensors_mut();
                    let v = ts[ti].1.get(i, j);
                    ts[ti].1.set(i, j, v - h);
                }
                let num = (f(&pp) - f(&pm)) / (2.0 * h);
                let ana = named_grads[ti].1.get(i, j);
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < 1e-4,
                    "{} [{i}][{j}] ({rows}x{cols}): analytic {ana} vs numeric {num}",
                    info.name
                );
            }
        }
    }
}
