//! Wild Relation Network with stacked relation layers.
//!
//! Every panel is embedded by a shared CNN, projected and tagged with a
//! 9-way position one-hot. For each candidate the eight context embeddings
//! plus the candidate (position 8) form nine objects. Each relation layer
//! applies a shared MLP `g` to all 81 ordered object pairs; intermediate
//! layers sum the results per base object, the last layer sums all pairs.
//! A final MLP `f_phi` maps that vector to the candidate's score.
//!
//! Two implementations live here. The reference functions
//! ([`embed_panel`], [`form_pairs`], [`relation_layer`],
//! [`score_candidate`]) follow the definition literally on plain vectors.
//! [`forward_batch`] records the same computation for a whole batch on a
//! [`Graph`], evaluating context-context pairs of the first layer once per
//! sample instead of once per candidate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{SampleRecord, CANDIDATES, CONTEXT_PANELS, PANELS};
use crate::encoding::MEConfig;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::ops::{conv2d, linear, relu};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

/// Objects per relation problem: eight context panels and one candidate.
pub const OBJECTS: usize = 9;
/// Length of the position one-hot appended to every embedding.
pub const POSITIONS: usize = 9;
pub const DROPOUT_RATE: f64 = 0.5;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

/// How pair results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            _ => Err(invalid!("unknown aggregation {s:?}")),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        })
    }
}

/// Reduction applied after a relation layer's `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `r_i = sum_j g(e_i, e_j)`: nine outputs.
    PerBase,
    /// Sum over all 81 pairs: one output.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub relation_layers: usize,
    pub layer1_widths: Vec<usize>,
    pub deeper_widths: Vec<usize>,
    pub f_phi_widths: Vec<usize>,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_count: usize,
    pub me: Option<MEConfig>,
    pub image_size: usize,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(3)
    }
}

impl ModelConfig {
    /// Full-size configuration for 80x80 panels.
    pub fn paper(relation_layers: usize) -> Self {
        ModelConfig {
            relation_layers,
            layer1_widths: vec![512, 512, 512, 256],
            deeper_widths: vec![256, 256, 256],
            f_phi_widths: vec![256, 256, 1],
            embed_dim: 256,
            conv_channels: 32,
            conv_count: 4,
            me: None,
            image_size: 80,
            aggregation: Aggregation::Sum,
        }
    }

    /// Desk-scale configuration for 32x32 micro-PGM panels.
    pub fn micro(relation_layers: usize) -> Self {
        ModelConfig {
            relation_layers,
            layer1_widths: vec![64, 64],
            deeper_widths: vec![64, 64],
            f_phi_widths: vec![64, 1],
            embed_dim: 64,
            conv_channels: 16,
            conv_count: 2,
            me: Some(MEConfig::gaussian(8, 0.28).expect("valid encoding")),
            image_size: 32,
            aggregation: Aggregation::Sum,
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            relation_layers: 1,
            layer1_widths: vec![16, 16],
            deeper_widths: vec![16, 16],
            f_phi_widths: vec![16, 1],
            embed_dim: 16,
            conv_channels: 4,
            conv_count: 2,
            me: Some(MEConfig::gaussian(4, 0.28).expect("valid encoding")),
            image_size: 16,
            aggregation: Aggregation::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.relation_layers == 0 {
            return Err(invalid!("relation_layers must be >= 1"));
        }
        if self.embed_dim <= POSITIONS {
            return Err(invalid!(
                "embed_dim must exceed the {POSITIONS}-way position one-hot"
            ));
        }
        if self.f_phi_widths.last() != Some(&1) {
            return Err(invalid!("f_phi must end in a single score unit"));
        }
        let widths = [&self.layer1_widths, &self.deeper_widths, &self.f_phi_widths];
        if widths.iter().any(|w| w.is_empty() || w.contains(&0)) {
            return Err(invalid!("MLP widths must be non-empty and positive"));
        }
        if self.conv_channels == 0 || self.conv_count == 0 {
            return Err(invalid!(
                "conv cascade must have at least one layer and channel"
            ));
        }
        self.conv_sizes()?;
        if let Some(me) = &self.me {
            me.validate()?;
        }
        Ok(())
    }

    pub fn projection_dim(&self) -> usize {
        self.embed_dim - POSITIONS
    }

    /// Channels entering the first convolution.
    pub fn input_channels(&self) -> usize {
        self.me.map_or(1, |m| m.d)
    }

    /// Spatial size after each convolution. Every stage must halve exactly.
    pub fn conv_sizes(&self) -> Result<Vec<usize>> {
        let mut s = self.image_size;
        let mut out = Vec::with_capacity(self.conv_count);
        for _ in 0..self.conv_count {
            if s < 2 || !s.is_multiple_of(2) {
                return Err(shape_err!(
                    "image size {} does not halve through {} stride-2 convolutions",
                    self.image_size,
                    self.conv_count
                ));
            }
            s = (s + 2 * PADDING - KERNEL) / STRIDE + 1;
            out.push(s);
        }
        Ok(out)
    }

    pub fn flatten_dim(&self) -> usize {
        let s = *self
            .conv_sizes()
            .expect("validated")
            .last()
            .expect("at least one conv");
        self.conv_channels * s * s
    }

    /// MLP widths of `g` in relation layer `layer` (0-based).
    pub fn g_widths(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.layer1_widths
        } else {
            &self.deeper_widths
        }
    }

    /// Input width (per object) of relation layer `layer`.
    pub fn object_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            *self.g_widths(layer - 1).last().expect("non-empty")
        }
    }

    fn scale(&self, reduction: Reduction) -> f64 {
        match (self.aggregation, reduction) {
            (Aggregation::Sum, _) => 1.0,
            (Aggregation::Mean, Reduction::PerBase) => 1.0 / OBJECTS as f64,
            (Aggregation::Mean, Reduction::Global) => 1.0 / (OBJECTS * OBJECTS) as f64,
        }
    }

    /// `(name, shape)` of every parameter, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut layer = |name: String, m: usize, n: &[usize]| {
            let mut w = vec![m];
            w.extend_from_slice(n);
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), vec![m]));
        };
        let mut c = self.input_channels();
        for i in 0..self.conv_count {
            layer(format!("conv{i}"), self.conv_channels, &[c, KERNEL, KERNEL]);
            c = self.conv_channels;
        }
        layer("proj".into(), self.projection_dim(), &[self.flatten_dim()]);
        for l in 0..self.relation_layers {
            let mut n = 2 * self.object_width(l);
            for (k, &m) in self.g_widths(l).iter().enumerate() {
                layer(format!("rel{l}.fc{k}"), m, &[n]);
                n = m;
            }
        }
        let mut n = self.object_width(self.relation_layers);
        for (k, &m) in self.f_phi_widths.iter().enumerate() {
            layer(format!("fphi.fc{k}"), m, &[n]);
            n = m;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters drawn uniformly from `±1/sqrt(fan_in)`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let shapes = cfg.param_shapes();
    for pair in shapes.chunks(2) {
        let (wname, wshape) = &pair[0];
        let (bname, bshape) = &pair[1];
        let fan_in: usize = wshape[1..].iter().product();
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data)
        };
        let w = draw(wshape)?;
        let b = draw(bshape)?;
        params.push(wname.clone(), w)?;
        params.push(bname.clone(), b)?;
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `cfg` describes.
pub fn check_params<T: Real>(params: &ParamSet<T>, cfg: &ModelConfig) -> Result<()> {
    let shapes = cfg.param_shapes();
    if params.len() != shapes.len() {
        return Err(shape_err!(
            "{} parameters, config needs {}",
            params.len(),
            shapes.len()
        ));
    }
    for (name, shape) in &shapes {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(shape_err!(
                    "{name}: shape {:?}, config needs {shape:?}",
                    t.shape()
                ))
            }
            None => return Err(shape_err!("missing parameter {name}")),
        }
    }
    Ok(())
}

fn param<'a, T: Real>(params: &'a ParamSet<T>, name: &str) -> Result<&'a Tensor<T>> {
    params
        .get(name)
        .ok_or_else(|| shape_err!("missing parameter {name}"))
}

/// Per-pixel input encoding: a lookup table from byte to channel values.
#[derive(Debug, Clone)]
pub struct InputEncoder<T> {
    channels: usize,
    table: Vec<T>,
}

impl<T: Real> InputEncoder<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        match &cfg.me {
            Some(me) => Ok(InputEncoder {
                channels: me.d,
                table: me
                    .byte_table()?
                    .into_iter()
                    .map(|v| T::of(v as f64))
                    .collect(),
            }),
            None => Ok(InputEncoder {
                channels: 1,
                table: (0..=255u8)
                    .map(|p| T::of(crate::data::byte_to_unit(p) as f64))
                    .collect(),
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Encodes one `S * S` byte panel into `out`, laid out `[C, S, S]`.
    pub fn encode_into(&self, pixels: &[u8], out: &mut [T]) {
        let n = pixels.len();
        let c = self.channels;
        for (i, &p) in pixels.iter().enumerate() {
            let row = &self.table[p as usize * c..(p as usize + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                out[ch * n + i] = v;
            }
        }
    }

    /// Encodes one panel into a `[C, S, S]` tensor.
    pub fn encode_panel(&self, pixels: &[u8], size: usize) -> Result<Tensor<T>> {
        if pixels.len() != size * size {
            return Err(shape_err!(
                "{} pixels for a {size}x{size} panel",
                pixels.len()
            ));
        }
        let mut out = vec![T::zero(); self.channels * pixels.len()];
        self.encode_into(pixels, &mut out);
        Tensor::new(&[self.channels, size, size], out)
    }

    /// Encodes the 16 panels of every sample into `[N * 16, C, S, S]`.
    pub fn encode_batch(&self, samples: &[&SampleRecord], size: usize) -> Result<Tensor<T>> {
        let plane = size * size;
        let per_panel = self.channels * plane;
        let mut out = vec![T::zero(); samples.len() * PANELS * per_panel];
        for (s, chunk) in samples.iter().zip(out.chunks_mut(PANELS * per_panel)) {
            if s.image_size != size {
                return Err(shape_err!(
                    "sample image size {} for a {size}x{size} model",
                    s.image_size
                ));
            }
            for (i, dst) in chunk.chunks_mut(per_panel).enumerate() {
                self.encode_into(s.panel(i), dst);
            }
        }
        Tensor::new(&[samples.len() * PANELS, self.channels, size, size], out)
    }
}

/// One panel's embedding; the last [`POSITIONS`] values are its one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelEmbedding<T> {
    pub values: Vec<T>,
    pub position: usize,
}

/// Embeds an encoded `[C, H, W]` panel.
pub fn embed_panel<T: Real>(
    image: &Tensor<T>,
    position: usize,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<PanelEmbedding<T>> {
    if position >= POSITIONS {
        return Err(invalid!("position {position} outside 0..9"));
    }
    let expect = [cfg.input_channels(), cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(shape_err!(
            "panel {:?}, model expects {expect:?}",
            image.shape()
        ));
    }
    cfg.conv_sizes()?;
    let mut x = image.clone();
    for i in 0..cfg.conv_count {
        let k = param(params, &format!("conv{i}.weight"))?;
        let b = param(params, &format!("conv{i}.bias"))?;
        x = relu(&conv2d(&x, k, b, STRIDE, PADDING)?);
    }
    let flat = x.reshape(&[cfg.flatten_dim()])?;
    let proj = linear(
        &flat,
        param(params, "proj.weight")?,
        param(params, "proj.bias")?,
    )?;
    let mut values = proj.into_data();
    values.extend((0..POSITIONS).map(|p| if p == position { T::one() } else { T::zero() }));
    Ok(PanelEmbedding { values, position })
}

/// All 81 ordered pairs `concat(e_i, e_j)`, row-major in `(i, j)`.
pub fn form_pairs<T: Real>(embeddings: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    if embeddings.len() != OBJECTS {
        return Err(shape_err!(
            "form_pairs needs {OBJECTS} embeddings, got {}",
            embeddings.len()
        ));
    }
    let width = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != width) {
        return Err(shape_err!("embeddings of unequal width"));
    }
    let mut out = Vec::with_capacity(OBJECTS * OBJECTS);
    for a in embeddings {
        for b in embeddings {
            let mut v = a.clone();
            v.extend_from_slice(b);
            out.push(v);
        }
    }
    Ok(out)
}

fn mlp<T: Real>(
    x: &[T],
    prefix: &str,
    widths: usize,
    relu_last: bool,
    params: &ParamSet<T>,
) -> Result<Vec<T>> {
    let mut h = Tensor::new(&[x.len()], x.to_vec())?;
    for k in 0..widths {
        let w = param(params, &format!("{prefix}.fc{k}.weight"))?;
        let b = param(params, &format!("{prefix}.fc{k}.bias"))?;
        h = linear(&h, w, b)?;
        if k + 1 < widths || relu_last {
            h = relu(&h);
        }
    }
    Ok(h.into_data())
}

/// Applies relation layer `layer` to nine object vectors.
pub fn relation_layer<T: Real>(
    embeddings: &[Vec<T>],
    layer: usize,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    reduction: Reduction,
) -> Result<Vec<Vec<T>>> {
    if layer >= cfg.relation_layers {
        return Err(invalid!(
            "relation layer {layer} of {}",
            cfg.relation_layers
        ));
    }
    let width = cfg.object_width(layer);
    if embeddings.iter().any(|e| e.len() != width) {
        return Err(shape_err!(
            "relation layer {layer} expects objects of width {width}"
        ));
    }
    let pairs = form_pairs(embeddings)?;
    let depth = cfg.g_widths(layer).len();
    let out_width = *cfg.g_widths(layer).last().expect("non-empty");
    let prefix = format!("rel{layer}");
    let scale = T::of(cfg.scale(reduction));
    let rows = match reduction {
        Reduction::PerBase => OBJECTS,
        Reduction::Global => 1,
    };
    let mut out = vec![vec![T::zero(); out_width]; rows];
    for (p, pair) in pairs.iter().enumerate() {
        let g = mlp(pair, &prefix, depth, true, params)?;
        let dst = match reduction {
            Reduction::PerBase => &mut out[p / OBJECTS],
            Reduction::Global => &mut out[0],
        };
        for (o, v) in dst.iter_mut().zip(g) {
            *o += v;
        }
    }
    for row in &mut out {
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Scores one candidate against eight context embeddings.
pub fn score_candidate<T: Real>(
    context: &[PanelEmbedding<T>],
    candidate: &PanelEmbedding<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<T> {
    if context.len() != CONTEXT_PANELS {
        return Err(shape_err!(
            "{} context embeddings, expected 8",
            context.len()
        ));
    }
    if candidate.position != CONTEXT_PANELS {
        return Err(invalid!(
            "candidate must carry position 8, got {}",
            candidate.position
        ));
    }
    let mut objects: Vec<Vec<T>> = context.iter().map(|e| e.values.clone()).collect();
    objects.push(candidate.values.clone());
    for l in 0..cfg.relation_layers {
        let reduction = if l + 1 == cfg.relation_layers {
            Reduction::Global
        } else {
            Reduction::PerBase
        };
        objects = relation_layer(&objects, l, params, cfg, reduction)?;
    }
    let out = mlp(&objects[0], "fphi", cfg.f_phi_widths.len(), false, params)?;
    Ok(out[0])
}

/// Scores all eight candidates of `sample` with the reference path.
pub fn wren_forward_reference<T: Real>(
    sample: &SampleRecord,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let enc = InputEncoder::new(cfg)?;
    let embed = |i: usize, pos: usize| {
        let img = enc.encode_panel(sample.panel(i), sample.image_size)?;
        embed_panel(&img, pos, params, cfg)
    };
    let context = (0..CONTEXT_PANELS)
        .map(|i| embed(i, i))
        .collect::<Result<Vec<_>>>()?;
    let scores = (0..CANDIDATES)
        .map(|k| {
            score_candidate(
                &context,
                &embed(CONTEXT_PANELS + k, CONTEXT_PANELS)?,
                params,
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[CANDIDATES], scores)
}

/// Scores all eight candidates of `sample` (evaluation mode).
pub fn wren_forward<T: Real>(
    sample: &SampleRecord,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let enc = InputEncoder::new(cfg)?;
    let mut g = Graph::new(params);
    let out = forward_batch(&mut g, cfg, &enc, &[sample], None)?;
    g.value(out.scores).clone().reshape(&[CANDIDATES])
}

/// Index of the highest score; ties go to the lowest index.
pub fn predict<T: Real>(scores: &Tensor<T>) -> Result<usize> {
    scores.ensure_finite("scores")?;
    let s = scores.data();
    if s.is_empty() {
        return Err(invalid!("predict on empty scores"));
    }
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Handles into a recorded batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[batch, 8]` candidate scores.
    pub scores: Var,
    /// Input to `f_phi`, one row per (sample, candidate).
    pub phi_in: Var,
    /// Output of `f_phi`, one row per (sample, candidate).
    pub phi_out: Var,
}

/// Pair list and aggregation segments of the first relation layer for
/// `batch` samples, with embedding rows laid out 16 per sample.
///
/// Context-context pairs are shared by all candidates of a sample, so each
/// sample contributes 64 shared pair rows plus 17 rows per candidate.
fn first_layer_plan(batch: usize, reduction: Reduction) -> (Vec<(u32, u32)>, Vec<usize>, Vec<u32>) {
    const SHARED: usize = CONTEXT_PANELS * CONTEXT_PANELS;
    const OWN: usize = 2 * CONTEXT_PANELS + 1;
    let per_sample = SHARED + CANDIDATES * OWN;
    let mut pairs = Vec::with_capacity(batch * per_sample);
    for b in 0..batch {
        let base = (b * PANELS) as u32;
        for i in 0..CONTEXT_PANELS as u32 {
            for j in 0..CONTEXT_PANELS as u32 {
                pairs.push((base + i, base + j));
            }
        }
        for k in 0..CANDIDATES as u32 {
            let cand = base + CONTEXT_PANELS as u32 + k;
            for i in 0..CONTEXT_PANELS as u32 {
                pairs.push((base + i, cand));
            }
            for j in 0..CONTEXT_PANELS as u32 {
                pairs.push((cand, base + j));
            }
            pairs.push((cand, cand));
        }
    }
    // row of pair (i, j) for candidate k of sample b, objects 0..9
    let row = |b: usize, k: usize, i: usize, j: usize| -> u32 {
        let start = b * per_sample;
        let own = start + SHARED + k * OWN;
        (match (i < CONTEXT_PANELS, j < CONTEXT_PANELS) {
            (true, true) => start + i * CONTEXT_PANELS + j,
            (true, false) => own + i,
            (false, true) => own + CONTEXT_PANELS + j,
            (false, false) => own + 2 * CONTEXT_PANELS,
        }) as u32
    };
    let mut offsets = vec![0];
    let mut index = Vec::with_capacity(batch * CANDIDATES * OBJECTS * OBJECTS);
    for b in 0..batch {
        for k in 0..CANDIDATES {
            match reduction {
                Reduction::PerBase => {
                    for i in 0..OBJECTS {
                        index.extend((0..OBJECTS).map(|j| row(b, k, i, j)));
                        offsets.push(index.len());
                    }
                }
                Reduction::Global => {
                    for i in 0..OBJECTS {
                        index.extend((0..OBJECTS).map(|j| row(b, k, i, j)));
                    }
                    offsets.push(index.len());
                }
            }
        }
    }
    (pairs, offsets, index)
}

fn graph_mlp<T: Real>(
    g: &mut Graph<'_, T>,
    mut h: Var,
    prefix: &str,
    from: usize,
    to: usize,
    relu_last: bool,
) -> Result<Var> {
    for k in from..to {
        let w = g.param_named(&format!("{prefix}.fc{k}.weight"))?;
        let b = g.param_named(&format!("{prefix}.fc{k}.bias"))?;
        h = g.linear(h, w, Some(b))?;
        if k + 1 < to || relu_last {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Records the forward pass for a batch of samples.
///
/// With `dropout_seed` set, the output of the penultimate `f_phi` layer is
/// masked with keep probability `1 - DROPOUT_RATE` and rescaled.
pub fn forward_batch<'p, T: Real>(
    g: &mut Graph<'p, T>,
    cfg: &ModelConfig,
    encoder: &InputEncoder<T>,
    samples: &[&SampleRecord],
    dropout_seed: Option<u64>,
) -> Result<Forward> {
    if samples.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let batch = samples.len();
    let n = batch * PANELS;

    let mut x = g.constant(encoder.encode_batch(samples, cfg.image_size)?)?;
    for i in 0..cfg.conv_count {
        let k = g.param_named(&format!("conv{i}.weight"))?;
        let b = g.param_named(&format!("conv{i}.bias"))?;
        x = g.conv2d(x, k, b, STRIDE, PADDING)?;
        x = g.relu(x)?;
    }
    let flat = g.reshape(x, &[n, cfg.flatten_dim()])?;
    let w = g.param_named("proj.weight")?;
    let b = g.param_named("proj.bias")?;
    let proj = g.linear(flat, w, Some(b))?;
    let mut onehot = vec![T::zero(); n * POSITIONS];
    for (r, row) in onehot.chunks_mut(POSITIONS).enumerate() {
        row[(r % PANELS).min(CONTEXT_PANELS)] = T::one();
    }
    let onehot = g.constant(Tensor::new(&[n, POSITIONS], onehot)?)?;
    let embed = g.concat_cols(proj, onehot)?;

    let mut objects = embed;
    for l in 0..cfg.relation_layers {
        let reduction = if l + 1 == cfg.relation_layers {
            Reduction::Global
        } else {
            Reduction::PerBase
        };
        let depth = cfg.g_widths(l).len();
        let prefix = format!("rel{l}");
        let w = g.param_named(&format!("{prefix}.fc0.weight"))?;
        let b = g.param_named(&format!("{prefix}.fc0.bias"))?;
        let scale = T::of(cfg.scale(reduction));
        objects = if l == 0 {
            let (pairs, offsets, index) = first_layer_plan(batch, reduction);
            let mut h = g.pair_linear_indexed(objects, w, b, pairs)?;
            h = g.relu(h)?;
            h = graph_mlp(g, h, &prefix, 1, depth, true)?;
            g.segment_sum(h, offsets, index, scale)?
        } else {
            let mut h = g.pair_linear(objects, w, b, OBJECTS)?;
            h = g.relu(h)?;
            h = graph_mlp(g, h, &prefix, 1, depth, true)?;
            let group = match reduction {
                Reduction::PerBase => OBJECTS,
                Reduction::Global => OBJECTS * OBJECTS,
            };
            g.group_sum(h, group, scale)?
        };
    }

    let phi_in = objects;
    let depth = cfg.f_phi_widths.len();
    let mut h = graph_mlp(g, phi_in, "fphi", 0, depth - 1, true)?;
    if let Some(seed) = dropout_seed {
        if depth >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 - DROPOUT_RATE;
            let mask = (0..g.value(h).numel())
                .map(|_| {
                    if rng.gen_bool(keep) {
                        T::of(1.0 / keep)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            h = g.mask(h, mask)?;
        }
    }
    let phi_out = graph_mlp(g, h, "fphi", depth - 1, depth, false)?;
    let scores = g.reshape(phi_out, &[batch, CANDIDATES])?;
    Ok(Forward {
        scores,
        phi_in,
        phi_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};
    use approx::assert_relative_eq;

    fn zero_params(cfg: &ModelConfig) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            p.push(name, Tensor::zeros(&shape)).unwrap();
        }
        p
    }

    fn micro_samples(n: usize) -> Vec<SampleRecord> {
        generate_dataset(
            &GeneratorConfig {
                seed: 21,
                ..Default::default()
            },
            n,
        )
        .unwrap()
    }

    #[test]
    fn paper_parameter_count() {
        // conv 320 + 3 * 9248, proj 800 * 247 + 247, g1 919296,
        // g2 = g3 = 262912, f_phi 131841
        assert_eq!(ModelConfig::paper(3).param_count(), 1_802_872);
        let mut me = ModelConfig::paper(3);
        me.me = Some(MEConfig::gaussian(20, 0.28).unwrap());
        assert_eq!(me.param_count(), 1_802_872 + 19 * 32 * 9);
        assert_eq!(ModelConfig::paper(3).flatten_dim(), 800);
        assert_eq!(ModelConfig::paper(3).projection_dim(), 247);
    }

    #[test]
    fn paper_layer_widths() {
        let cfg = ModelConfig::paper(3);
        let shapes = cfg.param_shapes();
        let get = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(get("rel0.fc0.weight"), vec![512, 512]);
        assert_eq!(get("rel0.fc3.weight"), vec![256, 512]);
        assert_eq!(get("rel1.fc0.weight"), vec![256, 512]);
        assert_eq!(get("rel2.fc2.weight"), vec![256, 256]);
        assert_eq!(get("fphi.fc2.weight"), vec![1, 256]);
        assert_eq!(get("conv0.weight"), vec![32, 1, 3, 3]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::micro(2);
        cfg.validate().unwrap();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::micro(2);
        cfg.f_phi_widths = vec![64, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::micro(2);
        cfg.relation_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn me_sets_input_channels() {
        let p = init_params(&ModelConfig::micro(1), 0).unwrap();
        assert_eq!(p.get("conv0.weight").unwrap().shape(), &[16, 8, 3, 3]);
        let mut cfg = ModelConfig::micro(1);
        cfg.me = None;
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(p.get("conv0.weight").unwrap().shape(), &[16, 1, 3, 3]);
    }

    #[test]
    fn paper_scale_embedding_shape() {
        let cfg = ModelConfig::paper(1);
        let p = init_params(&cfg, 1).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 80, 80]);
        let e = embed_panel(&img, 3, &p, &cfg).unwrap();
        assert_eq!(e.values.len(), 256);
        assert_eq!(&e.values[247..], &[0., 0., 0., 1., 0., 0., 0., 0., 0.]);
        assert!(embed_panel(&Tensor::<f32>::zeros(&[1, 64, 64]), 3, &p, &cfg).is_err());
    }

    #[test]
    fn embeddings_differ_only_in_position() {
        let cfg = ModelConfig::micro(1);
        let p = init_params(&cfg, 2).unwrap().cast::<f64>();
        let s = &micro_samples(1)[0];
        let enc = InputEncoder::<f64>::new(&cfg).unwrap();
        let img = enc.encode_panel(s.panel(0), 32).unwrap();
        let a = embed_panel(&img, 3, &p, &cfg).unwrap();
        let b = embed_panel(&img, 7, &p, &cfg).unwrap();
        let proj = cfg.projection_dim();
        assert_eq!(a.values[..proj], b.values[..proj]);
        assert_ne!(a.values[proj..], b.values[proj..]);
    }

    #[test]
    fn zero_parameters_give_zero_embedding_and_score() {
        let cfg = ModelConfig::micro(2);
        let p = zero_params(&cfg);
        let img = Tensor::<f64>::zeros(&[8, 32, 32]);
        let e = embed_panel(&img, 5, &p, &cfg).unwrap();
        assert!(e.values[..55].iter().all(|&v| v == 0.0));
        assert_eq!(e.values[55 + 5], 1.0);
        let s = &micro_samples(1)[0];
        let scores = wren_forward(s, &p, &cfg).unwrap();
        assert!(scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_formation() {
        let e: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64; 4]).collect();
        let pairs = form_pairs(&e).unwrap();
        assert_eq!(pairs.len(), 81);
        assert_eq!(pairs[0], vec![0.0; 8]);
        assert_eq!(pairs[2 * 9 + 5][..4], [2.0; 4]);
        assert_eq!(pairs[2 * 9 + 5][4..], [5.0; 4]);
        let mut swapped = e.clone();
        swapped.swap(2, 5);
        let sp = form_pairs(&swapped).unwrap();
        assert_eq!(sp[5 * 9 + 2], pairs[2 * 9 + 5]);
        assert!(form_pairs(&e[..8]).is_err());
    }

    #[test]
    fn per_base_widths_and_zero_g() {
        let cfg = ModelConfig::paper(3);
        let mut p = ParamSet::<f64>::new();
        for (name, shape) in cfg.param_shapes() {
            if name.starts_with("rel1") {
                p.push(name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let e: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.01; 256]).collect();
        let out = relation_layer(&e, 1, &p, &cfg, Reduction::PerBase).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out
            .iter()
            .all(|r| r.len() == 256 && r.iter().all(|&v| v == 0.0)));
        assert!(relation_layer(
            &e[..9].iter().map(|v| v[..100].to_vec()).collect::<Vec<_>>(),
            1,
            &p,
            &cfg,
            Reduction::PerBase
        )
        .is_err());
    }

    #[test]
    fn per_base_outputs_follow_object_permutation() {
        let cfg = ModelConfig::micro(2);
        let p = init_params(&cfg, 4).unwrap().cast::<f64>();
        let e: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                (0..64)
                    .map(|k| ((i * 64 + k) as f64 * 0.173).sin())
                    .collect()
            })
            .collect();
        let perm = [0, 3, 1, 8, 2, 7, 5, 6, 4];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| e[i].clone()).collect();
        let a = relation_layer(&e, 0, &p, &cfg, Reduction::PerBase).unwrap();
        let b = relation_layer(&permuted, 0, &p, &cfg, Reduction::PerBase).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in b[new].iter().zip(&a[old]) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn batched_graph_matches_reference() {
        for layers in 1..=3 {
            for aggregation in [Aggregation::Sum, Aggregation::Mean] {
                let mut cfg = ModelConfig::micro(layers);
                cfg.aggregation = aggregation;
                let p = init_params(&cfg, 5).unwrap().cast::<f64>();
                let samples = micro_samples(3);
                let refs: Vec<&SampleRecord> = samples.iter().collect();
                let enc = InputEncoder::new(&cfg).unwrap();
                let mut g = Graph::new(&p);
                let out = forward_batch(&mut g, &cfg, &enc, &refs, None).unwrap();
                let fast = g.value(out.scores).data().to_vec();
                for (b, s) in samples.iter().enumerate() {
                    let slow = wren_forward_reference(s, &p, &cfg).unwrap();
                    for k in 0..8 {
                        assert_relative_eq!(
                            fast[b * 8 + k],
                            slow.data()[k],
                            epsilon = 1e-9,
                            max_relative = 1e-9
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identical_candidates_score_equally() {
        let cfg = ModelConfig::micro(2);
        let p = init_params(&cfg, 6).unwrap();
        let mut s = micro_samples(1).remove(0);
        let n = s.panel_len();
        let first = s.candidate(0).to_vec();
        for k in 1..8 {
            s.panels[(8 + k) * n..(9 + k) * n].copy_from_slice(&first);
        }
        let scores = wren_forward(&s, &p, &cfg).unwrap();
        assert_eq!(scores.shape(), &[8]);
        for &v in scores.data() {
            assert!((v - scores.data()[0]).abs() <= 1e-6);
        }
    }

    #[test]
    fn prediction_tie_rule() {
        let t = |v: &[f64]| Tensor::<f64>::from_f64(&[v.len()], v).unwrap();
        assert_eq!(predict(&t(&[0., 0., 0., 0., 0., 0., 0., 1.])).unwrap(), 7);
        assert_eq!(predict(&t(&[0.; 8])).unwrap(), 0);
        assert_eq!(predict(&t(&[3., 5., 5., 1., 0., 0., 0., 0.])).unwrap(), 1);
        assert!(predict(&t(&[0., f64::NAN])).is_err());
    }

    #[test]
    fn dropout_only_when_seeded() {
        let cfg = ModelConfig::micro(1);
        let p = init_params(&cfg, 7).unwrap();
        let samples = micro_samples(2);
        let refs: Vec<&SampleRecord> = samples.iter().collect();
        let enc = InputEncoder::new(&cfg).unwrap();
        let run = |seed| {
            let mut g = Graph::new(&p);
            let out = forward_batch(&mut g, &cfg, &enc, &refs, seed).unwrap();
            g.value(out.scores).data().to_vec()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(3)), run(Some(3)));
        assert_ne!(run(None), run(Some(3)));
    }
}
