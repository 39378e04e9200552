//! Per-node occupancy distribution model.
//!
//! Feature extraction: two ReLU layers over the sparse context row. With a
//! sibling window, an attention-pooled summary of the context tokens is added
//! into the first layer. Aggregation: one ReLU layer over the extracted
//! features (concatenated with the child-count vector in the enhanced
//! variant) and a 255-way output layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::context::{feature_rows, token_rows, ContextConfig, ContextFeatures, SYMBOL_COUNT};
use crate::nn::{glorot, Graph, ParamId, ParamSet, Tensor, Var, PROB_FLOOR};
use crate::octree::OccupancySymbol;
use crate::{Error, Result};

/// Tolerance on the sum of a child-count vector.
pub const NUMBER_VECTOR_TOL: f64 = 1e-6;

/// A strictly positive distribution over symbols `1..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist255 {
    p: [f64; 255],
}

impl ProbDist255 {
    /// Accepts non-negative finite values summing to 1 within `1e-9`;
    /// zeros are floored at [`PROB_FLOOR`] and the result renormalized.
    pub fn new(p: [f64; 255]) -> Result<Self> {
        if let Some(j) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite(format!("probability of symbol {} is {}", j + 1, p[j])));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!("probabilities sum to {sum}")));
        }
        Ok(Self::floored(p))
    }

    /// Softmax of 255 logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != SYMBOL_COUNT {
            return Err(Error::Shape(format!("{} logits, expected 255", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; 255];
        let mut sum = 0.0;
        for (o, &l) in p.iter_mut().zip(logits) {
            *o = libm::exp(l - max);
            sum += *o;
        }
        p.iter_mut().for_each(|v| *v /= sum);
        Ok(Self::floored(p))
    }

    pub fn uniform() -> Self {
        Self { p: [1.0 / 255.0; 255] }
    }

    fn floored(mut p: [f64; 255]) -> Self {
        if p.iter().any(|&v| v < PROB_FLOOR) {
            p.iter_mut().for_each(|v| *v = v.max(PROB_FLOOR));
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
        }
        Self { p }
    }

    /// Probability of symbol `j` in `1..=255`.
    pub fn get(&self, j: usize) -> f64 {
        self.p[j - 1]
    }

    pub fn prob(&self, s: OccupancySymbol) -> f64 {
        self.p[s.get() as usize - 1]
    }

    pub fn probs(&self) -> &[f64; 255] {
        &self.p
    }

    /// Expected number of occupied children.
    pub fn expected_child_count(&self) -> f64 {
        self.p.iter().enumerate().map(|(j, p)| p * (j + 1).count_ones() as f64).sum()
    }
}

/// Mean code length in bits of `symbols` under `dists`.
pub fn model_loss(dists: &[ProbDist255], symbols: &[OccupancySymbol]) -> Result<f64> {
    if dists.len() != symbols.len() || dists.is_empty() {
        return Err(Error::Shape(format!("{} distributions for {} symbols", dists.len(), symbols.len())));
    }
    let bits: f64 = dists.iter().zip(symbols).map(|(d, &s)| -libm::log2(d.prob(s))).sum();
    Ok(bits / symbols.len() as f64)
}

/// Validates a child-count vector: 8 finite non-negative entries summing to 1.
pub fn check_number_vector(v: &[f64]) -> Result<()> {
    if v.len() != 8 {
        return Err(Error::Shape(format!("child-count vector has {} entries, expected 8", v.len())));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFinite(format!("child-count vector {v:?}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NUMBER_VECTOR_TOL {
        return Err(Error::Shape(format!("child-count vector sums to {sum}")));
    }
    Ok(())
}

/// Single-head attention over context tokens, mean-pooled per node.
#[derive(Debug, Clone)]
pub(crate) struct TokenEncoder {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
}

impl TokenEncoder {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, width: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut proj = |name: &str| -> Result<(ParamId, ParamId)> {
            let w = ps.add(&format!("{prefix}.w{name}"), glorot(rng, width, dim))?;
            let b = ps.add(&format!("{prefix}.b{name}"), Tensor::zeros(&[dim]))?;
            Ok((w, b))
        };
        Ok(Self { q: proj("q")?, k: proj("k")?, v: proj("v")? })
    }

    pub fn bind(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let pair = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((ps.expect(&format!("{prefix}.w{name}"))?, ps.expect(&format!("{prefix}.b{name}"))?))
        };
        Ok(Self { q: pair("q")?, k: pair("k")?, v: pair("v")? })
    }

    pub fn query_weight(&self) -> ParamId {
        self.q.0
    }

    /// `[nodes, dim]` pooled attention output.
    pub fn forward(&self, g: &mut Graph<'_>, ctxs: &[ContextFeatures], cfg: ContextConfig) -> Result<Var> {
        let (tokens, valid) = token_rows(ctxs, cfg)?;
        let mut proj = |(w, b): (ParamId, ParamId), t| -> Result<Var> {
            let (w, b) = (g.param(w), g.param(b));
            g.sparse_linear(t, w, Some(b))
        };
        let q = proj(self.q, tokens.clone())?;
        let k = proj(self.k, tokens.clone())?;
        let v = proj(self.v, tokens)?;
        let seq = cfg.token_count();
        let a = g.attention(q, k, v, seq, &valid)?;
        g.mean_pool(a, seq, &valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextModelConfig {
    pub context: ContextConfig,
    /// Condition the aggregation stage on the child-count vector.
    pub enhanced: bool,
    pub extraction_hidden: usize,
    pub aggregation_hidden: usize,
    pub attention_dim: usize,
}

impl ContextModelConfig {
    pub fn new(context: ContextConfig, enhanced: bool) -> Self {
        Self { context, enhanced, extraction_hidden: 128, aggregation_hidden: 128, attention_dim: 64 }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

impl Layer {
    fn init<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let w = ps.add(&format!("{name}.w"), glorot(rng, fan_in, fan_out))?;
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b })
    }

    fn bind(ps: &ParamSet, name: &str) -> Result<Self> {
        Ok(Self { w: ps.expect(&format!("{name}.w"))?, b: ps.expect(&format!("{name}.b"))? })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct ContextModel {
    config: ContextModelConfig,
    params: ParamSet,
    input: Layer,
    window: Option<(TokenEncoder, ParamId)>,
    hidden: Layer,
    aggregate: Layer,
    output: Layer,
    /// Fixed affine map applied to child-count vectors before concatenation.
    number_norm: NumberNorm,
}

/// Per-component `(v - mean) / std`, fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumberNorm {
    pub mean: [f64; 8],
    pub std: [f64; 8],
}

impl Default for NumberNorm {
    fn default() -> Self {
        Self { mean: [0.0; 8], std: [1.0; 8] }
    }
}

impl NumberNorm {
    /// Mean and standard deviation of each component, the latter floored at
    /// `1e-6` so constant components stay finite.
    pub fn fit(numbers: &[[f64; 8]]) -> Self {
        if numbers.is_empty() {
            return Self::default();
        }
        let n = numbers.len() as f64;
        let mut mean = [0.0; 8];
        let mut var = [0.0; 8];
        for v in numbers {
            (0..8).for_each(|k| mean[k] += v[k] / n);
        }
        for v in numbers {
            (0..8).for_each(|k| var[k] += (v[k] - mean[k]) * (v[k] - mean[k]) / n);
        }
        Self { mean, std: var.map(|x| libm::sqrt(x).max(1e-6)) }
    }

    fn apply(&self, v: &[f64; 8]) -> [f64; 8] {
        core::array::from_fn(|k| (v[k] - self.mean[k]) / self.std[k])
    }
}

impl ContextModel {
    pub fn new<R: Rng + ?Sized>(config: ContextModelConfig, rng: &mut R) -> Result<Self> {
        let ctx = config.context;
        let (eh, ah) = (config.extraction_hidden, config.aggregation_hidden);
        let mut ps = ParamSet::new();
        let input = Layer::init(&mut ps, "extract.l1", ctx.feature_width(), eh, rng)?;
        let window = if ctx.has_window() {
            let enc = TokenEncoder::init(&mut ps, "extract.att", ctx.token_width(), config.attention_dim, rng)?;
            let wp = ps.add("extract.l1.wa", glorot(rng, config.attention_dim, eh))?;
            Some((enc, wp))
        } else {
            None
        };
        let hidden = Layer::init(&mut ps, "extract.l2", eh, eh, rng)?;
        let aggregate = if config.enhanced {
            // number rows start at zero so the enhanced model begins as its baseline twin
            let shared = glorot(rng, eh, ah);
            let mut data = shared.data().to_vec();
            data.resize((eh + 8) * ah, 0.0);
            let w = ps.add("aggregate.l1.w", Tensor::new(vec![eh + 8, ah], data)?)?;
            let b = ps.add("aggregate.l1.b", Tensor::zeros(&[ah]))?;
            Layer { w, b }
        } else {
            Layer::init(&mut ps, "aggregate.l1", eh, ah, rng)?
        };
        let output = Layer::init(&mut ps, "aggregate.out", ah, SYMBOL_COUNT, rng)?;
        Ok(Self { config, params: ps, input, window, hidden, aggregate, output, number_norm: NumberNorm::default() })
    }

    pub fn config(&self) -> &ContextModelConfig {
        &self.config
    }

    pub fn context(&self) -> ContextConfig {
        self.config.context
    }

    pub fn is_enhanced(&self) -> bool {
        self.config.enhanced
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn number_norm(&self) -> &NumberNorm {
        &self.number_norm
    }

    pub fn set_number_norm(&mut self, norm: NumberNorm) -> Result<()> {
        if norm.mean.iter().chain(&norm.std).any(|v| !v.is_finite()) || norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::NonFinite(format!("child-count normalization {norm:?}")));
        }
        self.number_norm = norm;
        Ok(())
    }

    /// Zeroes the output layer, making every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        for id in [self.output.w, self.output.b] {
            self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `[nodes, 255]` logits on `g`, which must borrow this model's parameters.
    pub fn logits(&self, g: &mut Graph<'_>, ctxs: &[ContextFeatures], numbers: Option<&[[f64; 8]]>) -> Result<Var> {
        let cfg = self.config.context;
        if ctxs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        match (self.config.enhanced, numbers) {
            (true, Some(n)) if n.len() == ctxs.len() => n.iter().try_for_each(|v| check_number_vector(v))?,
            (true, Some(n)) => {
                return Err(Error::Shape(format!("{} child-count vectors for {} nodes", n.len(), ctxs.len())))
            }
            (true, None) => return Err(Error::Shape("enhanced model needs child-count vectors".into())),
            (false, Some(_)) => return Err(Error::Shape("baseline model takes no child-count vectors".into())),
            (false, None) => {}
        }
        crate::context::check_layout(ctxs, cfg)?;
        let (w, b) = (g.param(self.input.w), g.param(self.input.b));
        let mut h = g.sparse_linear(feature_rows(ctxs, cfg), w, Some(b))?;
        if let Some((enc, wa)) = &self.window {
            let pooled = enc.forward(g, ctxs, cfg)?;
            let wa = g.param(*wa);
            let extra = g.linear(pooled, wa, None)?;
            h = g.add(h, extra)?;
        }
        let h = g.relu(h);
        let h = self.hidden.apply(g, h)?;
        let mut h = g.relu(h);
        if let Some(n) = numbers {
            let data = n.iter().flat_map(|v| self.number_norm.apply(v)).collect();
            let nv = g.input(Tensor::matrix(n.len(), 8, data)?);
            h = g.concat(h, nv)?;
        }
        let h = self.aggregate.apply(g, h)?;
        let h = g.relu(h);
        self.output.apply(g, h)
    }

    /// Summed cross-entropy in bits over a batch.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        ctxs: &[ContextFeatures],
        numbers: Option<&[[f64; 8]]>,
        symbols: &[OccupancySymbol],
    ) -> Result<Var> {
        let logits = self.logits(g, ctxs, numbers)?;
        let labels: Vec<u8> = symbols.iter().map(|s| s.get()).collect();
        g.cross_entropy_255(logits, &labels)
    }

    fn predict(&self, ctxs: &[ContextFeatures], numbers: Option<&[[f64; 8]]>) -> Result<Vec<ProbDist255>> {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, ctxs, numbers)?;
        let t = g.value(logits);
        (0..t.rows()).map(|r| ProbDist255::from_logits(t.row(r))).collect()
    }

    /// Distributions from contexts alone (baseline variant).
    pub fn forward_baseline(&self, ctxs: &[ContextFeatures]) -> Result<Vec<ProbDist255>> {
        self.predict(ctxs, None)
    }

    /// Distributions conditioned on child-count vectors (enhanced variant).
    pub fn forward_acnp(&self, ctxs: &[ContextFeatures], numbers: &[[f64; 8]]) -> Result<Vec<ProbDist255>> {
        self.predict(ctxs, Some(numbers))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut meta = vec![
            (String::from("enhanced"), if c.enhanced { 1.0 } else { 0.0 }),
            (String::from("extraction_hidden"), c.extraction_hidden as f64),
            (String::from("aggregation_hidden"), c.aggregation_hidden as f64),
            (String::from("attention_dim"), c.attention_dim as f64),
        ];
        if c.enhanced {
            for k in 0..8 {
                meta.push((format!("number_mean_{k}"), self.number_norm.mean[k]));
                meta.push((format!("number_std_{k}"), self.number_norm.std[k]));
            }
        }
        Checkpoint::new(ModelKind::ContextModel, c.context, meta, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::ContextModel {
            return Err(Error::Checkpoint(format!("expected a context model, found {:?}", ck.kind)));
        }
        let dim = |key| ck.meta(key).map(|v| v as usize);
        let config = ContextModelConfig {
            context: ck.context,
            enhanced: ck.meta("enhanced")? != 0.0,
            extraction_hidden: dim("extraction_hidden")?,
            aggregation_hidden: dim("aggregation_hidden")?,
            attention_dim: dim("attention_dim")?,
        };
        let mut params = ParamSet::new();
        for (name, t) in &ck.params {
            params.add(name, t.clone())?;
        }
        let input = Layer::bind(&params, "extract.l1")?;
        let window = if config.context.has_window() {
            Some((TokenEncoder::bind(&params, "extract.att")?, params.expect("extract.l1.wa")?))
        } else {
            None
        };
        let mut number_norm = NumberNorm::default();
        if config.enhanced {
            for k in 0..8 {
                number_norm.mean[k] = ck.meta(&format!("number_mean_{k}"))?;
                number_norm.std[k] = ck.meta(&format!("number_std_{k}"))?;
            }
        }
        let mut model = Self {
            number_norm: NumberNorm::default(),
            config,
            input,
            window,
            hidden: Layer::bind(&params, "extract.l2")?,
            aggregate: Layer::bind(&params, "aggregate.l1")?,
            output: Layer::bind(&params, "aggregate.out")?,
            params,
        };
        model.check_shapes()?;
        model.set_number_norm(number_norm)?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (eh, ah) = (c.extraction_hidden, c.aggregation_hidden);
        let shape = |id: ParamId| self.params.get(id).value().shape().to_vec();
        let mut expected = vec![
            (self.input.w, vec![c.context.feature_width(), eh]),
            (self.hidden.w, vec![eh, eh]),
            (self.aggregate.w, vec![eh + if c.enhanced { 8 } else { 0 }, ah]),
            (self.output.w, vec![ah, SYMBOL_COUNT]),
        ];
        if let Some((enc, wa)) = &self.window {
            expected.push((enc.q.0, vec![c.context.token_width(), c.attention_dim]));
            expected.push((*wa, vec![c.attention_dim, eh]));
        }
        for (id, want) in expected {
            if shape(id) != want {
                return Err(Error::Layout(format!(
                    "parameter {} has shape {:?}, expected {want:?}",
                    self.params.get(id).name(),
                    shape(id)
                )));
            }
        }
        Ok(())
    }
}
