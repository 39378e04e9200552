//! Child-count prediction.
//!
//! A self-attention layer over the context tokens, mean-pooled, feeds a
//! two-layer MLP that regresses the number of occupied children `n̂`. The
//! estimate is mapped to a discretized Gaussian over `k = 1..=8` centred at
//! `clamp(ceil(n̂), 1, 8)` and softmaxed into the vector consumed by the
//! enhanced context model. The mapping sits outside the gradient path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::context::{ContextConfig, ContextFeatures};
use crate::context_model::TokenEncoder;
use crate::nn::{glorot, Graph, ParamId, ParamSet, Tensor, Var};
use crate::octree::OccupancySymbol;
use crate::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcnpConfig {
    pub context: ContextConfig,
    pub attention_dim: usize,
    pub mlp_hidden: usize,
    pub sigma: f64,
}

impl AcnpConfig {
    pub fn new(context: ContextConfig) -> Self {
        Self { context, attention_dim: 64, mlp_hidden: 128, sigma: 1.0 }
    }
}

/// `n̂` together with its Gaussian map and number vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildCountPrediction {
    pub n_hat: f64,
    pub mu: u8,
    pub o: [f64; 8],
    pub v: [f64; 8],
}

impl ChildCountPrediction {
    pub fn from_n_hat(n_hat: f64, sigma: f64) -> Result<Self> {
        let o = gaussian_map_sigma(n_hat, sigma)?;
        Ok(Self { n_hat, mu: gaussian_center(n_hat), o, v: number_vector(&o) })
    }
}

/// Number of occupied children of a node with this symbol.
pub fn true_child_count(s: OccupancySymbol) -> u32 {
    s.child_count()
}

fn gaussian_center(n_hat: f64) -> u8 {
    libm::ceil(n_hat).clamp(1.0, 8.0) as u8
}

/// Discretized unit-variance Gaussian over `k = 1..=8`.
pub fn gaussian_map(n_hat: f64) -> Result<[f64; 8]> {
    gaussian_map_sigma(n_hat, 1.0)
}

pub fn gaussian_map_sigma(n_hat: f64, sigma: f64) -> Result<[f64; 8]> {
    if !n_hat.is_finite() {
        return Err(Error::NonFinite(format!("child count estimate {n_hat}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::NonFinite(format!("sigma {sigma}")));
    }
    let mu = gaussian_center(n_hat) as f64;
    Ok(core::array::from_fn(|i| {
        let t = (i as f64 + 1.0 - mu) / sigma;
        INV_SQRT_2PI / sigma * libm::exp(-0.5 * t * t)
    }))
}

/// Softmax of a Gaussian map.
pub fn number_vector(o: &[f64; 8]) -> [f64; 8] {
    let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut v = o.map(|x| libm::exp(x - max));
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

#[derive(Debug, Clone)]
pub struct Acnp {
    config: AcnpConfig,
    params: ParamSet,
    encoder: TokenEncoder,
    hidden: (ParamId, ParamId),
    output: (ParamId, ParamId),
}

impl Acnp {
    pub fn new<R: Rng + ?Sized>(config: AcnpConfig, rng: &mut R) -> Result<Self> {
        if !(config.sigma.is_finite() && config.sigma > 0.0) {
            return Err(Error::NonFinite(format!("sigma {}", config.sigma)));
        }
        let (d, h) = (config.attention_dim, config.mlp_hidden);
        let mut ps = ParamSet::new();
        let encoder = TokenEncoder::init(&mut ps, "attention", config.context.token_width(), d, rng)?;
        let hidden = (ps.add("mlp.l1.w", glorot(rng, d, h))?, ps.add("mlp.l1.b", Tensor::zeros(&[h]))?);
        let output = (ps.add("mlp.l2.w", glorot(rng, h, 1))?, ps.add("mlp.l2.b", Tensor::zeros(&[1]))?);
        Ok(Self { config, params: ps, encoder, hidden, output })
    }

    pub fn config(&self) -> &AcnpConfig {
        &self.config
    }

    pub fn context(&self) -> ContextConfig {
        self.config.context
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the final layer, making every estimate 0.
    pub fn zero_output_layer(&mut self) {
        for id in [self.output.0, self.output.1] {
            self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets the final bias, e.g. to the mean training count.
    pub fn set_output_bias(&mut self, b: f64) {
        self.params.value_mut(self.output.1).data_mut()[0] = b;
    }

    /// `[nodes, 1]` estimates on `g`, which must borrow this model's parameters.
    pub fn forward(&self, g: &mut Graph<'_>, ctxs: &[ContextFeatures]) -> Result<Var> {
        if ctxs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let pooled = self.encoder.forward(g, ctxs, self.config.context)?;
        let (w, b) = (g.param(self.hidden.0), g.param(self.hidden.1));
        let h = g.linear(pooled, w, Some(b))?;
        let h = g.relu(h);
        let (w, b) = (g.param(self.output.0), g.param(self.output.1));
        g.linear(h, w, Some(b))
    }

    /// Summed squared error divided by the batch size.
    pub fn loss(&self, g: &mut Graph<'_>, ctxs: &[ContextFeatures], counts: &[f64]) -> Result<Var> {
        let pred = self.forward(g, ctxs)?;
        g.mse(pred, counts)
    }

    pub fn predict_child_count(&self, ctxs: &[ContextFeatures]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, ctxs)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict(&self, ctxs: &[ContextFeatures]) -> Result<Vec<ChildCountPrediction>> {
        self.predict_child_count(ctxs)?
            .into_iter()
            .map(|n| ChildCountPrediction::from_n_hat(n, self.config.sigma))
            .collect()
    }

    /// Number vectors for a batch, ready for the enhanced context model.
    pub fn number_vectors(&self, ctxs: &[ContextFeatures]) -> Result<Vec<[f64; 8]>> {
        Ok(self.predict(ctxs)?.into_iter().map(|p| p.v).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = vec![
            (String::from("attention_dim"), c.attention_dim as f64),
            (String::from("mlp_hidden"), c.mlp_hidden as f64),
            (String::from("sigma"), c.sigma),
        ];
        Checkpoint::new(ModelKind::ChildCount, c.context, meta, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::ChildCount {
            return Err(Error::Checkpoint(format!("expected a child-count model, found {:?}", ck.kind)));
        }
        let config = AcnpConfig {
            context: ck.context,
            attention_dim: ck.meta("attention_dim")? as usize,
            mlp_hidden: ck.meta("mlp_hidden")? as usize,
            sigma: ck.meta("sigma")?,
        };
        let mut params = ParamSet::new();
        for (name, t) in &ck.params {
            params.add(name, t.clone())?;
        }
        let encoder = TokenEncoder::bind(&params, "attention")?;
        let hidden = (params.expect("mlp.l1.w")?, params.expect("mlp.l1.b")?);
        let output = (params.expect("mlp.l2.w")?, params.expect("mlp.l2.b")?);
        let (d, h) = (config.attention_dim, config.mlp_hidden);
        let checks = [
            (encoder.query_weight(), vec![config.context.token_width(), d]),
            (hidden.0, vec![d, h]),
            (output.0, vec![h, 1]),
        ];
        for (id, want) in checks {
            let got = params.get(id).value().shape();
            if got != want.as_slice() {
                return Err(Error::Layout(format!(
                    "parameter {} has shape {got:?}, expected {want:?}",
                    params.get(id).name()
                )));
            }
        }
        Ok(Self { config, params, encoder, hidden, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::QuantizedCloud;
    use crate::context::context_features;
    use crate::nn::AdamConfig;
    use crate::octree::{build_octree, NodeRef, TreeView};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn small(cfg: ContextConfig) -> AcnpConfig {
        AcnpConfig { attention_dim: 6, mlp_hidden: 10, ..AcnpConfig::new(cfg) }
    }

    fn contexts(cfg: ContextConfig, pts: Vec<[u32; 3]>, depth: u8) -> (Vec<ContextFeatures>, Vec<f64>) {
        let tree = build_octree(&QuantizedCloud::from_voxels(depth, pts).unwrap()).unwrap();
        let mut ctxs = Vec::new();
        let mut counts = Vec::new();
        for level in 0..tree.depth() {
            for index in 0..tree.level_len(level) {
                let node = NodeRef { level, index: index as u32 };
                ctxs.push(context_features(&tree, node, cfg).unwrap());
                counts.push(true_child_count(tree.symbol(node).unwrap()) as f64);
            }
        }
        (ctxs, counts)
    }

    #[test]
    fn gaussian_map_examples() {
        let o = gaussian_map(3.0).unwrap();
        assert!(close(o[2], 0.398942, 1e-6));
        assert!(close(o[1], 0.241971, 1e-6));
        assert_eq!(o[1], o[3]);
        assert_eq!(gaussian_map(2.1).unwrap(), o);
        let low = gaussian_map(-0.4).unwrap();
        assert!(close(low[0], 0.398942, 1e-6));
        assert!(low.iter().all(|&v| v <= low[0]));
        assert!(gaussian_map(f64::NAN).is_err());
        assert!(gaussian_map(f64::INFINITY).is_err());
    }

    #[test]
    fn number_vector_examples() {
        let v3 = number_vector(&gaussian_map(3.0).unwrap());
        assert!(close(v3.iter().sum(), 1.0, 1e-12));
        let arg = v3.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(arg + 1, 3);
        let v1 = number_vector(&gaussian_map(1.0).unwrap());
        let v8 = number_vector(&gaussian_map(8.0).unwrap());
        for k in 0..8 {
            assert!(close(v1[k], v8[7 - k], 1e-15));
        }
    }

    /// Independent evaluation: Gaussian values as exp of exact squared
    /// offsets, softmax as 1 / sum exp(O_j - O_k) with compensated summation.
    #[test]
    fn number_vector_matches_oracle() {
        let v = number_vector(&gaussian_map(3.0).unwrap());
        let o: Vec<f64> = (1..=8).map(|k: i32| (-(((k - 3) * (k - 3)) as f64) / 2.0).exp() / (2.0 * core::f64::consts::PI).sqrt()).collect();
        for k in 0..8 {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for j in 0..8 {
                let y = (o[j] - o[k]).exp() - c;
                let t = s + y;
                c = (t - s) - y;
                s = t;
            }
            assert!(close(v[k], 1.0 / s, 1e-12), "k={k}: {} vs {}", v[k], 1.0 / s);
        }
    }

    #[test]
    fn true_child_count_examples() {
        let c = |v| true_child_count(OccupancySymbol::new(v).unwrap());
        assert_eq!(c(2), 1);
        assert_eq!(c(255), 8);
        assert_eq!((1..=255).map(c).sum::<u32>(), 1024);
    }

    #[test]
    fn zero_output_predicts_zero_and_layout_is_checked() {
        let cfg = ContextConfig::ancestors_only(4).unwrap();
        let mut m = Acnp::new(small(cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.zero_output_layer();
        let (ctxs, _) = contexts(cfg, vec![[0, 0, 0], [3, 1, 2], [7, 6, 5]], 3);
        assert!(m.predict_child_count(&ctxs).unwrap().iter().all(|&n| n == 0.0));
        let (other, _) = contexts(ContextConfig::ancestors_only(2).unwrap(), vec![[0, 0, 0]], 2);
        assert!(matches!(m.predict_child_count(&other), Err(Error::Layout(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ContextConfig::new(2, 2).unwrap();
        let m = Acnp::new(small(cfg), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (ctxs, _) = contexts(cfg, vec![[0, 0, 0], [3, 1, 2], [2, 3, 0]], 2);
        let ctx = &ctxs[3..4];
        let grads = {
            let mut g = Graph::new(m.params());
            let out = m.forward(&mut g, ctx).unwrap();
            g.backward(out).unwrap()
        };
        let h = 1e-6;
        for (id, p) in m.params().iter() {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape()));
            let mut num = Vec::new();
            for i in 0..p.value().len() {
                let eval = |delta: f64| {
                    let mut m2 = m.clone();
                    m2.params_mut().value_mut(id).data_mut()[i] += delta;
                    m2.predict_child_count(ctx).unwrap()[0]
                };
                num.push((eval(h) - eval(-h)) / (2.0 * h));
            }
            let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff <= 1e-5 * norm.max(1e-8), "{}: diff {diff}, norm {norm}", p.name());
        }
    }

    #[test]
    fn learns_a_constant_count_of_eight() {
        let cfg = ContextConfig::ancestors_only(2).unwrap();
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    pts.push([x, y, z]);
                }
            }
        }
        let (ctxs, counts) = contexts(cfg, pts, 2);
        assert!(counts.iter().all(|&c| c == 8.0));
        let mut m = Acnp::new(small(cfg), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let adam = AdamConfig { lr: 5e-2, ..AdamConfig::default() };
        for _ in 0..200 {
            let grads = {
                let mut g = Graph::new(m.params());
                let l = m.loss(&mut g, &ctxs, &counts).unwrap();
                g.backward(l).unwrap()
            };
            m.params_mut().zero_grads();
            m.params_mut().accumulate(&grads).unwrap();
            m.params_mut().adam_step(&adam).unwrap();
        }
        for n in m.predict_child_count(&ctxs).unwrap() {
            assert!(close(n, 8.0, 0.5), "{n}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ContextConfig::new(3, 4).unwrap();
        let m = Acnp::new(AcnpConfig { sigma: 0.75, ..small(cfg) }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = Acnp::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert_eq!(back.config().sigma, 0.75);
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(crate::context_model::ContextModel::from_checkpoint(&ck).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gaussian_symmetric_and_peaked(n in -20.0f64..20.0) {
                let o = gaussian_map(n).unwrap();
                let mu = (libm::ceil(n).clamp(1.0, 8.0)) as usize;
                for t in 1..8usize {
                    if mu > t && mu + t <= 8 {
                        prop_assert_eq!(o[mu - 1 - t], o[mu - 1 + t]);
                    }
                }
                prop_assert!(o.iter().all(|&v| v <= o[mu - 1]));
                let v = number_vector(&o);
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(v.iter().all(|&x| x > 0.0));
                let arg = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                prop_assert_eq!(arg + 1, mu);
            }

            #[test]
            fn piecewise_constant(c in 1i32..=8, f in 0.0f64..0.999) {
                let n = c as f64 - f;
                prop_assert_eq!(gaussian_map(n).unwrap(), gaussian_map(c as f64).unwrap());
            }
        }
    }
}
