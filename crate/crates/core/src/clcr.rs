//! Frozen cross-lingual contextualized representations and the two
//! layer-combination schemes.
//!
//! Extraction runs the LM in its own evaluation graph and copies the
//! per-layer states out as plain tensors, so downstream tagger graphs
//! never bind an LM parameter and no gradient can flow into the LM.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::model::{HiddenStack, MlmaModel};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{init_glorot, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Frozen per-token, per-layer states of one sentence: `n + 1` layers of
/// `N x 2d` rows, sentinels stripped, dropout off.
pub type ClcrStack<T> = HiddenStack<T>;

/// Extract the hidden stack of one sentence with the model frozen.
/// Repeated extraction of the same sentence is bit-identical.
pub fn extract_clcr<T: Scalar>(
    model: &MlmaModel<T>,
    params: &ParamSet<T>,
    ids: &[usize],
    lang: usize,
) -> Result<ClcrStack<T>> {
    let mut g = Graph::eval(params);
    let pass = model.sentence_pass(&mut g, ids, lang)?;
    let fwd = model.real_rows(&mut g, &pass.fwd_layers, pass.n_tokens)?;
    let bwd = model.real_rows(&mut g, &pass.bwd_layers, pass.n_tokens)?;
    let hidden = model.concat_hidden(&mut g, &fwd, &bwd)?;
    Ok(HiddenStack { layers: hidden.into_iter().map(|v| g.value(v).clone()).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerKind {
    /// Per-token softmax weights over layers from an MLP.
    Sws,
    /// Per-dimension column-softmax weights from a learned matrix.
    Fws,
}

impl CombinerKind {
    pub fn parse(s: &str) -> Result<CombinerKind> {
        match s {
            "sws" => Ok(CombinerKind::Sws),
            "fws" => Ok(CombinerKind::Fws),
            other => Err(Error::Config(format!("unknown combiner {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CombinerKind::Sws => "sws",
            CombinerKind::Fws => "fws",
        }
    }
}

/// Self-weighted sum: an MLP (one hidden layer of width `2d`, tanh) maps
/// the concatenated layer stack of each token to `n + 1` logits; their
/// softmax weights the layers per token.
#[derive(Debug, Clone)]
pub struct SwsCombiner {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    n_layers: usize,
    width: usize,
}

impl SwsCombiner {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        n_layers: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> SwsCombiner {
        let input = n_layers * width;
        SwsCombiner {
            w1: params.add("combiner.sws.w1", init_glorot(input, width, rng)),
            b1: params.add("combiner.sws.b1", Tensor::zeros(&[1, width])),
            w2: params.add("combiner.sws.w2", init_glorot(width, n_layers, rng)),
            b2: params.add("combiner.sws.b2", Tensor::zeros(&[1, n_layers])),
            n_layers,
            width,
        }
    }

    /// Per-token layer weights, `N x (n+1)`, each row summing to one.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>, layers: &[Value]) -> Result<Value> {
        self.check(g, layers)?;
        let x = g.concat_cols(layers)?;
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h0 = g.matmul(x, w1)?;
        let h1 = g.add_row_broadcast(h0, b1)?;
        let h = g.tanh(h1);
        let l0 = g.matmul(h, w2)?;
        let logits = g.add_row_broadcast(l0, b2)?;
        Ok(g.softmax_rows(logits))
    }

    pub fn combine<T: Scalar>(&self, g: &mut Graph<'_, T>, layers: &[Value]) -> Result<Value> {
        let weights = self.weights(g, layers)?;
        let n = g.value(layers[0]).rows();
        let mut out: Option<Value> = None;
        for (l, &layer) in layers.iter().enumerate() {
            let col = g.slice(weights, 0, n, l, 1)?;
            let scaled = g.mul_col_broadcast(layer, col)?;
            out = Some(match out {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
        }
        Ok(out.expect("at least one layer"))
    }

    fn check<T: Scalar>(&self, g: &Graph<'_, T>, layers: &[Value]) -> Result<()> {
        if layers.len() != self.n_layers {
            return Err(Error::Contract(format!(
                "combiner built for {} layers, stack has {}",
                self.n_layers,
                layers.len()
            )));
        }
        for &l in layers {
            if g.value(l).cols() != self.width {
                return Err(Error::Contract(format!(
                    "combiner width {} does not match stack width {}",
                    self.width,
                    g.value(l).cols()
                )));
            }
        }
        Ok(())
    }
}

/// Fully-weighted sum: a `(n+1) x 2d` matrix, softmaxed per column, mixes
/// the layers independently for every hidden dimension.
#[derive(Debug, Clone)]
pub struct FwsCombiner {
    pub f: ParamId,
    n_layers: usize,
    width: usize,
}

impl FwsCombiner {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        n_layers: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> FwsCombiner {
        FwsCombiner {
            f: params.add("combiner.fws.f", init_glorot(n_layers, width, rng)),
            n_layers,
            width,
        }
    }

    /// Column-softmaxed mixing matrix, `(n+1) x 2d`, columns summing to one.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Value {
        let f = g.param(self.f);
        g.softmax_cols(f)
    }

    pub fn combine<T: Scalar>(&self, g: &mut Graph<'_, T>, layers: &[Value]) -> Result<Value> {
        if layers.len() != self.n_layers {
            return Err(Error::Contract(format!(
                "combiner built for {} layers, stack has {}",
                self.n_layers,
                layers.len()
            )));
        }
        for &l in layers {
            if g.value(l).cols() != self.width {
                return Err(Error::Contract(format!(
                    "combiner width {} does not match stack width {}",
                    self.width,
                    g.value(l).cols()
                )));
            }
        }
        let w = self.weights(g);
        let mut out: Option<Value> = None;
        for (l, &layer) in layers.iter().enumerate() {
            let row = g.slice(w, l, 1, 0, self.width)?;
            let scaled = g.mul_row_broadcast(layer, row)?;
            out = Some(match out {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
        }
        Ok(out.expect("at least one layer"))
    }
}

#[derive(Debug, Clone)]
pub enum Combiner {
    Sws(SwsCombiner),
    Fws(FwsCombiner),
}

impl Combiner {
    pub fn new<T: Scalar>(
        kind: CombinerKind,
        params: &mut ParamSet<T>,
        n_layers: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Combiner {
        match kind {
            CombinerKind::Sws => Combiner::Sws(SwsCombiner::new(params, n_layers, width, rng)),
            CombinerKind::Fws => Combiner::Fws(FwsCombiner::new(params, n_layers, width, rng)),
        }
    }

    pub fn kind(&self) -> CombinerKind {
        match self {
            Combiner::Sws(_) => CombinerKind::Sws,
            Combiner::Fws(_) => CombinerKind::Fws,
        }
    }

    pub fn combine<T: Scalar>(&self, g: &mut Graph<'_, T>, layers: &[Value]) -> Result<Value> {
        match self {
            Combiner::Sws(c) => c.combine(g, layers),
            Combiner::Fws(c) => c.combine(g, layers),
        }
    }
}

/// Uniform layer average, used when no trained combiner is available
/// (e.g. the nearest-neighbor probe over a bare LM checkpoint).
pub fn uniform_combine<T: Scalar>(stack: &ClcrStack<T>) -> Tensor<T> {
    let n = stack.n_tokens();
    let w = stack.width();
    let inv = T::from_f64(1.0 / stack.n_layers() as f64);
    Tensor::from_fn(n, w, |r, c| {
        stack.layers.iter().map(|l| l.at(r, c)).sum::<T>() * inv
    })
}

/// Load a stack into a graph as constants, one value per layer.
pub fn stack_constants<'g, T: Scalar>(g: &mut Graph<'g, T>, stack: &ClcrStack<T>) -> Vec<Value> {
    stack.layers.iter().map(|l| g.constant(l.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlmaConfig, MlmaModel};
    use crate::tensor::rng_stream;
    use rand::Rng;

    fn tiny() -> (MlmaModel<f64>, ParamSet<f64>) {
        let cfg = MlmaConfig { dropout: 0.0, ..MlmaConfig::micro() };
        MlmaModel::new(cfg, &[("aa".into(), 9)], 2).unwrap()
    }

    #[test]
    fn extraction_is_deterministic_and_strips_sentinels() {
        let (m, ps) = tiny();
        let ids = vec![3, 4, 5, 6];
        let a = extract_clcr(&m, &ps, &ids, 0).unwrap();
        let b = extract_clcr(&m, &ps, &ids, 0).unwrap();
        assert_eq!(a, b, "bit-identical across extractions");
        assert_eq!(a.n_tokens(), 4);
        assert_eq!(a.n_layers(), m.config().n_layers + 1);
        assert_eq!(a.width(), m.clcr_width());
    }

    fn random_stack(n: usize, layers: usize, width: usize, seed: u64) -> ClcrStack<f64> {
        let mut rng = rng_stream(seed, 77);
        ClcrStack {
            layers: (0..layers)
                .map(|_| Tensor::from_fn(n, width, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn sws_zero_logits_give_arithmetic_mean() {
        let stack = random_stack(5, 3, 6, 1);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(1, 1);
        let c = SwsCombiner::new(&mut ps, 3, 6, &mut rng);
        // force zero logits: zero the output layer
        ps.value_mut(c.w2).fill(0.0);
        ps.value_mut(c.b2).fill(0.0);
        let mut g = Graph::eval(&ps);
        let layers = stack_constants(&mut g, &stack);
        let out = c.combine(&mut g, &layers).unwrap();
        for k in 0..5 {
            for d in 0..6 {
                let mean: f64 =
                    (0..3).map(|l| stack.layers[l].at(k, d)).sum::<f64>() / 3.0;
                assert!((g.value(out).at(k, d) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sws_saturated_logit_selects_single_layer() {
        let stack = random_stack(4, 3, 6, 2);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(2, 1);
        let c = SwsCombiner::new(&mut ps, 3, 6, &mut rng);
        ps.value_mut(c.w2).fill(0.0);
        ps.value_mut(c.b2).fill(0.0);
        // +1000 bias on layer 1's logit saturates its softmax weight
        ps.value_mut(c.b2).data_mut()[1] = 1000.0;
        let mut g = Graph::eval(&ps);
        let layers = stack_constants(&mut g, &stack);
        let out = c.combine(&mut g, &layers).unwrap();
        for k in 0..4 {
            for d in 0..6 {
                assert!((g.value(out).at(k, d) - stack.layers[1].at(k, d)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sws_matches_loop_oracle_and_weights_sum_to_one() {
        let stack = random_stack(7, 4, 8, 3);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(3, 1);
        let c = SwsCombiner::new(&mut ps, 4, 8, &mut rng);
        let mut g = Graph::eval(&ps);
        let layers = stack_constants(&mut g, &stack);
        let weights = c.weights(&mut g, &layers).unwrap();
        let out = c.combine(&mut g, &layers).unwrap();
        let wv = g.value(weights).clone();
        for k in 0..7 {
            let sum: f64 = wv.row(k).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for d in 0..8 {
                let oracle: f64 =
                    (0..4).map(|l| wv.at(k, l) * stack.layers[l].at(k, d)).sum();
                assert!((g.value(out).at(k, d) - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sws_is_permutation_covariant_over_tokens() {
        let stack = random_stack(6, 3, 4, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = ClcrStack {
            layers: stack
                .layers
                .iter()
                .map(|l| Tensor::from_fn(6, 4, |r, c| l.at(perm[r], c)))
                .collect(),
        };
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(4, 1);
        let c = SwsCombiner::new(&mut ps, 3, 4, &mut rng);
        let mut g = Graph::eval(&ps);
        let a = stack_constants(&mut g, &stack);
        let b = stack_constants(&mut g, &permuted);
        let out_a = c.combine(&mut g, &a).unwrap();
        let out_b = c.combine(&mut g, &b).unwrap();
        for r in 0..6 {
            assert_eq!(g.value(out_b).row(r), g.value(out_a).row(perm[r]));
        }
    }

    #[test]
    fn fws_zero_matrix_gives_uniform_average_and_bounds_hold() {
        let stack = random_stack(5, 3, 6, 5);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(5, 1);
        let c = FwsCombiner::new(&mut ps, 3, 6, &mut rng);
        ps.value_mut(c.f).fill(0.0);
        let mut g = Graph::eval(&ps);
        let layers = stack_constants(&mut g, &stack);
        let out = c.combine(&mut g, &layers).unwrap();
        for k in 0..5 {
            for d in 0..6 {
                let mean: f64 = (0..3).map(|l| stack.layers[l].at(k, d)).sum::<f64>() / 3.0;
                assert!((g.value(out).at(k, d) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fws_matches_per_dimension_loop_oracle() {
        let stack = random_stack(6, 4, 5, 6);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(6, 1);
        let c = FwsCombiner::new(&mut ps, 4, 5, &mut rng);
        let mut g = Graph::eval(&ps);
        let w = c.weights(&mut g);
        let wv = g.value(w).clone();
        // column softmax: every column sums to one
        for d in 0..5 {
            let s: f64 = (0..4).map(|l| wv.at(l, d)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let layers = stack_constants(&mut g, &stack);
        let out = c.combine(&mut g, &layers).unwrap();
        for k in 0..6 {
            for d in 0..5 {
                let oracle: f64 = (0..4).map(|l| wv.at(l, d) * stack.layers[l].at(k, d)).sum();
                assert!((g.value(out).at(k, d) - oracle).abs() < 1e-9);
                // convex combination stays inside the layer value range
                let lo = (0..4).map(|l| stack.layers[l].at(k, d)).fold(f64::INFINITY, f64::min);
                let hi = (0..4).map(|l| stack.layers[l].at(k, d)).fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(out).at(k, d);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn layer_count_mismatch_is_contract_error() {
        let stack = random_stack(3, 2, 4, 7);
        let mut ps = ParamSet::<f64>::new();
        let mut rng = rng_stream(7, 1);
        let c = SwsCombiner::new(&mut ps, 3, 4, &mut rng);
        let f = FwsCombiner::new(&mut ps, 3, 4, &mut rng);
        let mut g = Graph::eval(&ps);
        let layers = stack_constants(&mut g, &stack);
        assert!(matches!(c.combine(&mut g, &layers), Err(Error::Contract(_))));
        assert!(matches!(f.combine(&mut g, &layers), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_combine_is_layer_mean() {
        let stack = random_stack(4, 3, 5, 8);
        let out = uniform_combine(&stack);
        for k in 0..4 {
            for d in 0..5 {
                let mean: f64 = (0..3).map(|l| stack.layers[l].at(k, d)).sum::<f64>() / 3.0;
                assert!((out.at(k, d) - mean).abs() < 1e-12);
            }
        }
    }
}
