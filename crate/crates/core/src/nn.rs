//! Parameter storage, MLP construction and the Gaussian weight prior.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    value: Rc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable access; copies only if a tape still holds the tensor.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Rc::make_mut(&mut self.value)
    }
}

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// All trainable tensors of a model as one flat, ordered list.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value: Rc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.params.iter().map(|p| tape.param(Rc::clone(&p.value))).collect(),
        }
    }

    /// Registers every parameter as a constant (evaluation without gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self
                .params
                .iter()
                .map(|p| tape.constant_rc(Rc::clone(&p.value)))
                .collect(),
        }
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrites all values from a flat slice in store order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim("assign_flat", &[self.numel()], &[flat.len()]));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value_mut().data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] as leaves on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps leaves created elsewhere, in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss did not touch get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadActivation {
    Linear,
    /// Produces log-probabilities (a row-wise log-softmax).
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub size: usize,
    pub activation: HeadActivation,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, size: usize, activation: HeadActivation) -> Self {
        Self {
            name: name.into(),
            size,
            activation,
        }
    }
}

/// Layer sizes run from the input width to the output width; the output
/// layer is split column-wise into the named heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub heads: Vec<HeadSpec>,
}

pub const MIN_WEIGHT_LAYERS: usize = 2;
pub const MAX_WEIGHT_LAYERS: usize = 4;

impl MlpSpec {
    /// `input -> hidden... -> heads`.
    pub fn new(input: usize, hidden: &[usize], heads: Vec<HeadSpec>) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(heads.iter().map(|h| h.size).sum());
        Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            heads,
        }
    }

    pub fn weight_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weight_layers();
        if !(MIN_WEIGHT_LAYERS..=MAX_WEIGHT_LAYERS).contains(&n) {
            return Err(Error::Config(format!(
                "an MLP needs {MIN_WEIGHT_LAYERS}..={MAX_WEIGHT_LAYERS} weight layers, got {n}"
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", self.layer_sizes)));
        }
        if self.heads.is_empty() || self.heads.iter().any(|h| h.size == 0) {
            return Err(Error::Config("every MLP head needs size >= 1".into()));
        }
        let total: usize = self.heads.iter().map(|h| h.size).sum();
        if total != *self.layer_sizes.last().unwrap() {
            return Err(Error::Config(format!(
                "head sizes sum to {total} but the output layer has {}",
                self.layer_sizes.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// Glorot-normal initialised weights.
pub fn glorot_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

#[derive(Clone, Copy, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A multilayer perceptron whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Builds an MLP, registering its parameters under `prefix`.
pub fn build_mlp<R: Rng + ?Sized>(spec: MlpSpec, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Mlp> {
    spec.validate()?;
    let layers = spec
        .layer_sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            weight: store.add(
                format!("{prefix}.{i}.weight"),
                ParamKind::Weight,
                glorot_normal(w[0], w[1], rng),
            ),
            bias: store.add(format!("{prefix}.{i}.bias"), ParamKind::Bias, Tensor::zeros(&[w[1]])),
        })
        .collect();
    Ok(Mlp { spec, layers })
}

/// Named outputs of an MLP forward pass.
pub struct Heads<'t> {
    outputs: Vec<(String, Var<'t>)>,
}

impl<'t> Heads<'t> {
    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Looks up a head that the network is known to have.
    pub fn expect(&self, name: &str) -> Var<'t> {
        self.get(name)
            .unwrap_or_else(|| panic!("MLP has no head named {name:?}"))
    }
}

impl Mlp {
    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Heads<'t>> {
        let first = self.layers[0];
        let h = x.affine(params.var(first.weight), params.var(first.bias))?;
        self.finish(params, h)
    }

    /// Forward pass on the column-wise concatenation `[shared | extra]` where
    /// each row of `shared` is reused for `repeats` consecutive rows of
    /// `extra`. Equivalent to `forward(concat(repeat_rows(shared), extra))`,
    /// but the shared block is multiplied through the first layer only once.
    pub fn forward_split<'t>(
        &self,
        params: &Bound<'t>,
        shared: Var<'t>,
        extra: Var<'t>,
        repeats: usize,
    ) -> Result<Heads<'t>> {
        let first = self.layers[0];
        let w = params.var(first.weight);
        let shared_cols = shared.shape()[1];
        let in_dim = self.spec.layer_sizes[0];
        let extra_shape = extra.shape();
        if shared_cols + extra_shape[1] != in_dim || shared.shape()[0] * repeats != extra_shape[0] {
            return Err(Error::dim("forward_split", &shared.shape(), &extra_shape));
        }
        let hx = shared.matmul(w.slice_rows(0, shared_cols)?)?;
        let hx = if repeats == 1 { hx } else { hx.repeat_rows(repeats) };
        let he = extra.matmul(w.slice_rows(shared_cols, in_dim)?)?;
        let h = hx.add(he)?.add_row(params.var(first.bias))?;
        self.finish(params, h)
    }

    fn finish<'t>(&self, params: &Bound<'t>, mut h: Var<'t>) -> Result<Heads<'t>> {
        for layer in &self.layers[1..] {
            h = h.relu().affine(params.var(layer.weight), params.var(layer.bias))?;
        }
        let mut outputs = Vec::with_capacity(self.spec.heads.len());
        let mut start = 0;
        let single = self.spec.heads.len() == 1;
        for head in &self.spec.heads {
            let raw = if single {
                h
            } else {
                h.slice_cols(start, start + head.size)?
            };
            start += head.size;
            let out = match head.activation {
                HeadActivation::Linear => raw,
                HeadActivation::Softmax => raw.log_softmax()?,
                HeadActivation::Sigmoid => raw.sigmoid(),
            };
            outputs.push((head.name.clone(), out));
        }
        Ok(Heads { outputs })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// `(precision / 2) * sum of squared weights`, biases excluded.
pub fn l2_weight_penalty<'t>(
    store: &ParamStore,
    params: &Bound<'t>,
    tape: &'t Tape,
    precision: f64,
) -> Result<Var<'t>> {
    if !(precision >= 0.0) || !precision.is_finite() {
        return Err(Error::Config(format!("weight precision must be >= 0, got {precision}")));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    if precision == 0.0 {
        return Ok(total);
    }
    for (i, p) in store.iter().enumerate() {
        if p.kind == ParamKind::Weight {
            total = total.add(params.var(ParamId(i)).square().sum())?;
        }
    }
    Ok(total.scale(0.5 * precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classifier_spec(sizes: &[usize]) -> MlpSpec {
        let (input, rest) = sizes.split_first().unwrap();
        let (out, hidden) = rest.split_last().unwrap();
        MlpSpec::new(
            *input,
            hidden,
            vec![HeadSpec::new("logits", *out, HeadActivation::Linear)],
        )
    }

    #[test]
    fn paper_sized_classifier_has_expected_weight_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = build_mlp(classifier_spec(&[784, 500, 500, 15]), "enc", &mut store, &mut rng).unwrap();
        let shapes: Vec<_> = mlp
            .layers
            .iter()
            .map(|l| store.get(l.weight).value().shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![784, 500], vec![500, 500], vec![500, 15]]);
        for l in &mlp.layers {
            assert!(store.get(l.bias).value().data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_mlp(classifier_spec(&[20, 8, 8, 3]), "m", &mut store, &mut rng).unwrap();
            store.flatten()
        };
        let (a, b) = (build(7), build(7));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, build(8));
    }

    #[test]
    fn glorot_variance_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = glorot_normal(784, 500, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 1284.0;
        assert!((var - target).abs() / target < 0.1, "{var} vs {target}");
    }

    #[test]
    fn layer_count_is_validated() {
        assert!(classifier_spec(&[4, 3]).validate().is_err());
        assert!(classifier_spec(&[4, 3, 3]).validate().is_ok());
        assert!(classifier_spec(&[4, 3, 3, 3, 3]).validate().is_ok());
        assert!(classifier_spec(&[4, 3, 3, 3, 3, 3]).validate().is_err());
        let bad = MlpSpec::new(4, &[3], vec![HeadSpec::new("a", 0, HeadActivation::Linear)]);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn split_forward_matches_concatenated_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(
            5,
            &[6],
            vec![
                HeadSpec::new("mu", 2, HeadActivation::Linear),
                HeadSpec::new("lv", 2, HeadActivation::Linear),
            ],
        );
        let mlp = build_mlp(spec, "z", &mut store, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.4, 0.9], [0.5, 0.2, -0.3]]).unwrap();
        let y = Tensor::one_hot(&[0, 1, 0, 1], 2).unwrap();

        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let split = mlp
            .forward_split(&bound, tape.constant(x.clone()), tape.constant(y.clone()), 2)
            .unwrap();

        let xr = x.repeat_rows(2);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| [xr.row(i), y.row(i)].concat()).collect();
        let concat = Tensor::from_rows(&rows).unwrap();
        let full = mlp.forward(&bound, tape.constant(concat)).unwrap();
        for name in ["mu", "lv"] {
            let (a, b) = (split.expect(name).value(), full.expect(name).value());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn weight_penalty_values_and_gradient() {
        let mut store = ParamStore::new();
        store.add(
            "w",
            ParamKind::Weight,
            Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
        );
        store.add("b", ParamKind::Bias, Tensor::vector(vec![10.0, 10.0]));

        let tape = Tape::new();
        let bound = store.bind(&tape);
        assert_eq!(l2_weight_penalty(&store, &bound, &tape, 0.0).unwrap().item(), 0.0);
        let pen = l2_weight_penalty(&store, &bound, &tape, 1.0).unwrap();
        assert_eq!(pen.item(), 15.0);
        tape.backward(pen).unwrap();
        let g = bound.grads();
        assert_eq!(g[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
        assert!(matches!(
            l2_weight_penalty(&store, &bound, &tape, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(4, &[5, 5], vec![HeadSpec::new("lp", 3, HeadActivation::Softmax)]);
        let mlp = build_mlp(spec, "m", &mut store, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.7, 1.1, 0.2], [-0.5, 0.8, 0.1, -1.3]]).unwrap();
        let params: Vec<Tensor> = store.iter().map(|p| p.value().clone()).collect();
        let report = gradcheck::check(&params, gradcheck::FD_STEP, None, |tape, vars| {
            let bound = Bound::from_vars(tape, vars.to_vec());
            let lp = mlp.forward(&bound, tape.constant(x.clone()))?.expect("lp");
            Ok(lp.pick_cols(&[0, 2])?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
