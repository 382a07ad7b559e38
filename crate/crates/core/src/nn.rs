//! Parameters, forward sessions and the basic layers (conv, transposed
//! conv, batch norm) every block is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::Block;
use crate::autograd::{BnStats, ConvParams, Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for running statistics.
    pub learnable: bool,
}

/// Every tensor the model owns, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, learnable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, learnable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].learnable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrite the tensor for `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> crate::Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.entries[id.0].value.shape() != value.shape() {
            return Err(crate::Error::ShapeMismatch(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.entries[id.0].value.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }
}

/// Collects parameters while a model is constructed.
pub struct Builder {
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// One forward pass: a graph plus the parameters it reads.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    train: bool,
    grads: bool,
    leaves: RefCell<HashMap<ParamId, Var>>,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BnStats)>>,
}

impl<'a> Session<'a> {
    /// Training mode: gradients recorded, batch norm uses batch statistics.
    pub fn train(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            train: true,
            grads: true,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    /// Inference mode: no tape, batch norm uses running statistics.
    pub fn eval(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::inference(),
            store,
            train: false,
            grads: false,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    /// Gradients recorded, batch norm uses running statistics.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            train: false,
            grads: true,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.borrow().get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self.graph.leaf(entry.value.clone(), entry.learnable && self.grads);
        self.leaves.borrow_mut().insert(id, v);
        v
    }

    pub fn input(&self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        (*self.graph.value(v)).clone()
    }

    fn record_bn(&self, mean: ParamId, var: ParamId, stats: BnStats) {
        self.bn_updates.borrow_mut().push((mean, var, stats));
    }

    /// Gradients of `loss` w.r.t. every learnable parameter touched.
    pub fn param_grads(&self, loss: Var) -> Vec<(ParamId, Tensor)> {
        let mut grads: Gradients = self.graph.backward(loss);
        let mut out: Vec<(ParamId, Tensor)> = self
            .leaves
            .borrow()
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// End the pass, keeping the batch statistics it observed so they can
    /// be folded into the store once the borrow is released.
    pub fn into_bn_updates(self) -> BnUpdates {
        BnUpdates(self.bn_updates.into_inner())
    }
}

/// Batch statistics recorded by a training pass.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(ParamId, ParamId, BnStats)>);

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fold into the running estimates with momentum [`BN_MOMENTUM`].
    pub fn apply(self, store: &mut ParamStore) {
        for (mean_id, var_id, stats) in self.0 {
            for (r, m) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    /// Expand a scalar kernel/stride into the three spatial axes.
    pub fn cube(self, k: usize) -> [usize; 3] {
        match self {
            Dims::Two => [1, k, k],
            Dims::Three => [k, k, k],
        }
    }

    pub fn stride(self, s: usize) -> [usize; 3] {
        self.cube(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dims: Dims,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride `stride`, "same"-style padding of `k / 2`.
    pub fn new(dims: Dims, in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        let kernel = dims.cube(k);
        ConvSpec {
            dims,
            in_channels,
            out_channels,
            kernel,
            stride: dims.stride(stride),
            padding: kernel.map(|k| k / 2),
            groups: 1,
            bias: false,
        }
    }

    pub fn kernel(mut self, kernel: [usize; 3]) -> Self {
        assert!(self.dims == Dims::Three || kernel[0] == 1, "2D kernel with depth");
        self.kernel = kernel;
        self.padding = kernel.map(|k| k / 2);
        self
    }

    pub fn padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn params(&self) -> ConvParams {
        ConvParams::new(self.stride, self.padding, self.groups)
    }
}

fn kernel_shape(lead: [usize; 2], kernel: [usize; 3], dims: Dims) -> Vec<usize> {
    match dims {
        Dims::Two => vec![lead[0], lead[1], kernel[1], kernel[2]],
        Dims::Three => vec![lead[0], lead[1], kernel[0], kernel[1], kernel[2]],
    }
}

/// He-normal weights, zero bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec) -> Self {
        let dims = spec.dims;
        assert!(
            spec.in_channels.is_multiple_of(spec.groups) && spec.out_channels.is_multiple_of(spec.groups),
            "{name}: groups {} must divide {} and {}",
            spec.groups,
            spec.in_channels,
            spec.out_channels
        );
        let cin_g = spec.in_channels / spec.groups;
        let fan_in = (cin_g * spec.kernel.iter().product::<usize>()) as f64;
        let shape = kernel_shape([spec.out_channels, cin_g], spec.kernel, dims);
        let w = Tensor::rand_normal(&shape, (2.0 / fan_in).sqrt(), &mut b.rng);
        let weight = b.store.add(format!("{name}.weight"), w, true);
        let bias = spec.bias.then(|| {
            b.store
                .add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true)
        });
        Conv { spec, weight, bias }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let bias = self.bias.map(|id| s.param(id));
        s.graph.conv(x, w, bias, self.spec.params())
    }

    pub fn block(&self) -> Block {
        Block::conv(&self.spec)
    }
}

/// Transposed convolution, kernel layout `[Cin, Cout / groups, k...]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose {
    /// `k`-sized kernel with stride 2 and padding `(k - 2) / 2`: exact 2×
    /// upsampling for even `k`.
    pub fn upsample2(
        b: &mut Builder,
        name: &str,
        dims: Dims,
        in_channels: usize,
        out_channels: usize,
        k: usize,
    ) -> Self {
        let kernel = dims.cube(k);
        let pad = (k - 2) / 2;
        let spec = ConvSpec {
            dims,
            in_channels,
            out_channels,
            kernel,
            stride: dims.stride(2),
            padding: match dims {
                Dims::Two => [0, pad, pad],
                Dims::Three => [pad, pad, pad],
            },
            groups: 1,
            bias: false,
        };
        let fan_in = (in_channels * kernel.iter().product::<usize>()) as f64;
        let shape = kernel_shape([in_channels, out_channels], kernel, dims);
        let w = Tensor::rand_normal(&shape, (2.0 / fan_in).sqrt(), &mut b.rng);
        let weight = b.store.add(format!("{name}.weight"), w, true);
        ConvTranspose {
            spec,
            weight,
            bias: None,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let bias = self.bias.map(|id| s.param(id));
        s.graph.conv_transpose(x, w, bias, self.spec.params())
    }

    pub fn block(&self) -> Block {
        Block::conv_transpose(&self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: b.store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: b.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: b
                .store
                .add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: b
                .store
                .add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        if s.is_train() {
            let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, BN_EPS);
            s.record_bn(self.running_mean, self.running_var, stats);
            y
        } else {
            let store = s.store();
            s.graph.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                BN_EPS,
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
}

impl Act {
    pub fn apply(self, s: &Session, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => s.graph.relu(x),
        }
    }
}

/// Convolution → batch norm → activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Act,
}

impl ConvBn {
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec, act: Act) -> Self {
        let conv = Conv::new(b, &format!("{name}.conv"), spec);
        let bn = Some(BatchNorm::new(b, &format!("{name}.bn"), spec.out_channels));
        ConvBn { conv, bn, act }
    }

    /// Convolution and activation only.
    pub fn without_bn(b: &mut Builder, name: &str, spec: ConvSpec, act: Act) -> Self {
        ConvBn {
            conv: Conv::new(b, &format!("{name}.conv"), spec),
            bn: None,
            act,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let mut y = self.conv.forward(s, x);
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y);
        }
        self.act.apply(s, y)
    }

    pub fn block(&self) -> Block {
        let mut blk = self.conv.block();
        if self.bn.is_some() {
            blk = Block::Seq {
                blocks: vec![
                    blk,
                    Block::BatchNorm {
                        channels: self.conv.spec.out_channels,
                    },
                ],
            };
        }
        blk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_rejects_wrong_shape_on_set() {
        let mut b = Builder::new(0);
        let c = Conv::new(&mut b, "c", ConvSpec::new(Dims::Two, 2, 3, 3, 1).with_bias());
        let mut store = b.finish();
        assert_eq!(store.get(c.weight).shape(), &[3, 2, 3, 3]);
        assert_eq!(store.num_learnable(), 3 * 2 * 9 + 3);
        assert!(store.set("c.weight", Tensor::zeros(&[1])).is_err());
        assert!(store.set("missing", Tensor::zeros(&[1])).is_err());
        store.set("c.bias", Tensor::ones(&[3])).unwrap();
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut b = Builder::new(0);
        let bn = BatchNorm::new(&mut b, "bn", 1);
        let mut store = b.finish();
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = Session::train(&store);
        let xv = s.input(x);
        let _ = bn.forward(&s, xv);
        s.into_bn_updates().apply(&mut store);
        let mean = store.get(bn.running_mean).item();
        let var = store.get(bn.running_var).item();
        assert!((mean - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((var - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_session_records_nothing() {
        let mut b = Builder::new(1);
        let c = ConvBn::new(&mut b, "c", ConvSpec::new(Dims::Two, 1, 2, 3, 1), Act::Relu);
        let store = b.finish();
        let s = Session::eval(&store);
        let x = s.input(Tensor::ones(&[1, 1, 4, 4]));
        let y = c.forward(&s, x);
        assert_eq!(s.graph.shape(y), vec![1, 2, 4, 4]);
        assert!(!s.graph.requires_grad(y));
    }
}
