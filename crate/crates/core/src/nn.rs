//! Named parameter storage, initialisers and first-order optimisers.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Parameters keyed by stable dotted names, enumerated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn var<'t>(&self, tape: &'t Tape, name: &str) -> Var<'t> {
        tape.param(name, self.get(name))
    }

    /// Moves every parameter of `other` in, prefixing nothing.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Glorot-uniform `rows × cols` matrix.
    pub fn init_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.init_uniform(name, rows, cols, bound, rng);
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut Rng) {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn init_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::filled(rows, cols, value));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Stateful optimiser. `lr_scale` lets callers damp individual parameter
/// groups (the encoder during end-to-end tuning).
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let lr = self.lr * lr_scale(name);
            if lr == 0.0 {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr * gv;
                        }
                    } else {
                        let vel = self
                            .first
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for ((w, gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel) {
                            *v = momentum * *v + gv;
                            *w -= lr * *v;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        let gv = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
