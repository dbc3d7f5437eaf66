use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

/// Which learned component a parameter belongs to; drives per-component
/// learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Velocity,
    Advection,
    Source,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub component: Component,
    /// False for positional embeddings, which are exempt from weight decay.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn push(&mut self, p: Param) -> ParamId {
        debug_assert!(self.find(&p.name).is_none(), "duplicate parameter {}", p.name);
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamInit<'a> {
    pub(crate) store: &'a mut ParamStore,
    pub(crate) rng: &'a mut ChaCha8Rng,
    pub(crate) component: Component,
    pub(crate) prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        component: Component,
        prefix: &str,
    ) -> Self {
        Self {
            store,
            rng,
            component,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamInit<'_> {
        ParamInit {
            store: self.store,
            rng: self.rng,
            component: self.component,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    fn register(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        self.store.push(Param {
            name: format!("{}.{}", self.prefix, name),
            value,
            component: self.component,
            decay,
        })
    }

    /// `U(−b, b)` with `b = gain / sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound));
        self.register(name, value, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, ArrayD::zeros(IxDyn(shape)), true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, ArrayD::ones(IxDyn(shape)), true)
    }

    /// Small normal init, excluded from weight decay.
    pub fn positional(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(normal));
        self.register(name, value, false)
    }
}

/// Per-forward context: the tape, bound parameter handles, and the
/// train/eval switch with its dropout RNG.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    vars: &'a [Var],
    pub train: bool,
    rng: ChaCha8Rng,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a [Var], train: bool, seed: u64) -> Self {
        Self {
            tape,
            vars,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let rng = &mut self.rng;
        let mask = ArrayD::from_shape_simple_fn(self.tape.shape(x), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.tape.mul_const(x, mask)
    }

    /// Stochastic depth on a residual branch `x` of shape `(B, ...)`.
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let per: usize = shape[1..].iter().product();
        let mut mask = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            let m = if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            };
            mask.extend(std::iter::repeat_n(m, per));
        }
        let mask = ArrayD::from_shape_vec(IxDyn(&shape), mask).expect("mask shape");
        self.tape.mul_const(x, mask)
    }
}
