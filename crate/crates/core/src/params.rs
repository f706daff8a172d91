//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    /// Running statistics and other buffers are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>, trainable: bool) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter data does not match its shape"
        );
        self.map.insert(
            name.into(),
            Param {
                shape: shape.to_vec(),
                data: Arc::new(data),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn data(&self, name: &str) -> Result<&[T]> {
        Ok(self.get(name)?.data.as_slice())
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut Vec<T>> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(Arc::make_mut(&mut p.data))
    }

    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: p.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        p.data = Arc::new(data);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total count of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: Arc::new(p.data.iter().map(|v| U::c(v.f64())).collect()),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn uniform_init<T: Real>(rng: &mut SplitMix64, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::c(rng.uniform(-bound, bound))).collect()
}

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One forward pass: a tape plus lazily bound parameters.
pub struct Graph<'a, T: Real> {
    tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var>>,
    pub mode: Mode,
    /// Parameters are bound as differentiable leaves.
    pub grad: bool,
    dropout: f64,
    rng: RefCell<SplitMix64>,
    bn_updates: RefCell<Vec<(String, Vec<T>, Vec<T>)>>,
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        self.tape
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, mode: Mode, grad: bool) -> Self {
        Graph {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
            mode,
            grad,
            dropout: 0.0,
            rng: RefCell::new(SplitMix64::new(0)),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Enables dropout with probability `p`; masks come from `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        self.dropout = p;
        self.rng = RefCell::new(SplitMix64::new(seed));
        self
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Binds a stored parameter onto the tape (once per forward).
    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let param = self.params.get(name)?;
        let v = self.tape.leaf_shared(
            &param.shape,
            Arc::clone(&param.data),
            self.grad && param.trainable,
        )?;
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn bound(&self) -> Vec<(String, Var)> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.bound() {
            if let Some(g) = self.tape.grad(var) {
                out.insert(name, g);
            }
        }
        out
    }

    /// Inverted dropout; identity outside training or with p = 0.
    pub fn dropout(&self, x: Var) -> Result<Var> {
        if self.mode != Mode::Train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = self.tape.value(x).len();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.next_f64() < keep {
                    T::c(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        drop(rng);
        let m = self.tape.constant(&self.tape.shape(x), mask)?;
        self.tape.mul(x, m)
    }

    pub(crate) fn record_bn_update(&self, prefix: &str, mean: Vec<T>, var: Vec<T>) {
        self.bn_updates
            .borrow_mut()
            .push((prefix.to_string(), mean, var));
    }

    /// Batch statistics observed in train-mode batch norm, in call order.
    pub fn take_bn_updates(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}
