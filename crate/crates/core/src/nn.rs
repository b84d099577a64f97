//! Learnable building blocks shared by the layers: affine maps, batch norm,
//! and the forward-pass context that binds parameters onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Parameter, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Stored running statistics.
    Infer,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

/// Named feature-map sizes recorded by an instrumented forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivationTally {
    pub entries: Vec<(String, u64)>,
}

impl ActivationTally {
    pub fn record(&mut self, name: impl Into<String>, elements: usize) {
        self.entries.push((name.into(), elements as u64));
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, e)| e).sum()
    }

    pub fn total_matching(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, e)| e)
            .sum()
    }
}

/// State for one forward pass: the tape, the mode, which parameters were
/// bound to which tape variables, and collected batch-norm statistics.
pub struct Forward<'t, T> {
    pub tape: &'t mut Tape<T>,
    pub mode: Mode,
    pub tally: Option<ActivationTally>,
    bindings: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'t, T: Scalar> Forward<'t, T> {
    pub fn new(tape: &'t mut Tape<T>, mode: Mode) -> Self {
        Forward {
            tape,
            mode,
            tally: None,
            bindings: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn instrumented(mut self) -> Self {
        self.tally = Some(ActivationTally::default());
        self
    }

    /// Places `p` on the tape once; later calls return the same variable.
    pub fn bind(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.bindings.get(&p.name) {
            return v;
        }
        let v = self.tape.param(p);
        self.bindings.insert(p.name.clone(), v);
        v
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(t) = self.tally.as_mut() {
            let n = self.tape.value(v).numel();
            t.record(name, n);
        }
    }

    pub fn record_elements(&mut self, name: impl Into<String>, elements: usize) {
        if let Some(t) = self.tally.as_mut() {
            t.record(name, elements);
        }
    }

    pub fn into_parts(self) -> (HashMap<String, Var>, Vec<BnUpdate<T>>, Option<ActivationTally>) {
        (self.bindings, self.bn_updates, self.tally)
    }
}

/// Adds the gradients of every bound parameter into `params`; parameters that
/// were not bound (or not reached) receive a zero gradient.
pub fn accumulate_grads<'p, T: Scalar>(
    params: impl IntoIterator<Item = &'p mut Parameter<T>>,
    bindings: &HashMap<String, Var>,
    grads: &Gradients<T>,
) -> Result<()> {
    for p in params {
        match bindings.get(&p.name).and_then(|&v| grads.get(v)) {
            Some(g) => p.accumulate_grad(g)?,
            None => p.mark_grad_ready(),
        }
    }
    Ok(())
}

pub fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// Shared fully connected map `x·W + b` applied per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Affine {
            weight: Parameter::new(format!("{name}.weight"), glorot(rng, d_in, d_out, &[d_in, d_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Affine {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = fw.bind(&self.weight);
        let b = fw.bind(&self.bias);
        fw.tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel batch normalization over all rows (points × batch entries).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: None,
            running_var: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = *fw.tape.shape(x).last().expect("rank >= 1");
        if c != self.channels() {
            return Err(Error::shape("batch_norm", fw.tape.shape(x), &[self.channels()]));
        }
        let g = fw.bind(&self.gamma);
        let b = fw.bind(&self.beta);
        match fw.mode {
            Mode::Train => {
                let rows = fw.tape.shape(x)[0];
                let (y, mean, var) = fw.tape.batch_norm_train(x, g, b, BN_EPS)?;
                fw.bn_updates.push(BnUpdate {
                    name: self.name.clone(),
                    mean,
                    var,
                    rows,
                });
                Ok(y)
            }
            Mode::Infer => {
                let (Some(mean), Some(var)) = (&self.running_mean, &self.running_var) else {
                    return Err(Error::UninitializedStatistics(self.name.clone()));
                };
                fw.tape.batch_norm_infer(x, g, b, mean, var, BN_EPS)
            }
        }
    }

    /// `running = momentum·running + (1 − momentum)·batch`; the first update
    /// copies the batch statistics. Running variance is unbiased.
    pub fn apply_update(&mut self, upd: &BnUpdate<T>) {
        let m = T::lit(BN_MOMENTUM);
        let correction = if upd.rows > 1 {
            T::lit(upd.rows as f64 / (upd.rows - 1) as f64)
        } else {
            T::one()
        };
        let batch_var: Vec<T> = upd.var.iter().map(|&v| v * correction).collect();
        match (&mut self.running_mean, &mut self.running_var) {
            (Some(rm), Some(rv)) => {
                for c in 0..rm.len() {
                    rm[c] = m * rm[c] + (T::one() - m) * upd.mean[c];
                    rv[c] = m * rv[c] + (T::one() - m) * batch_var[c];
                }
            }
            _ => {
                self.running_mean = Some(upd.mean.clone());
                self.running_var = Some(batch_var);
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
