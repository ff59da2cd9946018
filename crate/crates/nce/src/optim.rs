//! Parameters, the parameter store, gradient bindings back from tape vars,
//! and the two optimizers (SGD with momentum for weights, Adam for search
//! parameters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub learnable: bool,
    pub momentum: Option<Vec<f32>>,
    pub adam_m: Option<Vec<f32>>,
    pub adam_v: Option<Vec<f32>>,
    pub adam_t: u64,
}

impl Parameter {
    pub fn new(value: Tensor, learnable: bool) -> Self {
        let n = value.numel();
        Parameter {
            value,
            grad: vec![0.0; n],
            learnable,
            momentum: None,
            adam_m: None,
            adam_v: None,
            adam_t: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn add(&mut self, value: Tensor, learnable: bool) -> ParamId {
        self.params.push(Parameter::new(value, learnable));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }
}

/// How a tape var maps back onto (a slice of) a stored parameter.
#[derive(Debug, Clone)]
pub enum Binding {
    /// Whole parameter.
    Full { param: ParamId, var: Var },
    /// Leading `len` entries of a 1-d parameter.
    Prefix { param: ParamId, var: Var, len: usize },
    /// [0..cout, 0..cin, :, :] corner of a 4-d (or [0..cout, 0..cin] of a
    /// 2-d) weight bank with full output extent `bank_out` x `bank_in`.
    BankSlice {
        param: ParamId,
        var: Var,
        cout: usize,
        cin: usize,
        bank_in: usize,
        kernel: usize,
    },
}

impl Binding {
    /// Accumulate the tape gradient of `var` into the parameter's grad
    /// buffer at the bound offsets.
    pub fn apply(&self, tape: &Tape, store: &mut ParamStore) {
        match *self {
            Binding::Full { param, var } => {
                let g = tape.grad(var);
                let p = store.get_mut(param);
                for (a, b) in p.grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            Binding::Prefix { param, var, len } => {
                let g = tape.grad(var);
                let p = store.get_mut(param);
                for i in 0..len {
                    p.grad[i] += g[i];
                }
            }
            Binding::BankSlice { param, var, cout, cin, bank_in, kernel } => {
                let g = tape.grad(var);
                let p = store.get_mut(param);
                for co in 0..cout {
                    for ci in 0..cin {
                        let src = (co * cin + ci) * kernel;
                        let dst = (co * bank_in + ci) * kernel;
                        for k in 0..kernel {
                            p.grad[dst + k] += g[src + k];
                        }
                    }
                }
            }
        }
    }
}

/// Leaf the full parameter value onto the tape, recording the binding.
pub fn bind_full(tape: &mut Tape, store: &ParamStore, id: ParamId, bindings: &mut Vec<Binding>) -> Var {
    let var = tape.leaf(store.get(id).value.clone());
    bindings.push(Binding::Full { param: id, var });
    var
}

/// Leaf the first `len` entries of a 1-d parameter.
pub fn bind_prefix(
    tape: &mut Tape,
    store: &ParamStore,
    id: ParamId,
    len: usize,
    bindings: &mut Vec<Binding>,
) -> Var {
    let p = store.get(id);
    let var = tape.leaf(Tensor::from_vec(p.value.data[..len].to_vec()));
    bindings.push(Binding::Prefix { param: id, var, len });
    var
}

/// Leaf the [0..cout, 0..cin] corner of a conv weight bank
/// [bank_out, bank_in, kh, kw] (kernel = kh*kw; use kernel=1 with 2-d banks).
pub fn bind_bank_slice(
    tape: &mut Tape,
    store: &ParamStore,
    id: ParamId,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    bindings: &mut Vec<Binding>,
) -> Var {
    let p = store.get(id);
    let bank_in = p.value.shape[1];
    let kernel = kh * kw;
    let mut data = vec![0.0f32; cout * cin * kernel];
    for co in 0..cout {
        for ci in 0..cin {
            let src = (co * bank_in + ci) * kernel;
            let dst = (co * cin + ci) * kernel;
            data[dst..dst + kernel].copy_from_slice(&p.value.data[src..src + kernel]);
        }
    }
    let shape = if p.value.shape.len() == 4 {
        vec![cout, cin, kh, kw]
    } else {
        vec![cout, cin]
    };
    let var = tape.leaf(Tensor::new(shape, data));
    bindings.push(Binding::BankSlice { param: id, var, cout, cin, bank_in, kernel });
    var
}

/// Accumulate tape gradients into every bound parameter.
pub fn apply_bindings(tape: &Tape, store: &mut ParamStore, bindings: &[Binding]) {
    for b in bindings {
        b.apply(tape, store);
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get_mut(id);
            if !p.learnable {
                continue;
            }
            if p.grad.len() != p.value.numel() {
                return Err(Error::Usage("sgd_step: gradient buffer size mismatch".into()));
            }
            let n = p.value.numel();
            if self.momentum != 0.0 && p.momentum.is_none() {
                p.momentum = Some(vec![0.0; n]);
            }
            for i in 0..n {
                let mut g = p.grad[i] + self.weight_decay * p.value.data[i];
                if self.momentum != 0.0 {
                    let buf = p.momentum.as_mut().unwrap();
                    buf[i] = self.momentum * buf[i] + g;
                    g = buf[i];
                }
                p.value.data[i] -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get_mut(id);
            if !p.learnable {
                continue;
            }
            let n = p.value.numel();
            if p.grad.len() != n {
                return Err(Error::Usage("adam_step: gradient buffer size mismatch".into()));
            }
            if p.adam_m.is_none() {
                p.adam_m = Some(vec![0.0; n]);
                p.adam_v = Some(vec![0.0; n]);
            }
            p.adam_t += 1;
            let t = p.adam_t as f32;
            let bc1 = 1.0 - self.beta1.powf(t);
            let bc2 = 1.0 - self.beta2.powf(t);
            let m = p.adam_m.as_mut().unwrap();
            let v = p.adam_v.as_mut().unwrap();
            for i in 0..n {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
