use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::param::{NamedTensors, Param, ParamStore, StoredTensor};
use crate::tensor::Tensor;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    param: Param,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam over every trainable parameter of a store at construction time.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

/// Serializable optimizer state for checkpoint resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let slots = store
            .params()
            .filter(|p| p.trainable())
            .map(|p| Slot {
                param: p.clone(),
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Self { config, step: 0, slots }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient keep their value but still age their moments.
    pub fn step(&mut self, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.param(&slot.param) else {
                continue;
            };
            let mut w = slot.param.value().into_data();
            for (((wv, &gv), m), v) in w.iter_mut().zip(g.data()).zip(slot.m.iter_mut()).zip(slot.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *wv -= lr * mh / (vh.sqrt() + eps);
            }
            let shape = slot.param.shape();
            slot.param.set_value(Tensor::new(&shape, w));
        }
    }

    pub fn state(&self) -> AdamState {
        let dump = |f: fn(&Slot) -> &Vec<f64>| {
            NamedTensors(
                self.slots
                    .iter()
                    .map(|s| {
                        (
                            s.param.name().to_string(),
                            StoredTensor {
                                shape: s.param.shape(),
                                data: f(s).clone(),
                            },
                        )
                    })
                    .collect(),
            )
        };
        AdamState {
            step: self.step,
            m: dump(|s| &s.m),
            v: dump(|s| &s.v),
        }
    }

    pub fn load_state(&mut self, state: &AdamState) -> Result<(), Error> {
        for slot in &mut self.slots {
            let name = slot.param.name();
            let m = state.m.0.get(name).ok_or_else(|| Error::MissingParam(name.into()))?;
            let v = state.v.0.get(name).ok_or_else(|| Error::MissingParam(name.into()))?;
            if m.data.len() != slot.m.len() || v.data.len() != slot.v.len() {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: slot.param.shape(),
                    found: m.shape.clone(),
                });
            }
            slot.m.clone_from(&m.data);
            slot.v.clone_from(&v.data);
        }
        self.step = state.step;
        Ok(())
    }
}
