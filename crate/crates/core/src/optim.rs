//! Diagonal AdaDelta (Zeiler, 2012).

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Running averages `E[g²]` and `E[Δx²]` for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip: Option<f64>,
    eg2: Vec<Option<Vec<f64>>>,
    edx2: Vec<Option<Vec<f64>>>,
}

impl AdaDelta {
    pub fn new(store: &ParamStore, rho: f64, eps: f64, clip: Option<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || eps <= 0.0 || clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::invalid(
                "AdaDelta",
                format!("bad hyper-parameters rho={rho} eps={eps} clip={clip:?}"),
            ));
        }
        let zeros = || -> Vec<Option<Vec<f64>>> {
            store
                .iter()
                .map(|(_, p)| p.trainable.then(|| vec![0.0; p.value.numel()]))
                .collect()
        };
        Ok(AdaDelta {
            rho,
            eps,
            clip,
            eg2: zeros(),
            edx2: zeros(),
        })
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, DEFAULT_RHO, DEFAULT_EPS, None).expect("default hyper-parameters are valid")
    }

    pub fn sq_grad_avg(&self, index: usize) -> Option<&[f64]> {
        self.eg2.get(index)?.as_deref()
    }

    pub fn sq_update_avg(&self, index: usize) -> Option<&[f64]> {
        self.edx2.get(index)?.as_deref()
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut GradStore) -> Result<()> {
        if grads.len() != self.eg2.len() || store.len() != self.eg2.len() {
            return Err(Error::invalid(
                "AdaDelta::step",
                "state does not match the parameter store",
            ));
        }
        for id in store.ids() {
            let name = &store.get(id).name;
            let shape_ok = match (grads.get(id), &self.eg2[id.index()]) {
                (Some(g), Some(s)) => g.len() == s.len() && g.len() == store.value(id).numel(),
                (None, None) => true,
                _ => false,
            };
            if !shape_ok {
                return Err(Error::invalid(
                    "AdaDelta::step",
                    format!("gradient shape differs for {name}"),
                ));
            }
            if let Some(g) = grads.get(id) {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric {
                        op: "AdaDelta::step",
                        msg: format!("non-finite gradient {} at {name}[{pos}]", g[pos]),
                    });
                }
            }
        }
        if let Some(c) = self.clip {
            let norm = grads.global_norm();
            if norm > c {
                grads.scale(c / norm);
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (Some(g), Some(eg2), Some(edx2)) =
                (grads.get(id), &mut self.eg2[id.index()], &mut self.edx2[id.index()])
            else {
                continue;
            };
            let x = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                eg2[j] = rho * eg2[j] + (1.0 - rho) * g[j] * g[j];
                let dx = -((edx2[j] + eps).sqrt() / (eg2[j] + eps).sqrt()) * g[j];
                edx2[j] = rho * edx2[j] + (1.0 - rho) * dx * dx;
                x[j] += dx;
            }
        }
        Ok(())
    }
}
