//! Named parameter tensors and their binding onto a gradient tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

/// All learnable tensors, keyed by a dotted name such as `spatial.0.w`.
/// The map is ordered so iteration (and serialization) is deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, m: Mat) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }

    /// Register every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(k, m)| (k.clone(), tape.leaf(m.clone()))).collect();
        Bound { vars }
    }

    /// Parameter-group name: the prefix before the first dot.
    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Collect gradients for every parameter (zeros where none flowed).
    pub fn gradients(&self, store: &ParamStore, grads: &[Option<Mat>]) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let m = store.get(k);
                let g = grads[crate::tape::var_index(*v)].clone().unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Xavier-uniform initialization.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).unwrap();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}
