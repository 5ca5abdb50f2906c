//! Central finite-difference gradient probes, for tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::Scalar;

/// One probed coordinate: autodiff derivative next to its finite-difference estimate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.autodiff - self.numeric).abs() / self.autodiff.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compare autodiff and central differences at `count` random coordinates of `params`.
pub fn probe<T: Scalar>(
    store: &ParamStore<T>,
    params: &[ParamId],
    count: usize,
    step: f64,
    seed: u64,
    loss: impl Fn(&mut Graph<'_, T>) -> Var,
) -> Vec<Probe> {
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |s: &ParamStore<T>| {
        let mut g = Graph::inference(s);
        let l = loss(&mut g);
        g.value(l).data()[0].as_f64()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    (0..count)
        .map(|_| {
            let id = *params.choose(&mut rng).expect("at least one parameter");
            let index = rng.random_range(0..store.get(id).len());
            let orig = store.get(id).data()[index];
            work.get_mut(id).data_mut()[index] = T::of(orig.as_f64() + step);
            let plus = eval(&work);
            work.get_mut(id).data_mut()[index] = T::of(orig.as_f64() - step);
            let minus = eval(&work);
            work.get_mut(id).data_mut()[index] = orig;
            let autodiff = grads
                .param(id)
                .map_or(0.0, |g| g.data()[index].as_f64());
            Probe {
                param: store.name(id).to_string(),
                index,
                autodiff,
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
