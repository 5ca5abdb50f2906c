//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use gelina_core::flow::{FlowBatch, FlowConfig, VelocityField};
use gelina_core::Result;
use gelina_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The exact conditional field of the straight path, `x1 - x0`, independent of
/// `x_t`, `t` and the conditioning.
pub struct ExactField {
    pub x0: Tensor<f64>,
    pub x1: Tensor<f64>,
    pub store: ParamStore<f64>,
}

impl ExactField {
    pub fn new(x0: Tensor<f64>, x1: Tensor<f64>) -> Self {
        Self {
            x0,
            x1,
            store: ParamStore::new(),
        }
    }
}

impl VelocityField<f64> for ExactField {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn velocity(&self, g: &mut Graph<'_, f64>, _x_t: Var, _t: &[f64], _cond: Var) -> Result<Var> {
        let d = self.x1.data().iter().zip(self.x0.data()).map(|(a, b)| a - b).collect();
        Ok(g.constant(Tensor::new(self.x0.shape().to_vec(), d)))
    }
}

/// Flow net small enough for finite-difference probing.
pub fn tiny_flow_config() -> FlowConfig {
    FlowConfig {
        cond_dim: 2,
        hidden: 4,
        heads: 2,
        kernel: 1,
        time_dim: 4,
        ..FlowConfig::desk(2)
    }
}

/// Motion whose joint blocks are valid, mildly perturbed rest poses, plus
/// noise, times in (0, 1) and random conditioning.
pub fn random_flow_batch(cfg: &FlowConfig, batch: usize, steps: usize, seed: u64) -> FlowBatch<f64> {
    use gelina_core::motion::{frame_to_feature, MotionFrame, FEATURE_DIM};
    use gelina_core::rotation::{axis_angle_to_matrix, matrix_to_rot6d, AxisAngle};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = steps * cfg.upsample_factor;
    let mut x0 = Vec::new();
    for _ in 0..batch * frames {
        let mut f = MotionFrame::<f64>::rest();
        for j in &mut f.joints {
            let aa = [0; 3].map(|_| rng.random_range(-0.8..0.8));
            *j = matrix_to_rot6d(&axis_angle_to_matrix(AxisAngle(aa)));
        }
        f.foot_contacts = [0; 4].map(|_| rng.random_range(0.0..1.0));
        f.translation = [0; 3].map(|_| rng.random_range(-0.5..0.5));
        x0.extend(frame_to_feature(&f));
    }
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    };
    let x1 = normal(&mut rng, batch * frames * FEATURE_DIM);
    let cond = normal(&mut rng, batch * steps * cfg.cond_dim);
    FlowBatch {
        x0: Tensor::new(vec![batch, frames, FEATURE_DIM], x0),
        x1: Tensor::new(vec![batch, frames, FEATURE_DIM], x1),
        t: (0..batch).map(|_| rng.random_range(0.05..0.95)).collect(),
        cond: Tensor::new(vec![batch, steps, cfg.cond_dim], cond),
    }
}

/// Univariate Fréchet distance between normals in closed form.
pub fn frechet_1d(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    (m1 - m2).powi(2) + (s1 - s2).powi(2)
}
