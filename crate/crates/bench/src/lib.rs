//! Shared inputs for the benchmarks.

use cscl_core::{ProjectionParams, Rng, Tensor};

/// Random `h×w×d` embedding with matching projections (random positional
/// encodings included).
pub fn random_problem(h: usize, w: usize, d: usize, wd: usize, seed: u64) -> (Tensor<f32>, ProjectionParams<f32>) {
    let mut rng = Rng::new(seed, 0);
    let y = Tensor::from_fn(&[h, w, d], |_| rng.uniform(-1.0, 1.0));
    let mut p = ProjectionParams::init(d, d, wd, &mut rng).expect("valid projection shape");
    for t in [&mut p.rh, &mut p.rw] {
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.1, 0.1));
    }
    (y, p)
}
