//! Reverse-mode gradients against central finite differences.

#![allow(dead_code)]

use specdec_lab::tinymodel::train::loss_and_grads;
use specdec_lab::tinymodel::{ModelParams, TrainConfig};

/// Largest relative error over every parameter value of `params`, with
/// magnitudes below 1e-6 treated as 1e-6.
pub fn max_relative_error(params: &ModelParams<f64>, teacher: Option<&ModelParams<f64>>, batch: &[Vec<usize>], cfg: &TrainConfig) -> f64 {
    let (_, grads) = loss_and_grads(params, teacher, batch, cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, grad) in grads.iter().enumerate() {
        for i in 0..grad.data.len() {
            let mut p = params.clone();
            p.tensors_mut()[ti].data[i] += h;
            let (up, _) = loss_and_grads(&p, teacher, batch, cfg).unwrap();
            p.tensors_mut()[ti].data[i] -= 2.0 * h;
            let (down, _) = loss_and_grads(&p, teacher, batch, cfg).unwrap();
            let fd = (up - down) / (2.0 * h);
            let an = grad.data[i];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
