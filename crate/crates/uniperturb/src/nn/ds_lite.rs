//! Context-window MLP: per-frame window of +/-4 neighboring frames (zero
//! padded at the edges), flattened and pushed through three fully connected
//! layers. The two hidden layers use the clipped ReLU min(max(z, 0), 20);
//! the last layer is linear to the logits.

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::nn::{Logits, Param};
use crate::par;

/// Frames of context on each side.
pub const CONTEXT: usize = 4;
/// Total frames in one window.
pub const WINDOW_FRAMES: usize = 2 * CONTEXT + 1;
/// Activation cap of the clipped ReLU.
pub const RELU_CAP: f64 = 20.0;

#[inline]
fn clipped_relu(z: f64) -> f64 {
    z.clamp(0.0, RELU_CAP)
}

/// 1 inside the linear region, 0 on both clipped branches.
#[inline]
fn clipped_relu_grad(z: f64) -> f64 {
    if z > 0.0 && z < RELU_CAP {
        1.0
    } else {
        0.0
    }
}

/// Forward activations needed by the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    windows: Mat, // T x in_dim
    z1: Mat,      // T x h1 (pre-activation)
    a1: Mat,
    z2: Mat, // T x h2
    a2: Mat,
    n_coeffs: usize,
}

struct Dims {
    in_dim: usize,
    h1: usize,
    h2: usize,
    classes: usize,
}

fn dims(params: &[Param], classes: usize) -> Result<Dims> {
    if params.len() != 6 {
        return Err(Error::ShapeMismatch(format!(
            "ds_lite expects 6 parameters, got {}",
            params.len()
        )));
    }
    let w1 = &params[0];
    let w2 = &params[2];
    let w3 = &params[4];
    if w1.shape.len() != 2 || w2.shape.len() != 2 || w3.shape.len() != 2 {
        return Err(Error::ShapeMismatch("ds_lite weights must be 2-D".into()));
    }
    let d = Dims {
        in_dim: w1.shape[0],
        h1: w1.shape[1],
        h2: w2.shape[1],
        classes: w3.shape[1],
    };
    if w2.shape[0] != d.h1 || w3.shape[0] != d.h2 || d.classes != classes {
        return Err(Error::ShapeMismatch("ds_lite layer sizes disagree".into()));
    }
    Ok(d)
}

/// Gather the +/-CONTEXT window around frame `t`, zero padded at the edges.
fn gather_window(feats: &Mat, t: usize, n_coeffs: usize, out: &mut [f64]) {
    out.fill(0.0);
    let frames = feats.rows() as isize;
    for o in 0..WINDOW_FRAMES {
        let src = t as isize + o as isize - CONTEXT as isize;
        if src >= 0 && src < frames {
            out[o * n_coeffs..(o + 1) * n_coeffs].copy_from_slice(feats.row(src as usize));
        }
    }
}

pub fn forward(params: &[Param], feats: &Mat, classes: usize) -> Result<(Logits, Tape)> {
    let d = dims(params, classes)?;
    let n_coeffs = feats.cols();
    if WINDOW_FRAMES * n_coeffs != d.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "window of {WINDOW_FRAMES} x {n_coeffs} features vs input dim {}",
            d.in_dim
        )));
    }
    let frames = feats.rows();
    let (w1, b1) = (&params[0], &params[1]);
    let (w2, b2) = (&params[2], &params[3]);
    let (w3, b3) = (&params[4], &params[5]);

    struct Row {
        window: Vec<f64>,
        z1: Vec<f64>,
        a1: Vec<f64>,
        z2: Vec<f64>,
        a2: Vec<f64>,
        logit: Vec<f64>,
    }

    let rows = par::map_range(frames, |t| {
        let mut window = vec![0.0; d.in_dim];
        gather_window(feats, t, n_coeffs, &mut window);
        // z1 = W1^T x + b1; W1 is in_dim x h1 row-major, so accumulate rows
        let mut z1 = b1.data.clone();
        for (i, &x) in window.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_row = &w1.data[i * d.h1..(i + 1) * d.h1];
            for (z, &w) in z1.iter_mut().zip(w_row) {
                *z += x * w;
            }
        }
        let a1: Vec<f64> = z1.iter().map(|&z| clipped_relu(z)).collect();
        let mut z2 = b2.data.clone();
        for (i, &x) in a1.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_row = &w2.data[i * d.h2..(i + 1) * d.h2];
            for (z, &w) in z2.iter_mut().zip(w_row) {
                *z += x * w;
            }
        }
        let a2: Vec<f64> = z2.iter().map(|&z| clipped_relu(z)).collect();
        let mut logit = b3.data.clone();
        for (i, &x) in a2.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_row = &w3.data[i * d.classes..(i + 1) * d.classes];
            for (z, &w) in logit.iter_mut().zip(w_row) {
                *z += x * w;
            }
        }
        Row {
            window,
            z1,
            a1,
            z2,
            a2,
            logit,
        }
    });

    let mut logits = Mat::zeros(frames, d.classes);
    let mut windows = Mat::zeros(frames, d.in_dim);
    let mut z1 = Mat::zeros(frames, d.h1);
    let mut a1 = Mat::zeros(frames, d.h1);
    let mut z2 = Mat::zeros(frames, d.h2);
    let mut a2 = Mat::zeros(frames, d.h2);
    for (t, row) in rows.into_iter().enumerate() {
        logits.row_mut(t).copy_from_slice(&row.logit);
        windows.row_mut(t).copy_from_slice(&row.window);
        z1.row_mut(t).copy_from_slice(&row.z1);
        a1.row_mut(t).copy_from_slice(&row.a1);
        z2.row_mut(t).copy_from_slice(&row.z2);
        a2.row_mut(t).copy_from_slice(&row.a2);
    }
    Ok((
        Logits::new(logits),
        Tape {
            windows,
            z1,
            a1,
            z2,
            a2,
            n_coeffs,
        },
    ))
}

pub fn backward(params: &[Param], tape: &Tape, grad_logits: &Mat) -> Result<(Mat, Vec<Param>)> {
    let classes = grad_logits.cols();
    let d = dims(params, classes)?;
    let frames = tape.windows.rows();
    if grad_logits.rows() != frames {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} rows, tape has {frames} frames",
            grad_logits.rows()
        )));
    }
    let w1 = &params[0];
    let w2 = &params[2];
    let w3 = &params[4];

    let mut grads: Vec<Param> = params.iter().map(Param::zeros_like).collect();
    let frames_count = frames;
    // frame count of the original feature matrix equals the tape frames
    let mut grad_feats = Mat::zeros(frames_count, tape.n_coeffs);

    for t in 0..frames {
        let g_logit = grad_logits.row(t);
        let a2 = tape.a2.row(t);
        let a1 = tape.a1.row(t);
        let window = tape.windows.row(t);

        // output layer
        let mut g_a2 = vec![0.0; d.h2];
        {
            let (gw3, gb3) = {
                let (left, right) = grads.split_at_mut(5);
                (&mut left[4], &mut right[0])
            };
            for (k, &g) in g_logit.iter().enumerate() {
                gb3.data[k] += g;
            }
            for i in 0..d.h2 {
                let w_row = &w3.data[i * d.classes..(i + 1) * d.classes];
                let gw_row = &mut gw3.data[i * d.classes..(i + 1) * d.classes];
                let ai = a2[i];
                let mut acc = 0.0;
                for (k, &g) in g_logit.iter().enumerate() {
                    gw_row[k] += ai * g;
                    acc += w_row[k] * g;
                }
                g_a2[i] = acc;
            }
        }

        // second hidden layer
        let z2 = tape.z2.row(t);
        let g_z2: Vec<f64> = g_a2
            .iter()
            .zip(z2)
            .map(|(g, &z)| g * clipped_relu_grad(z))
            .collect();
        let mut g_a1 = vec![0.0; d.h1];
        {
            let (gw2, gb2) = {
                let (left, right) = grads.split_at_mut(3);
                (&mut left[2], &mut right[0])
            };
            for (j, &g) in g_z2.iter().enumerate() {
                gb2.data[j] += g;
            }
            for i in 0..d.h1 {
                let w_row = &w2.data[i * d.h2..(i + 1) * d.h2];
                let gw_row = &mut gw2.data[i * d.h2..(i + 1) * d.h2];
                let ai = a1[i];
                g_a1[i] = dot(w_row, &g_z2);
                for (j, &g) in g_z2.iter().enumerate() {
                    gw_row[j] += ai * g;
                }
            }
        }

        // first hidden layer
        let z1 = tape.z1.row(t);
        let g_z1: Vec<f64> = g_a1
            .iter()
            .zip(z1)
            .map(|(g, &z)| g * clipped_relu_grad(z))
            .collect();
        let mut g_window = vec![0.0; d.in_dim];
        {
            let (gw1, gb1) = {
                let (left, right) = grads.split_at_mut(1);
                (&mut left[0], &mut right[0])
            };
            for (j, &g) in g_z1.iter().enumerate() {
                gb1.data[j] += g;
            }
            for i in 0..d.in_dim {
                let w_row = &w1.data[i * d.h1..(i + 1) * d.h1];
                let gw_row = &mut gw1.data[i * d.h1..(i + 1) * d.h1];
                let xi = window[i];
                g_window[i] = dot(w_row, &g_z1);
                if xi != 0.0 {
                    for (j, &g) in g_z1.iter().enumerate() {
                        gw_row[j] += xi * g;
                    }
                }
            }
        }

        // scatter the window gradient back onto neighboring frames
        for o in 0..WINDOW_FRAMES {
            let src = t as isize + o as isize - CONTEXT as isize;
            if src >= 0 && (src as usize) < frames_count {
                let dst = grad_feats.row_mut(src as usize);
                let g = &g_window[o * tape.n_coeffs..(o + 1) * tape.n_coeffs];
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }

    Ok((grad_feats, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;
    use crate::dsp::{FeatureMatrix, MfccConfig};
    use crate::nn::AcousticModel;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_units_pass_no_gradient() {
        // one input, one hidden unit each layer, weights forcing z1 > cap
        let alphabet = Alphabet::parse("a").unwrap();
        let cfg = MfccConfig {
            n_coeffs: 1,
            n_mels: 2,
            ..MfccConfig::default()
        };
        let mut model = AcousticModel::init_ds_lite(alphabet, cfg, [1, 1], 0).unwrap();
        // w1: 9x1 all ones, b1 = 0 -> z1 = sum(window) = 9 * 10 = 90 > 20
        for p in model.params_mut() {
            match p.name.as_str() {
                "w1" => p.data.fill(1.0),
                "w2" | "w3" => p.data.fill(1.0),
                _ => p.data.fill(0.0),
            }
        }
        let mut values = Mat::zeros(9, 1);
        for v in values.data_mut() {
            *v = 10.0;
        }
        let feats = FeatureMatrix::from_values(values, cfg).unwrap();
        let (logits, tape) = model.forward(&feats).unwrap();
        // hidden saturates at the cap
        let mut upstream = Mat::zeros(logits.frames(), logits.values().cols());
        for v in upstream.data_mut() {
            *v = 1.0;
        }
        let (g_feats, _) = model.backward(&tape, &upstream).unwrap();
        // center frame's z1 = 90 > 20: every feature gradient through that
        // unit is exactly zero
        assert!(g_feats.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn window_gather_zero_pads_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut feats = Mat::zeros(3, 2);
        for v in feats.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut window = vec![0.0; WINDOW_FRAMES * 2];
        gather_window(&feats, 0, 2, &mut window);
        // frames -4..0 are zero padding
        assert!(window[..CONTEXT * 2].iter().all(|&x| x == 0.0));
        assert_eq!(&window[CONTEXT * 2..CONTEXT * 2 + 2], feats.row(0));
    }
}
