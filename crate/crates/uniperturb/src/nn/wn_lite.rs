//! Dilated 1-D convolution stack over the frame axis: a linear projection
//! lifts the features to the channel width, then four kernel-3 convolution
//! layers with dilations 1, 2, 4, 8 run with tanh activations and residual
//! adds, and a final linear layer maps to the logits. Frames outside the
//! sequence are treated as zero.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{Logits, Param};

pub const KERNEL: usize = 3;
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Forward activations: the raw input features, the residual stream feeding
/// each convolution layer, and each layer's tanh output.
#[derive(Clone, Debug)]
pub struct Tape {
    features: Mat,          // T x n_coeffs
    layer_inputs: Vec<Mat>, // h0..h3, each T x channels
    tanh_out: Vec<Mat>,     // a1..a4, each T x channels
}

struct Dims {
    channels: usize,
    classes: usize,
}

fn dims(params: &[Param], classes: usize) -> Result<Dims> {
    let expected = 2 + 2 * DILATIONS.len() + 2;
    if params.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "wn_lite expects {expected} parameters, got {}",
            params.len()
        )));
    }
    let proj_w = &params[0];
    let out_w = &params[expected - 2];
    if proj_w.shape.len() != 2 || out_w.shape.len() != 2 {
        return Err(Error::ShapeMismatch("wn_lite projections must be 2-D".into()));
    }
    let channels = proj_w.shape[1];
    for (i, _) in DILATIONS.iter().enumerate() {
        let w = &params[2 + 2 * i];
        if w.shape != vec![channels, channels, KERNEL] {
            return Err(Error::ShapeMismatch(format!(
                "conv{} weight shape {:?}",
                i + 1,
                w.shape
            )));
        }
    }
    if out_w.shape[0] != channels || out_w.shape[1] != classes {
        return Err(Error::ShapeMismatch("wn_lite output layer shape".into()));
    }
    Ok(Dims { channels, classes })
}

/// z[t][co] = b[co] + sum_j sum_ci w[co][ci][j] * input[t + (j-1)*d][ci]
fn conv_forward(input: &Mat, w: &Param, b: &Param, dilation: usize, channels: usize) -> Mat {
    let frames = input.rows();
    Mat::from_rows(frames, channels, |t, out| {
        out.copy_from_slice(&b.data);
        for (j, tap) in (-1i64..=1).enumerate() {
            let src = t as i64 + tap * dilation as i64;
            if src < 0 || src >= frames as i64 {
                continue;
            }
            let in_row = input.row(src as usize);
            for (co, o) in out.iter_mut().enumerate() {
                let w_base = co * channels * KERNEL;
                let mut acc = 0.0;
                for (ci, &x) in in_row.iter().enumerate() {
                    acc += w.data[w_base + ci * KERNEL + j] * x;
                }
                *o += acc;
            }
        }
    })
}

pub fn forward(params: &[Param], feats: &Mat, classes: usize) -> Result<(Logits, Tape)> {
    let d = dims(params, classes)?;
    let proj_w = &params[0];
    let proj_b = &params[1];
    if proj_w.shape[0] != feats.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature coefficients vs projection input {}",
            feats.cols(),
            proj_w.shape[0]
        )));
    }
    let frames = feats.rows();
    let channels = d.channels;

    // input projection
    let mut stream = Mat::from_rows(frames, channels, |t, out| {
        out.copy_from_slice(&proj_b.data);
        let f = feats.row(t);
        for (ci, &x) in f.iter().enumerate() {
            let w_row = &proj_w.data[ci * channels..(ci + 1) * channels];
            for (o, &w) in out.iter_mut().zip(w_row) {
                *o += x * w;
            }
        }
    });

    let mut layer_inputs = Vec::with_capacity(DILATIONS.len());
    let mut tanh_out = Vec::with_capacity(DILATIONS.len());
    for (i, &dilation) in DILATIONS.iter().enumerate() {
        let w = &params[2 + 2 * i];
        let b = &params[3 + 2 * i];
        let mut a = conv_forward(&stream, w, b, dilation, channels);
        for v in a.data_mut() {
            *v = v.tanh();
        }
        let mut next = stream.clone();
        next.add_assign(&a).expect("same shape");
        layer_inputs.push(stream);
        tanh_out.push(a);
        stream = next;
    }

    let out_w = &params[params.len() - 2];
    let out_b = &params[params.len() - 1];
    let logits = Mat::from_rows(frames, d.classes, |t, out| {
        out.copy_from_slice(&out_b.data);
        let h = stream.row(t);
        for (ci, &x) in h.iter().enumerate() {
            let w_row = &out_w.data[ci * d.classes..(ci + 1) * d.classes];
            for (o, &w) in out.iter_mut().zip(w_row) {
                *o += x * w;
            }
        }
    });

    Ok((
        Logits::new(logits),
        Tape {
            features: feats.clone(),
            layer_inputs,
            tanh_out,
        },
    ))
}

pub fn backward(params: &[Param], tape: &Tape, grad_logits: &Mat) -> Result<(Mat, Vec<Param>)> {
    let classes = grad_logits.cols();
    let d = dims(params, classes)?;
    let channels = d.channels;
    let frames = grad_logits.rows();
    if tape.features.rows() != frames {
        return Err(Error::ShapeMismatch(
            "gradient frame count does not match the tape".into(),
        ));
    }

    let mut grads: Vec<Param> = params.iter().map(Param::zeros_like).collect();

    // final residual stream = last layer input + last tanh output
    let mut stream_last = tape.layer_inputs.last().unwrap().clone();
    stream_last
        .add_assign(tape.tanh_out.last().unwrap())
        .expect("same shape");

    // output layer
    let out_w = &params[params.len() - 2];
    let mut g_stream = Mat::zeros(frames, channels);
    {
        let n = grads.len();
        let (gw, gb) = {
            let (left, right) = grads.split_at_mut(n - 1);
            (&mut left[n - 2], &mut right[0])
        };
        for t in 0..frames {
            let g = grad_logits.row(t);
            let h = stream_last.row(t);
            for (k, &gk) in g.iter().enumerate() {
                gb.data[k] += gk;
            }
            let g_h = g_stream.row_mut(t);
            for ci in 0..channels {
                let w_row = &out_w.data[ci * classes..(ci + 1) * classes];
                let gw_row = &mut gw.data[ci * classes..(ci + 1) * classes];
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    gw_row[k] += h[ci] * gk;
                    acc += w_row[k] * gk;
                }
                g_h[ci] = acc;
            }
        }
    }

    // convolution layers in reverse
    for (i, &dilation) in DILATIONS.iter().enumerate().rev() {
        let w = &params[2 + 2 * i];
        let a = &tape.tanh_out[i];
        let input = &tape.layer_inputs[i];

        // through the tanh branch: g_z = g_stream * (1 - a^2)
        let mut g_z = Mat::zeros(frames, channels);
        for t in 0..frames {
            let ga = g_stream.row(t);
            let at = a.row(t);
            let gz = g_z.row_mut(t);
            for c in 0..channels {
                gz[c] = ga[c] * (1.0 - at[c] * at[c]);
            }
        }

        // bias gradients
        for t in 0..frames {
            let gz = g_z.row(t);
            let gb = &mut grads[3 + 2 * i];
            for (co, &g) in gz.iter().enumerate() {
                gb.data[co] += g;
            }
        }

        // weight and input gradients
        let mut g_input = Mat::zeros(frames, channels);
        {
            let gw = &mut grads[2 + 2 * i];
            for t in 0..frames {
                let gz = g_z.row(t);
                for (j, tap) in (-1i64..=1).enumerate() {
                    let src = t as i64 + tap * dilation as i64;
                    if src < 0 || src >= frames as i64 {
                        continue;
                    }
                    let in_row = input.row(src as usize);
                    let g_in = g_input.row_mut(src as usize);
                    for (co, &g) in gz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let w_base = co * channels * KERNEL;
                        for ci in 0..channels {
                            let idx = w_base + ci * KERNEL + j;
                            gw.data[idx] += g * in_row[ci];
                            g_in[ci] += w.data[idx] * g;
                        }
                    }
                }
            }
        }

        // residual skip: the stream gradient also flows straight through
        g_input.add_assign(&g_stream).expect("same shape");
        g_stream = g_input;
    }

    // input projection
    let proj_w = &params[0];
    let n_coeffs = tape.features.cols();
    let mut grad_feats = Mat::zeros(frames, n_coeffs);
    {
        let (gw, gb) = {
            let (left, right) = grads.split_at_mut(1);
            (&mut left[0], &mut right[0])
        };
        for t in 0..frames {
            let g = g_stream.row(t);
            let f = tape.features.row(t);
            for (c, &gc) in g.iter().enumerate() {
                gb.data[c] += gc;
            }
            let gf = grad_feats.row_mut(t);
            for ci in 0..n_coeffs {
                let w_row = &proj_w.data[ci * channels..(ci + 1) * channels];
                let gw_row = &mut gw.data[ci * channels..(ci + 1) * channels];
                let mut acc = 0.0;
                for (c, &gc) in g.iter().enumerate() {
                    gw_row[c] += f[ci] * gc;
                    acc += w_row[c] * gc;
                }
                gf[ci] = acc;
            }
        }
    }

    Ok((grad_feats, grads))
}
