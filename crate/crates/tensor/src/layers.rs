//! Layer building blocks on top of [`Graph`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// `input · weights + bias` for `input: (rows, in)`, `weights: (in, out)`, `bias: (out)`.
pub fn dense(g: &mut Graph, input: Var, weights: Var, bias: Var) -> Result<Var> {
    let xw = g.matmul(input, weights)?;
    g.add_row(xw, bias)
}

pub fn elu(g: &mut Graph, input: Var) -> Result<Var> {
    g.elu(input)
}

/// Inverted dropout: in training each entry is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`. Inference returns `input` itself.
pub fn dropout(g: &mut Graph, input: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::DropoutRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let shape = g.value(input).shape().to_vec();
    let n = g.value(input).len();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 }).collect();
    g.mul_const(input, &Tensor::new(&shape, mask)?)
}

/// 1-D convolution of `sequence: (n, t, c_in)` with `kernels: (k, c_in, c_out)`, stride 1.
///
/// `Same` padding requires an odd kernel and keeps `t` steps.
pub fn conv1d(g: &mut Graph, sequence: Var, kernels: Var, bias: Var, padding: Padding) -> Result<Var> {
    let sv = g.value(sequence);
    let kv = g.value(kernels);
    if sv.rank() != 3 || kv.rank() != 3 || sv.shape()[2] != kv.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d",
            left: sv.shape().to_vec(),
            right: kv.shape().to_vec(),
        });
    }
    let (n, t, c_in) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
    let (k, c_out) = (kv.shape()[0], kv.shape()[2]);
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Same => {
            if k % 2 == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d same padding needs an odd kernel",
                    left: sv.shape().to_vec(),
                    right: kv.shape().to_vec(),
                });
            }
            k / 2
        }
    };
    let seq4 = g.reshape(sequence, &[n, 1, t, c_in])?;
    let ker4 = g.reshape(kernels, &[1, k, c_in, c_out])?;
    let out = g.conv2d(seq4, ker4, bias, 1, 0, pad)?;
    let t_out = g.value(out).shape()[2];
    g.reshape(out, &[n, t_out, c_out])
}

/// Parameters of one LSTM layer; gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `(features, 4 * hidden)`
    pub w_input: Var,
    /// `(hidden, 4 * hidden)`
    pub w_hidden: Var,
    /// `(4 * hidden)`
    pub bias: Var,
}

/// One LSTM step on a batch: returns the new `(hidden, cell)` state.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let hidden = g.value(h).cols();
    if g.value(p.w_hidden).shape() != [hidden, 4 * hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            left: g.value(h).shape().to_vec(),
            right: g.value(p.w_hidden).shape().to_vec(),
        });
    }
    let xw = g.matmul(x, p.w_input)?;
    let hw = g.matmul(h, p.w_hidden)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_row(pre, p.bias)?;
    let i = g.slice_cols(pre, 0, hidden)?;
    let f = g.slice_cols(pre, hidden, 2 * hidden)?;
    let cand = g.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o = g.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM over `sequence: (n, t, features)` from a zero state and returns the last hidden state `(n, hidden)`.
pub fn lstm_sequence(g: &mut Graph, sequence: Var, p: &LstmParams) -> Result<Var> {
    let sv = g.value(sequence);
    if sv.rank() != 3 || sv.shape()[2] != g.value(p.w_input).shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_sequence",
            left: sv.shape().to_vec(),
            right: g.value(p.w_input).shape().to_vec(),
        });
    }
    let (n, t, f) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
    let hidden = g.value(p.w_hidden).shape()[0];
    let flat = g.reshape(sequence, &[n, t * f])?;
    let mut h = g.constant(Tensor::zeros(&[n, hidden]))?;
    let mut c = g.constant(Tensor::zeros(&[n, hidden]))?;
    for step in 0..t {
        let x = g.slice_cols(flat, step * f, (step + 1) * f)?;
        (h, c) = lstm_cell(g, x, h, c, p)?;
    }
    Ok(h)
}

/// One strided convolution block of the image encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl ConvBlock {
    /// Symmetric padding that keeps `ceil(size / stride)` outputs for odd kernels.
    pub fn padding(&self) -> usize {
        if self.kernel > self.stride {
            (self.kernel - 1) / 2
        } else {
            0
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

/// Bound parameters of the strided CNN encoder.
pub struct CnnParams {
    pub blocks: Vec<(ConvBlock, Var, Var)>,
    pub head_weights: Var,
    pub head_bias: Var,
}

/// Image `(n, h, w, 3)` → conv blocks with ELU → global average pool → dense + ELU.
///
/// Dropout on the head output is left to the caller.
pub fn cnn_encode(g: &mut Graph, image: Var, p: &CnnParams) -> Result<Var> {
    let mut x = image;
    for (block, kernel, bias) in &p.blocks {
        let pad = block.padding();
        x = g.conv2d(x, *kernel, *bias, block.stride, pad, pad)?;
        x = g.elu(x)?;
    }
    let pooled = g.global_avg_pool(x)?;
    let head = dense(g, pooled, p.head_weights, p.head_bias)?;
    g.elu(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap()).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = g.constant(eye).unwrap();
        let b0 = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = dense(&mut g, x, w, b0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let wz = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = g.constant(Tensor::new(&[2], vec![0.25, -7.0]).unwrap()).unwrap();
        let y = dense(&mut g, x, wz, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0, 0.25, -7.0]);
    }

    #[test]
    fn dense_random_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, w, b) = (rand_tensor(&[4, 3], &mut rng), rand_tensor(&[3, 5], &mut rng), rand_tensor(&[5], &mut rng));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = dense(&mut g, xv, wv, bv).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for p in 0..3 {
                    acc += x.data()[i * 3 + p] * w.data()[p * 5 + j];
                }
                assert!((g.value(y).data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elu_scalar_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap()).unwrap();
        let y = elu(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[10], &mut rng)).unwrap();
        assert_eq!(dropout(&mut g, x, 0.5, Mode::Infer, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&mut g, x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[100_000], 1.0)).unwrap();
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((frac - 0.5).abs() <= 0.01, "survivor fraction {frac}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn sliding_window(seq: &Tensor, ker: &Tensor, bias: &Tensor, pad: usize) -> Vec<f64> {
        let (n, t, c_in) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
        let (k, c_out) = (ker.shape()[0], ker.shape()[2]);
        let t_out = t + 2 * pad - k + 1;
        let mut out = vec![0.0; n * t_out * c_out];
        for b in 0..n {
            for s in 0..t_out {
                for o in 0..c_out {
                    let mut acc = bias.data()[o];
                    for dk in 0..k {
                        let src = s as isize + dk as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for c in 0..c_in {
                            acc += seq.data()[(b * t + src as usize) * c_in + c] * ker.data()[(dk * c_in + c) * c_out + o];
                        }
                    }
                    out[(b * t_out + s) * c_out + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv1d_identity_and_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = rand_tensor(&[2, 6, 3], &mut rng);
        let mut eye = Tensor::zeros(&[1, 3, 3]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        let mut g = Graph::new();
        let (s, k, b) = (
            g.constant(seq.clone()).unwrap(),
            g.constant(eye).unwrap(),
            g.constant(Tensor::zeros(&[3])).unwrap(),
        );
        let y = conv1d(&mut g, s, k, b, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), seq.data());

        let constant = Tensor::full(&[1, 8, 1], 2.5);
        let avg = Tensor::full(&[3, 1, 1], 1.0 / 3.0);
        let (s, k, b) = (
            g.constant(constant).unwrap(),
            g.constant(avg).unwrap(),
            g.constant(Tensor::zeros(&[1])).unwrap(),
        );
        let y = conv1d(&mut g, s, k, b, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 6, 1]);
        assert!(g.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn conv1d_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for padding in [Padding::Valid, Padding::Same] {
            let seq = rand_tensor(&[3, 10, 5], &mut rng);
            let ker = rand_tensor(&[3, 5, 4], &mut rng);
            let bias = rand_tensor(&[4], &mut rng);
            let mut g = Graph::new();
            let (s, k, b) = (g.constant(seq.clone()).unwrap(), g.constant(ker.clone()).unwrap(), g.constant(bias.clone()).unwrap());
            let y = conv1d(&mut g, s, k, b, padding).unwrap();
            let pad = if padding == Padding::Same { 1 } else { 0 };
            let oracle = sliding_window(&seq, &ker, &bias, pad);
            assert_eq!(g.value(y).len(), oracle.len());
            for (a, e) in g.value(y).data().iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 4, 2])).unwrap();
        let k = g.constant(Tensor::zeros(&[3, 3, 1])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        assert!(conv1d(&mut g, s, k, b, Padding::Same).is_err());
    }

    fn lstm_oracle(xs: &[Vec<f64>], wx: &Tensor, wh: &Tensor, b: &Tensor, hidden: usize) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for x in xs {
            let mut gates = vec![0.0; 4 * hidden];
            for (j, gate) in gates.iter_mut().enumerate() {
                let mut acc = b.data()[j];
                for (p, xp) in x.iter().enumerate() {
                    acc += xp * wx.data()[p * 4 * hidden + j];
                }
                for (p, hp) in h.iter().enumerate() {
                    acc += hp * wh.data()[p * 4 * hidden + j];
                }
                *gate = acc;
            }
            for u in 0..hidden {
                let i = sig(gates[u]);
                let f = sig(gates[hidden + u]);
                let cand = gates[2 * hidden + u].tanh();
                let o = sig(gates[3 * hidden + u]);
                c[u] = f * c[u] + i * cand;
                h[u] = o * c[u].tanh();
            }
        }
        h
    }

    #[test]
    fn lstm_zero_everything_is_zero() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::zeros(&[2, 4, 3])).unwrap();
        let p = LstmParams {
            w_input: g.constant(Tensor::zeros(&[3, 8])).unwrap(),
            w_hidden: g.constant(Tensor::zeros(&[2, 8])).unwrap(),
            bias: g.constant(Tensor::zeros(&[8])).unwrap(),
        };
        let h = lstm_sequence(&mut g, seq, &p).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_equals_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = rand_tensor(&[2, 3], &mut rng);
        let seq = g.constant(x.clone().reshape(&[2, 1, 3]).unwrap()).unwrap();
        let xv = g.constant(x).unwrap();
        let p = LstmParams {
            w_input: g.constant(rand_tensor(&[3, 16], &mut rng)).unwrap(),
            w_hidden: g.constant(rand_tensor(&[4, 16], &mut rng)).unwrap(),
            bias: g.constant(rand_tensor(&[16], &mut rng)).unwrap(),
        };
        let h_seq = lstm_sequence(&mut g, seq, &p).unwrap();
        let h0 = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let c0 = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let (h_cell, _) = lstm_cell(&mut g, xv, h0, c0, &p).unwrap();
        assert_eq!(g.value(h_seq).data(), g.value(h_cell).data());
    }

    #[test]
    fn lstm_matches_unrolled_gate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hidden = 4;
        let seq = rand_tensor(&[1, 3, 5], &mut rng);
        let wx = rand_tensor(&[5, 16], &mut rng);
        let wh = rand_tensor(&[4, 16], &mut rng);
        let b = rand_tensor(&[16], &mut rng);
        let mut g = Graph::new();
        let s = g.constant(seq.clone()).unwrap();
        let p = LstmParams {
            w_input: g.constant(wx.clone()).unwrap(),
            w_hidden: g.constant(wh.clone()).unwrap(),
            bias: g.constant(b.clone()).unwrap(),
        };
        let h = lstm_sequence(&mut g, s, &p).unwrap();
        let xs: Vec<Vec<f64>> = seq.data().chunks(5).map(<[f64]>::to_vec).collect();
        let oracle = lstm_oracle(&xs, &wx, &wh, &b, hidden);
        for (a, e) in g.value(h).data().iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    fn conv2d_oracle(img: &Tensor, ker: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
        let (n, h, w, c_in) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
        let (kh, kw, c_out) = (ker.shape()[0], ker.shape()[1], ker.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * ho * wo * c_out];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..c_out {
                        let mut acc = bias.data()[o];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..c_in {
                                    acc += img.data()[((b * h + iy as usize) * w + ix as usize) * c_in + c]
                                        * ker.data()[((ky * kw + kx) * c_in + c) * c_out + o];
                                }
                            }
                        }
                        out[((b * ho + oy) * wo + ox) * c_out + o] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (stride, k, pad) in [(1, 3, 1), (2, 3, 1), (4, 4, 0), (2, 2, 0)] {
            let img = rand_tensor(&[2, 9, 7, 3], &mut rng);
            let ker = rand_tensor(&[k, k, 3, 4], &mut rng);
            let bias = rand_tensor(&[4], &mut rng);
            let mut g = Graph::new();
            let (i, kv, bv) = (g.constant(img.clone()).unwrap(), g.constant(ker.clone()).unwrap(), g.constant(bias.clone()).unwrap());
            let y = g.conv2d(i, kv, bv, stride, pad, pad).unwrap();
            let (oracle, ho, wo) = conv2d_oracle(&img, &ker, &bias, stride, pad);
            assert_eq!(g.value(y).shape(), &[2, ho, wo, 4]);
            for (a, e) in g.value(y).data().iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cnn_zero_image_zero_bias_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 16, 16, 3])).unwrap();
        let blocks = [ConvBlock { kernel: 4, stride: 4, channels: 4 }, ConvBlock { kernel: 3, stride: 2, channels: 6 }];
        let mut c_in = 3;
        let mut bound = Vec::new();
        for b in blocks {
            let k = g.constant(rand_tensor(&[b.kernel, b.kernel, c_in, b.channels], &mut rng)).unwrap();
            let bias = g.constant(Tensor::zeros(&[b.channels])).unwrap();
            bound.push((b, k, bias));
            c_in = b.channels;
        }
        let p = CnnParams {
            blocks: bound,
            head_weights: g.constant(rand_tensor(&[6, 5], &mut rng)).unwrap(),
            head_bias: g.constant(Tensor::zeros(&[5])).unwrap(),
        };
        let f = cnn_encode(&mut g, img, &p).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 5]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_output_sizes() {
        let b = ConvBlock { kernel: 4, stride: 4, channels: 8 };
        assert_eq!(b.output_size(240), 60);
        let b = ConvBlock { kernel: 3, stride: 2, channels: 8 };
        assert_eq!(b.output_size(60), 30);
        assert_eq!(b.output_size(15), 8);
    }
}
