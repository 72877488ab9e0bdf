use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d_raw, conv_transpose2d_raw};
use super::*;
use crate::nn::gradcheck::check_gradients;
use crate::nn::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -2.0, 2.0, r)
}

fn at(x: &Tensor<f64>, c: usize, t: usize, f: usize) -> f64 {
    x.data()[(c * x.dim(1) + t) * x.dim(2) + f]
}

/// Nested-sum strided conv with `t_pad` leading zero frames.
fn direct_conv(
    spec: &Conv2dSpec,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    t_pad: i64,
) -> Tensor<f64> {
    let (kt, kf) = spec.kernel;
    let (st, sf) = spec.stride;
    let (t_in, f_in) = (x.dim(1) as i64, x.dim(2) as i64);
    let t_out = spec.out_frames(x.dim(1));
    let f_out = spec.out_freq(x.dim(2)).unwrap();
    let mut out = Tensor::zeros(&[spec.out_ch, t_out, f_out]);
    for co in 0..spec.out_ch {
        for i in 0..t_out {
            for j in 0..f_out {
                let mut s = b.data()[co];
                for ci in 0..spec.in_ch {
                    for a in 0..kt {
                        for bb in 0..kf {
                            let t = (st * i + a) as i64 - t_pad;
                            let f = (sf * j + bb) as i64 - spec.freq_pad.0 as i64;
                            if t < 0 || t >= t_in || f < 0 || f >= f_in {
                                continue;
                            }
                            let wv = w.data()[((co * spec.in_ch + ci) * kt + a) * kf + bb];
                            s += wv * at(x, ci, t as usize, f as usize);
                        }
                    }
                }
                out.data_mut()[(co * t_out + i) * f_out + j] = s;
            }
        }
    }
    out
}

/// Nested-sum transposed conv, output frames `[0, t_out)`.
fn direct_tconv(
    spec: &Conv2dSpec,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    t_out: usize,
) -> Tensor<f64> {
    let (kt, kf) = spec.kernel;
    let (st, sf) = spec.stride;
    let f_out = spec.out_freq(x.dim(2)).unwrap();
    let mut out = Tensor::zeros(&[spec.out_ch, t_out, f_out]);
    for co in 0..spec.out_ch {
        for t in 0..t_out {
            for f in 0..f_out {
                out.data_mut()[(co * t_out + t) * f_out + f] = b.data()[co];
            }
        }
    }
    for ci in 0..spec.in_ch {
        for i in 0..x.dim(1) {
            for j in 0..x.dim(2) {
                for co in 0..spec.out_ch {
                    for a in 0..kt {
                        for bb in 0..kf {
                            let t = st * i + a;
                            let f = (sf * j + bb) as i64 - spec.freq_pad.0 as i64;
                            if t >= t_out || f < 0 || f >= f_out as i64 {
                                continue;
                            }
                            let wv = w.data()[((ci * spec.out_ch + co) * kt + a) * kf + bb];
                            out.data_mut()[(co * t_out + t) * f_out + f as usize] +=
                                wv * at(x, ci, i, j);
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn conv_specs() -> Vec<(Conv2dSpec, usize)> {
    vec![
        (Conv2dSpec::new(2, 3, (3, 4), (1, 4)), 16),
        (Conv2dSpec::new(3, 2, (3, 4), (2, 4)), 16),
        (Conv2dSpec::new(2, 4, (3, 3), (1, 1)).with_freq_pad(1, 1), 8),
        (Conv2dSpec::new(4, 2, (2, 3), (2, 2)).with_freq_pad(0, 1), 8),
        (Conv2dSpec::new(1, 1, (1, 1), (1, 1)), 5),
    ]
}

#[test]
fn conv_identity_1x1() {
    let spec = Conv2dSpec::new(3, 3, (1, 1), (1, 1));
    let mut conv = Conv2d::<f64>::zeros(spec).unwrap();
    for c in 0..3 {
        conv.weight.data_mut()[c * 3 + c] = 1.0;
    }
    let x = rand_t(&[3, 5, 7], &mut rng(1));
    assert_eq!(conv.forward(&x).unwrap().data(), x.data());
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng(2);
    for (spec, f) in conv_specs() {
        let conv = Conv2d::<f64>::new(spec, &mut r).unwrap();
        let x = rand_t(&[spec.in_ch, 7, f], &mut r);
        let fast = conv.forward(&x).unwrap();
        let slow = direct_conv(&spec, &x, &conv.weight, &conv.bias, spec.time_pad() as i64);
        assert!(max_diff(&fast, &slow) <= 1e-12, "{spec:?}");
    }
}

#[test]
fn stride_arithmetic() {
    let spec = Conv2dSpec::new(1, 1, (3, 4), (1, 4));
    assert_eq!(spec.out_freq(256).unwrap(), 64);
    assert!(spec.out_freq(255).is_err());
    assert_eq!(spec.transposed().out_freq(1).unwrap(), 4);
    assert_eq!(Conv2dSpec::new(1, 1, (3, 4), (2, 4)).out_frames(100), 50);
    assert_eq!(
        Conv2dSpec::new(1, 1, (3, 4), (2, 4))
            .transposed()
            .out_frames(50),
        100
    );
    let x = Tensor::<f64>::zeros(&[1, 4, 255]);
    let conv = Conv2d::zeros(spec).unwrap();
    assert!(conv.forward(&x).is_err());
}

#[test]
fn transposed_matches_direct_sum() {
    let mut r = rng(3);
    for (spec, f) in conv_specs() {
        let spec = spec.transposed();
        let conv = Conv2d::<f64>::new(spec, &mut r).unwrap();
        let x = rand_t(&[spec.in_ch, 6, f], &mut r);
        let fast = conv.forward(&x).unwrap();
        let slow = direct_tconv(&spec, &x, &conv.weight, &conv.bias, spec.out_frames(6));
        assert!(max_diff(&fast, &slow) <= 1e-12, "{spec:?}");
    }
}

#[test]
fn transposed_is_adjoint_of_strided() {
    let mut r = rng(4);
    for (spec, f) in conv_specs() {
        let spec = spec.non_causal();
        let (kt, st) = (spec.kernel.0, spec.stride.0);
        let t = kt + 3 * st;
        let x = rand_t(&[spec.in_ch, t, f], &mut r);
        let w = rand_t(&spec.weight_shape(), &mut r);
        let zero_out = Tensor::zeros(&[spec.out_ch]);
        let (y, _, _) = conv2d_raw(&spec, &x, &w, &zero_out, 0).unwrap();
        let v = rand_t(y.shape(), &mut r);

        let mut tspec = spec.transposed();
        tspec.in_ch = spec.out_ch;
        tspec.out_ch = spec.in_ch;
        let zero_in = Tensor::zeros(&[spec.in_ch]);
        let (xt, _) =
            conv_transpose2d_raw(&tspec, &v, &w, &zero_in, 0, tspec.out_frames(y.dim(1))).unwrap();
        assert_eq!(xt.shape(), x.shape());
        let lhs = y.dot(&v);
        let rhs = x.dot(&xt);
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
            "{spec:?}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn delta_weights_upsample_with_zeros() {
    let spec = Conv2dSpec::new(2, 2, (1, 4), (1, 4)).transposed();
    let mut conv = Conv2d::<f64>::zeros(spec).unwrap();
    for c in 0..2 {
        // w[c, c, 0, 0] = 1
        conv.weight.data_mut()[(c * 2 + c) * 4] = 1.0;
    }
    let x = rand_t(&[2, 3, 5], &mut rng(5));
    let y = conv.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 3, 20]);
    for c in 0..2 {
        for t in 0..3 {
            for f in 0..20 {
                let expect = if f % 4 == 0 { at(&x, c, t, f / 4) } else { 0.0 };
                assert_eq!(at(&y, c, t, f), expect);
            }
        }
    }
}

#[test]
fn convs_are_causal() {
    let mut r = rng(6);
    for (spec, f) in conv_specs() {
        for spec in [spec, spec.transposed()] {
            let conv = Conv2d::<f64>::new(spec, &mut r).unwrap();
            let t = 10;
            let x = rand_t(&[spec.in_ch, t, f], &mut r);
            let y = conv.forward(&x).unwrap();
            for t0 in 1..t {
                let mut xp = x.clone();
                for c in 0..spec.in_ch {
                    for ti in t0..t {
                        for fi in 0..f {
                            xp.data_mut()[(c * t + ti) * f + fi] += r.random_range(-1.0..1.0);
                        }
                    }
                }
                let yp = conv.forward(&xp).unwrap();
                let safe = if spec.transposed {
                    spec.stride.0 * t0
                } else {
                    t0 / spec.stride.0
                };
                let (fo, to) = (y.dim(2), y.dim(1));
                for c in 0..spec.out_ch {
                    for ti in 0..safe.min(to) {
                        for fi in 0..fo {
                            assert_eq!(at(&y, c, ti, fi), at(&yp, c, ti, fi), "{spec:?} t0={t0}");
                        }
                    }
                }
            }
        }
    }
}

fn random_chunks(total: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = r.random_range(0..=4).min(left);
        out.push(n);
        left -= n;
    }
    out
}

#[test]
fn conv_streaming_matches_batch_bitwise() {
    let mut r = rng(7);
    for (spec, f) in conv_specs() {
        for spec in [spec, spec.transposed()] {
            let conv = Conv2d::<f32>::new(spec, &mut r).unwrap();
            let t = 12;
            let x = Tensor::<f32>::uniform(&[spec.in_ch, t, f], -2.0, 2.0, &mut r);
            let batch = conv.forward(&x).unwrap();
            let mut st = conv.stream(f).unwrap();
            let mut parts = Vec::new();
            let mut pos = 0;
            for n in random_chunks(t, &mut r) {
                parts.push(conv.push(&mut st, &x.narrow_time(pos, pos + n)).unwrap());
                pos += n;
            }
            let refs: Vec<_> = parts.iter().collect();
            let streamed = Tensor::concat_time(&refs).unwrap();
            assert_eq!(streamed.shape(), batch.shape(), "{spec:?}");
            assert_eq!(streamed.data(), batch.data(), "{spec:?}");
        }
    }
}

#[test]
fn conv_gradients() {
    let mut r = rng(8);
    for (spec, f) in conv_specs() {
        for spec in [spec, spec.transposed()] {
            let x = rand_t(&[spec.in_ch, 5, f], &mut r);
            let w = rand_t(&spec.weight_shape(), &mut r);
            let b = rand_t(&[spec.out_ch], &mut r);
            let report = check_gradients(
                &[x, w, b],
                |_, v| {
                    let y = if spec.transposed {
                        let n = spec.out_frames(5);
                        conv_transpose2d(&spec, v[0], v[1], v[2], 0, n)?
                    } else {
                        conv2d(&spec, v[0], v[1], v[2], spec.time_pad())?
                    };
                    Ok(y.tanh().sum())
                },
                1e-5,
            )
            .unwrap();
            assert!(report.worst_rel() < 1e-6, "{spec:?}: {report:?}");
        }
    }
}

#[test]
fn gru_zero_weights() {
    let gru = Gru::<f64>::zeros(GruSpec {
        input_size: 3,
        hidden_size: 4,
    });
    let x = rand_t(&[2, 3], &mut rng(9));
    let h = rand_t(&[2, 4], &mut rng(10));
    let out = gru.forward_step(&x, &h).unwrap();
    for (o, p) in out.data().iter().zip(h.data()) {
        assert!((o - 0.5 * p).abs() < 1e-15);
    }
    let out = gru.forward_step(&x, &Tensor::zeros(&[2, 4])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_stepwise_equals_sequence_and_stays_bounded() {
    let mut r = rng(11);
    let spec = GruSpec {
        input_size: 3,
        hidden_size: 5,
    };
    let gru = Gru::<f64>::new(spec, &mut r);
    let x = Tensor::<f64>::uniform(&[6, 2, 3], -3.0, 3.0, &mut r);
    let mut h = vec![0.0; 10];
    let seq = gru.forward_seq(&x, &mut h).unwrap();

    // Hand-unrolled loop over the gate equations.
    let w_ih = gru.w_ih.data();
    let w_hh = gru.w_hh.data();
    let (b_ih, b_hh) = (gru.b_ih.data(), gru.b_hh.data());
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut hs = vec![vec![0.0; 5]; 2];
    for t in 0..6 {
        for b in 0..2 {
            let xv = &x.data()[(t * 2 + b) * 3..(t * 2 + b + 1) * 3];
            let prev = hs[b].clone();
            let lin = |w: &[f64], bias: &[f64], v: &[f64], row: usize| {
                bias[row]
                    + (0..v.len())
                        .map(|k| w[row * v.len() + k] * v[k])
                        .sum::<f64>()
            };
            for j in 0..5 {
                let rg = sig(lin(w_ih, b_ih, xv, j) + lin(w_hh, b_hh, &prev, j));
                let zg = sig(lin(w_ih, b_ih, xv, 5 + j) + lin(w_hh, b_hh, &prev, 5 + j));
                let ng = (lin(w_ih, b_ih, xv, 10 + j) + rg * lin(w_hh, b_hh, &prev, 10 + j)).tanh();
                hs[b][j] = (1.0 - zg) * ng + zg * prev[j];
                let got = seq.data()[(t * 2 + b) * 5 + j];
                assert!((got - hs[b][j]).abs() < 1e-12);
                assert!(got.abs() <= 1.0);
            }
        }
    }

    let mut h = Tensor::zeros(&[2, 5]);
    for t in 0..6 {
        let xt = Tensor::new(&[2, 3], x.data()[t * 6..(t + 1) * 6].to_vec()).unwrap();
        h = gru.forward_step(&xt, &h).unwrap();
    }
    assert_eq!(h.data(), &seq.data()[5 * 10..]);
}

#[test]
fn gru_gradients() {
    let mut r = rng(12);
    let spec = GruSpec {
        input_size: 3,
        hidden_size: 4,
    };
    let inputs = vec![
        rand_t(&[5, 2, 3], &mut r),
        rand_t(&[12, 3], &mut r),
        rand_t(&[12, 4], &mut r),
        rand_t(&[12], &mut r),
        rand_t(&[12], &mut r),
    ];
    let report = check_gradients(
        &inputs,
        |_, v| {
            Ok(gru_sequence(spec, v[0], v[1], v[2], v[3], v[4])?
                .sin()
                .sum())
        },
        1e-5,
    )
    .unwrap();
    assert!(report.worst_rel() < 1e-6, "{report:?}");
}

#[test]
fn flnorm_statistics() {
    let mut r = rng(13);
    let norm = FLNorm::<f64>::new(4);
    let x = Tensor::<f64>::uniform(&[4, 6, 9], -5.0, 7.0, &mut r);
    let y = norm.normalize(&x).unwrap();
    for t in 0..6 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|c| (0..9).map(move |f| (c, f)))
            .map(|(c, f)| at(&y, c, t, f))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn flnorm_hand_cases() {
    let norm = FLNorm::<f64>::new(2);
    let y = norm.forward(&Tensor::full(&[2, 3, 4], 3.5)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = Tensor::new(&[2, 1, 1], vec![1.0, -1.0]).unwrap();
    let y = norm.forward(&x).unwrap();
    let expect = 1.0 / (1.0 + FLNORM_EPS).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-15);
    assert!((y.data()[1] + expect).abs() < 1e-15);
}

#[test]
fn flnorm_commutes_with_position_permutation() {
    let mut r = rng(14);
    let norm = FLNorm::<f64>::new(3);
    let x = rand_t(&[3, 2, 4], &mut r);
    let y = norm.normalize(&x).unwrap();
    // Swap (c=0, f=1) with (c=2, f=3) in every frame.
    let swap = |v: &Tensor<f64>| {
        let mut w = v.clone();
        for t in 0..2 {
            let a = (0 * 2 + t) * 4 + 1;
            let b = (2 * 2 + t) * 4 + 3;
            w.data_mut().swap(a, b);
        }
        w
    };
    let yp = norm.normalize(&swap(&x)).unwrap();
    assert!(max_diff(&swap(&y), &yp) < 1e-12);
}

#[test]
fn flnorm_gradients() {
    let mut r = rng(15);
    let inputs = vec![
        rand_t(&[3, 4, 5], &mut r),
        rand_t(&[3], &mut r),
        rand_t(&[3], &mut r),
    ];
    let report = check_gradients(
        &inputs,
        |_, v| Ok(flnorm(v[0], v[1], v[2], FLNORM_EPS)?.sin().sum()),
        1e-5,
    )
    .unwrap();
    assert!(report.worst_rel() < 1e-6, "{report:?}");
}

#[test]
fn snake_values_and_gradients() {
    let s = Snake2d::<f64>::new(1);
    let x = Tensor::new(&[1, 1, 2], vec![0.0, std::f64::consts::FRAC_PI_2]).unwrap();
    let y = s.forward(&x).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - (std::f64::consts::FRAC_PI_2 + 1.0)).abs() < 1e-15);

    let mut r = rng(16);
    let x = rand_t(&[3, 4, 5], &mut r);
    let a = Tensor::<f64>::uniform(&[3], 0.3, 2.0, &mut r);
    let report = check_gradients(
        &[x, a],
        |_, v| Ok(snake2d(v[0], v[1])?.square().sum()),
        1e-5,
    )
    .unwrap();
    assert!(report.worst_rel() < 1e-6, "{report:?}");
}

#[test]
fn rnn2d_zero_in_zero_out() {
    let mut block = Rnn2dBlock::<f64>::new(3, 4, 5, true, &mut rng(17)).unwrap();
    block.gru = Gru::zeros(block.gru.spec);
    block.proj = Conv2d::zeros(block.proj.spec).unwrap();
    block.norm.gamma = Tensor::zeros(&[3]);
    let y = block.forward(&Tensor::zeros(&[3, 6, 4])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rnn2d_causal_and_streamable() {
    let mut r = rng(18);
    let block = Rnn2dBlock::<f32>::new(3, 4, 5, true, &mut r).unwrap();
    let x = Tensor::<f32>::uniform(&[3, 9, 4], -2.0, 2.0, &mut r);
    let y = block.forward(&x).unwrap();

    let mut xp = x.clone();
    for c in 0..3 {
        for f in 0..4 {
            xp.data_mut()[(c * 9 + 8) * 4 + f] += 1.0;
        }
    }
    let yp = block.forward(&xp).unwrap();
    assert_eq!(y.narrow_time(0, 8).data(), yp.narrow_time(0, 8).data());
    assert_ne!(y.narrow_time(8, 9).data(), yp.narrow_time(8, 9).data());

    let mut st = block.stream();
    let mut parts = Vec::new();
    let mut pos = 0;
    for n in random_chunks(9, &mut r) {
        parts.push(block.push(&mut st, &x.narrow_time(pos, pos + n)).unwrap());
        pos += n;
    }
    let refs: Vec<_> = parts.iter().collect();
    let s = Tensor::concat_time(&refs).unwrap();
    assert_eq!(s.data(), y.data());
}

#[test]
fn rnn2d_tape_matches_batch_and_gradients() {
    let mut r = rng(19);
    let block = Rnn2dBlock::<f64>::new(2, 3, 3, true, &mut r).unwrap();
    let x = rand_t(&[2, 4, 3], &mut r);
    let tape = Tape::new();
    let y = block
        .forward_tape(&tape, "b", tape.constant(x.clone()))
        .unwrap();
    assert_eq!(y.value().data(), block.forward(&x).unwrap().data());

    let report = check_gradients(
        &[x.clone()],
        |tape, v| Ok(block.forward_tape(tape, "b", v[0])?.square().sum()),
        1e-5,
    )
    .unwrap();
    assert!(report.worst_rel() < 1e-6, "{report:?}");

    let tape = Tape::new();
    let loss = block
        .forward_tape(&tape, "b", tape.constant(x))
        .unwrap()
        .square()
        .sum();
    let g = tape.backward(loss).unwrap();
    let mut names = Vec::new();
    block.visit("b", &mut |n, t| {
        assert_eq!(
            g.by_name(n).map(|g| g.shape().to_vec()),
            Some(t.shape().to_vec()),
            "{n}"
        );
        names.push(n.to_string());
    });
    assert_eq!(names.len(), 9);
}
