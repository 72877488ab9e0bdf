use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::nn::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cb1d(values: &[f32]) -> Codebook {
    Codebook::with_entries(Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()).unwrap()
}

fn gaussian_rows(n: usize, dim: usize, std: f64, r: &mut ChaCha8Rng) -> Vec<f32> {
    let g = Normal::new(0.0, std).unwrap();
    (0..n * dim).map(|_| g.sample(r) as f32).collect()
}

/// Nearest entry by an f64 scan over explicitly projected entries.
fn brute_force(cb: &Codebook, v: &[f32]) -> usize {
    let (k, d) = (cb.code_dim(), cb.dim());
    let z: Vec<f64> = (0..k)
        .map(|i| {
            cb.b_in.data()[i] as f64
                + (0..d)
                    .map(|j| cb.w_in.data()[i * d + j] as f64 * v[j] as f64)
                    .sum::<f64>()
        })
        .collect();
    let mut best = (usize::MAX, f64::INFINITY);
    for c in 0..cb.size() {
        let dist: f64 = cb
            .entry(c)
            .iter()
            .zip(&z)
            .map(|(&e, &x)| (e as f64 - x).powi(2))
            .sum();
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best.0
}

#[test]
fn kmeans_on_exactly_size_points_returns_them() {
    let pts: Vec<f32> = vec![0.0, 0.0, 1.0, 5.0, -3.0, 2.0, 7.0, 7.0];
    let cb = kmeans_init(&pts, 2, 4, 50, &mut rng(1)).unwrap();
    let mut got: Vec<(i64, i64)> = cb
        .entries
        .data()
        .chunks(2)
        .map(|c| (c[0] as i64, c[1] as i64))
        .collect();
    got.sort();
    assert_eq!(got, vec![(-3, 2), (0, 0), (1, 5), (7, 7)]);
}

#[test]
fn kmeans_finds_two_blob_means() {
    let mut r = rng(2);
    let mut pts = gaussian_rows(400, 2, 0.05, &mut r);
    for (i, p) in pts.chunks_mut(2).enumerate() {
        let off = if i % 2 == 0 { 3.0 } else { -2.0 };
        p[0] += off;
        p[1] -= off;
    }
    let mean = |par: usize| -> [f64; 2] {
        let rows: Vec<&[f32]> = pts
            .chunks(2)
            .enumerate()
            .filter(|(i, _)| i % 2 == par)
            .map(|(_, c)| c)
            .collect();
        let n = rows.len() as f64;
        [
            rows.iter().map(|c| c[0] as f64).sum::<f64>() / n,
            rows.iter().map(|c| c[1] as f64).sum::<f64>() / n,
        ]
    };
    let (m0, m1) = (mean(0), mean(1));
    let km = kmeans(&pts, 2, 2, 50, &mut r).unwrap();
    for m in [m0, m1] {
        let close = km
            .centroids
            .chunks(2)
            .any(|c| (c[0] as f64 - m[0]).hypot(c[1] as f64 - m[1]) < 0.05);
        assert!(close, "no centroid near {m:?}: {:?}", km.centroids);
    }
}

#[test]
fn kmeans_distortion_never_increases() {
    let mut r = rng(3);
    let pts = gaussian_rows(600, 3, 1.0, &mut r);
    let km = kmeans(&pts, 3, 16, 50, &mut r).unwrap();
    for w in km.distortion.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{:?}", km.distortion);
    }
    assert!(kmeans(&pts[..9], 3, 4, 5, &mut r).is_err());
}

#[test]
fn nearest_neighbour_hand_cases() {
    let cb = cb1d(&[0.0, 1.0]);
    assert_eq!(cb.quantize(&[0.4]).unwrap().0, 0);
    assert_eq!(
        cb.quantize(&[0.5]).unwrap().0,
        0,
        "tie goes to the lowest index"
    );
    assert_eq!(cb.quantize(&[0.6]).unwrap().0, 1);
    let cb = cb1d(&[3.0, -1.0, 2.5]);
    for j in 0..3 {
        let v = cb.entry(j).to_vec();
        let (c, q) = cb.quantize(&v).unwrap();
        assert_eq!(c, j);
        assert_eq!(q, v);
    }
    assert!(cb.quantize(&[1.0, 2.0]).is_err());
}

#[test]
fn factorized_lookup_matches_brute_force() {
    let mut r = rng(4);
    let cb = Codebook::new(24, 256, 8, &mut r).unwrap();
    let z = gaussian_rows(2000, 24, 1.0, &mut r);
    let q = cb.quantize_rows(&z).unwrap();
    for (i, v) in z.chunks(24).enumerate() {
        assert_eq!(q.codes[i] as usize, brute_force(&cb, v));
    }
    let one = cb.quantize(&z[..24]).unwrap();
    assert_eq!(one.0 as u32, q.codes[0]);
    assert_eq!(one.1.as_slice(), &q.q.data()[..24]);
    assert_eq!(cb.decode(&q.codes).unwrap(), q.q.data());
}

#[test]
fn ema_converges_geometrically_to_a_fixed_point() {
    let mut cb = cb1d(&[0.0, 10.0]);
    let x = 4.0f32;
    let d = cb.decay as f64;
    for t in 1..=50 {
        cb.ema_update(&[x, x], &[0, 0]).unwrap();
        // counts and sums follow c_t = d^t + (1 - d^t) * 2, s_t = (1 - d^t) * 2x
        let dt = d.powi(t);
        let expect = (1.0 - dt) * 2.0 * x as f64 / (dt + (1.0 - dt) * 2.0);
        assert!((cb.entry(0)[0] as f64 - expect).abs() < 1e-4, "step {t}");
    }
    let mut one = cb1d(&[0.0, 10.0]);
    for t in 1..=30 {
        one.ema_update(&[x], &[0]).unwrap();
        let expect = x as f64 * (1.0 - d.powi(t));
        assert!((one.entry(0)[0] as f64 - expect).abs() < 1e-4);
    }
    assert!(
        (one.entry(1)[0] - 10.0).abs() < 1e-4,
        "untouched entries keep their value"
    );
}

#[test]
fn ema_empty_batch_is_a_no_op() {
    let mut cb = cb1d(&[0.5, 1.5]);
    let before = cb.clone();
    cb.ema_update(&[], &[]).unwrap();
    assert_eq!(cb.entries, before.entries);
    assert_eq!(cb.ema_counts, before.ema_counts);
    assert!(cb.ema_update(&[1.0], &[0, 1]).is_err());
    assert!(cb.ema_update(&[1.0], &[7]).is_err());
}

#[test]
fn ema_tracks_cluster_means() {
    let mut r = rng(5);
    let means = [[2.0f32, 0.0], [-2.0, 1.0], [0.0, -3.0]];
    let mut cb =
        Codebook::with_entries(Tensor::new(&[3, 2], vec![1.0, 0.5, -1.0, 0.0, 0.5, -1.0]).unwrap())
            .unwrap();
    let g = Normal::new(0.0, 0.3).unwrap();
    for _ in 0..200 {
        let mut z = Vec::new();
        for _ in 0..96 {
            let m = means[r.random_range(0..3)];
            z.push(m[0] + g.sample(&mut r) as f32);
            z.push(m[1] + g.sample(&mut r) as f32);
        }
        let q = cb.quantize_rows(&z).unwrap();
        cb.ema_update(&z, &q.codes).unwrap();
    }
    for m in means {
        let best = (0..3)
            .map(|c| ((cb.entry(c)[0] - m[0]).powi(2) + (cb.entry(c)[1] - m[1]).powi(2)).sqrt())
            .fold(f32::INFINITY, f32::min);
        assert!(best < 0.05, "mean {m:?} missed by {best}");
    }
}

#[test]
fn expiration_contract() {
    let mut r = rng(6);
    let mut pool = DataPool::new(1, 8).unwrap();
    let mut cb = cb1d(&[0.0, 1.0, 2.0]);
    assert!(cb.expire_and_replace(&pool, &mut r).is_err());
    pool.push_rows(&[5.0, 6.0, 7.0]).unwrap();
    let before = cb.clone();
    assert_eq!(cb.expire_and_replace(&pool, &mut r).unwrap(), 0);
    assert_eq!(cb.entries, before.entries);

    cb.ema_counts.data_mut()[1] = 0.001;
    assert_eq!(cb.expire_and_replace(&pool, &mut r).unwrap(), 1);
    assert!([5.0, 6.0, 7.0].contains(&cb.entry(1)[0]));
    assert_eq!(cb.ema_counts.data()[1], 1.0);
    assert_eq!(cb.ema_sums.data()[1], cb.entry(1)[0]);
    assert_eq!(cb.entry(0)[0], 0.0);
}

#[test]
fn pool_overwrites_oldest_and_respects_capacity() {
    let mut p = DataPool::new(2, 3).unwrap();
    p.push_rows(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0])
        .unwrap();
    assert_eq!(p.len(), 3);
    assert_eq!(p.get(0), &[4.0, 4.0]);
    assert_eq!(p.get(1), &[2.0, 2.0]);
    p.push_rows(&[5.0, 5.0]).unwrap();
    assert_eq!(p.get(1), &[5.0, 5.0]);
    assert!(p.push_rows(&[1.0]).is_err());
    assert_eq!(DataPool::for_codebook(4, 1024).unwrap().capacity(), 32768);
    assert_eq!(DataPool::for_codebook(4, 65536).unwrap().capacity(), 65536);
}

#[test]
fn pool_sampling_is_uniform() {
    let mut p = DataPool::new(1, 100).unwrap();
    p.push_rows(&(0..100).map(|i| i as f32).collect::<Vec<_>>())
        .unwrap();
    let mut r = rng(7);
    let mut hist = [0usize; 100];
    let n = 100_000;
    for _ in 0..n {
        hist[p.sample(&mut r).unwrap()[0] as usize] += 1;
    }
    let e = n as f64 / 100.0;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 99 degrees of freedom.
    assert!(chi2 < 134.64, "chi2 {chi2}");
}

#[test]
fn utilization_hand_cases() {
    let zeros = CodeSequence::new(vec![0; 10], 1, 16, 50).unwrap();
    assert_eq!(utilization(&zeros, 16).mean, 1.0 / 16.0);
    let all = CodeSequence::new((0..16).collect(), 1, 16, 50).unwrap();
    assert_eq!(utilization(&all, 16).mean, 1.0);
    let two = CodeSequence::new(vec![0, 1, 0, 2, 0, 3], 2, 4, 50).unwrap();
    assert_eq!(utilization(&two, 4).per_stage, vec![0.25, 0.75]);

    let mut r = rng(8);
    let codes: Vec<u32> = (0..100_000).map(|_| r.random_range(0..1024)).collect();
    let u = utilization(&CodeSequence::new(codes, 1, 1024, 50).unwrap(), 1024).mean;
    let expect = 1.0 - (1.0 - 1.0 / 1024.0f64).powi(100_000);
    assert!((u - expect).abs() < 1e-3, "{u} vs {expect}");
}

#[test]
fn code_sequence_validation_and_bitrate() {
    assert!(CodeSequence::new(vec![1024], 1, 1024, 50).is_err());
    assert!(CodeSequence::new(vec![1, 2, 3], 2, 1024, 50).is_err());
    assert_eq!(bits_per_code(1024), 10);
    assert_eq!(bits_per_code(32768), 15);
    assert_eq!(bits_per_code(1000), 10);
    assert_eq!(bits_per_code(2), 1);
    let c = CodeSequence::new(vec![0; 24], 12, 1024, 50).unwrap();
    assert_eq!(c.kbps(), 6.0);
    assert_eq!(c.truncate_stages(8).unwrap().kbps(), 4.0);
    assert_eq!(QuantizerConfig::single().kbps(50, 1), 0.75);
    assert_eq!(QuantizerConfig::rvq().kbps(50, 1), 0.5);
}

#[test]
fn single_stage_is_plain_quantization() {
    let mut r = rng(9);
    let mut cfg = QuantizerConfig::rvq();
    cfg.n_stages = 1;
    cfg.codebook_size = 64;
    let stack = RvqStack::new(&cfg, 12, &mut r).unwrap();
    let z = Tensor::new(&[30, 12], gaussian_rows(30, 12, 1.0, &mut r)).unwrap();
    let enc = stack.encode(&z, 1, 50).unwrap();
    let q = stack.stages[0].quantize_rows(z.data()).unwrap();
    assert_eq!(enc.codes.as_slice(), q.codes.as_slice());
    assert_eq!(enc.z_q.data(), q.q.data());
    assert_eq!(stack.decode(&enc.codes).unwrap().data(), enc.z_q.data());
}

#[test]
fn constructed_two_stage_sum_is_exact() {
    let s0 =
        Codebook::with_entries(Tensor::new(&[2, 2], vec![4.0, 0.0, -4.0, 0.0]).unwrap()).unwrap();
    let s1 =
        Codebook::with_entries(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap()).unwrap();
    let mut cfg = QuantizerConfig::rvq();
    cfg.n_stages = 2;
    cfg.codebook_size = 2;
    let mut stack = RvqStack::new(&cfg, 2, &mut rng(10)).unwrap();
    stack.stages = vec![s0, s1];
    let z = Tensor::new(&[2, 2], vec![4.0, 1.0, -4.0, -1.0]).unwrap();
    let enc = stack.encode(&z, 2, 50).unwrap();
    assert_eq!(enc.codes.as_slice(), &[0, 0, 1, 1]);
    assert!(enc.residual.data().iter().all(|&v| v == 0.0));
    let one = stack.encode(&z, 1, 50).unwrap();
    assert_eq!(one.residual.data(), &[0.0, 1.0, 0.0, -1.0]);
}

#[test]
fn residual_error_does_not_grow_with_stages() {
    let mut r = rng(11);
    let mut cfg = QuantizerConfig::rvq();
    cfg.codebook_size = 32;
    cfg.kmeans_iters = 20;
    let z = Tensor::new(&[1000, 16], gaussian_rows(1000, 16, 1.0, &mut r)).unwrap();
    let mut stack = RvqStack::new(&cfg, 16, &mut r).unwrap();
    stack.init_kmeans(&z, &mut r).unwrap();
    let mut prev = z.sq_norm() as f64;
    for k in 1..=12 {
        let e = stack.encode(&z, k, 50).unwrap().residual.sq_norm() as f64;
        assert!(e <= prev * (1.0 + 1e-6), "stage {k}: {e} > {prev}");
        prev = e;
    }
}

#[test]
fn dropout_draws_cover_the_range() {
    let mut cfg = QuantizerConfig::rvq();
    cfg.codebook_size = 4;
    let stack = RvqStack::new(&cfg, 4, &mut rng(12)).unwrap();
    let mut r = rng(13);
    let draws: Vec<usize> = (0..4000).map(|_| stack.sample_active(&mut r)).collect();
    let full = draws.iter().filter(|&&n| n == 12).count() as f64 / 4000.0;
    // P(all stages) = 0.5 + 0.5 / 12.
    assert!((full - (0.5 + 0.5 / 12.0)).abs() < 0.03, "{full}");
    assert!((1..=12).all(|n| draws.contains(&n)));
}

#[test]
fn tape_quantization_passes_gradient_straight_through() {
    let mut r = rng(14);
    let mut cfg = QuantizerConfig::rvq();
    cfg.n_stages = 3;
    cfg.codebook_size = 16;
    let stack = RvqStack::new(&cfg, 6, &mut r).unwrap();
    let z = Tensor::new(&[5, 6], gaussian_rows(5, 6, 1.0, &mut r)).unwrap();
    let tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let out = stack.forward_tape(&tape, "q", zv, 3).unwrap();
    let enc = stack.encode(&z, 3, 50).unwrap();
    for s in 0..3 {
        assert_eq!(out.codes[s], enc.codes.stage(s));
    }
    let diff = out.z_q.value().zip_map(&enc.z_q, |a, b| a - b).max_abs();
    assert!(diff < 1e-5, "{diff}");

    let grads = tape.backward(out.z_q.sum()).unwrap();
    assert!(grads.get(zv).unwrap().max_abs() > 0.0);
    for name in ["q.stages.0.w_in", "q.stages.2.w_out", "q.stages.1.b_out"] {
        assert!(grads.by_name(name).is_some(), "{name}");
    }
}

#[test]
fn commitment_loss_values_and_gradient() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::new(&[2], vec![1.0f64, 0.0]).unwrap());
    let l = commitment_loss(z, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(l.item(), 0.5);
    let zq = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let tape2 = Tape::new();
    assert_eq!(
        commitment_loss(tape2.leaf(zq.clone()), &zq).unwrap().item(),
        0.0
    );
    assert!(commitment_loss(tape2.leaf(zq), &Tensor::zeros(&[3])).is_err());

    let x = Tensor::new(&[3], vec![0.3f64, -1.2, 2.0]).unwrap();
    let target = Tensor::new(&[3], vec![0.1, 0.4, -0.5]).unwrap();
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let g = tape.backward(commitment_loss(v, &target).unwrap()).unwrap();
    let g = g.get(v).unwrap();
    let h = 1e-6;
    for i in 0..3 {
        let f = |d: f64| {
            let mut y = x.clone();
            y.data_mut()[i] += d;
            y.zip_map(&target, |a, b| (a - b).powi(2)).sum() / 3.0
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((g.data()[i] - fd).abs() < 1e-8);
        assert!((g.data()[i] - 2.0 * (x.data()[i] - target.data()[i]) / 3.0).abs() < 1e-12);
    }
}

#[test]
fn training_update_replaces_dead_codes() {
    let mut r = rng(15);
    let mut cfg = QuantizerConfig::rvq();
    cfg.n_stages = 2;
    cfg.codebook_size = 8;
    let mut stack = RvqStack::new(&cfg, 4, &mut r).unwrap();
    for cb in &mut stack.stages {
        cb.ema_counts.data_mut()[3] = 0.0;
    }
    let z = Tensor::new(&[10, 4], gaussian_rows(10, 4, 1.0, &mut r)).unwrap();
    let tape = Tape::new();
    let out = stack.forward_tape(&tape, "q", tape.constant(z), 2).unwrap();
    let n = stack
        .update_codebooks(&out.stage_inputs, &out.stage_z_e, &out.codes, &mut r)
        .unwrap();
    let unused = out.codes.iter().filter(|c| !c.contains(&3)).count();
    assert_eq!(n, unused);
    assert_eq!(stack.pools[0].len(), 10);
    assert!(stack
        .stages
        .iter()
        .all(|cb| cb.ema_counts.data()[3] >= 0.01));
}

#[test]
fn least_squares_output_fit_recovers_an_affine_map() {
    let mut r = rng(16);
    let mut cb = Codebook::new(3, 6, 2, &mut r).unwrap();
    let w = [[1.0f32, -2.0], [0.5, 0.0], [0.0, 3.0]];
    let b = [0.1f32, -0.2, 0.3];
    let codes: Vec<u32> = (0..60).map(|i| (i % 6) as u32).collect();
    let samples: Vec<f32> = codes
        .iter()
        .flat_map(|&c| {
            let e = cb.entry(c as usize).to_vec();
            (0..3)
                .map(move |o| w[o][0] * e[0] + w[o][1] * e[1] + b[o])
                .collect::<Vec<_>>()
        })
        .collect();
    cb.fit_output_projection(&samples, &codes).unwrap();
    let dec = cb.decode(&codes).unwrap();
    for (a, s) in dec.iter().zip(&samples) {
        assert!((a - s).abs() < 1e-3, "{a} vs {s}");
    }
}

/// Zipf(1.5) cluster stream whose scale grows from 0.2 to 1 over the first
/// hundred steps; returns held-out utilization.
fn drifting_zipf_utilization(expire: bool, seed: u64) -> f64 {
    // An unused count reaches the 0.01 threshold after about 460 steps.
    let (size, dim, steps, batch) = (1024, 4, 700, 64);
    let mut r = rng(seed);
    let centers = gaussian_rows(4096, dim, 1.0, &mut r);
    let w: Vec<f64> = (1..=4096).map(|k| (k as f64).powf(-1.5)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let cdf: Vec<f64> = w
        .iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect();
    let g = Normal::new(0.0, 0.1).unwrap();
    let draw = |n: usize, scale: f32, r: &mut ChaCha8Rng| -> Vec<f32> {
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let k = cdf.partition_point(|&c| c < r.random::<f64>()).min(4095);
            out.extend((0..dim).map(|j| scale * (centers[k * dim + j] + g.sample(r) as f32)));
        }
        out
    };
    let scale = |t: usize| (0.2 + 0.8 * (t as f64 / 100.0).min(1.0)) as f32;
    let init = draw(size, scale(0), &mut r);
    let mut cb = Codebook::with_entries(Tensor::new(&[size, dim], init).unwrap()).unwrap();
    let mut pool = DataPool::for_codebook(dim, size).unwrap();
    for t in 0..steps {
        let x = draw(batch, scale(t), &mut r);
        let q = cb.quantize_rows(&x).unwrap();
        cb.ema_update(&x, &q.codes).unwrap();
        if expire {
            pool.push_rows(&x).unwrap();
            cb.expire_and_replace(&pool, &mut r).unwrap();
        }
    }
    let held_out = draw(10_000, scale(steps), &mut r);
    let q = cb.quantize_rows(&held_out).unwrap();
    utilization(&CodeSequence::new(q.codes, 1, size, 50).unwrap(), size).mean
}

#[test]
fn expiration_raises_utilization_on_a_skewed_stream() {
    for seed in 0..2 {
        let (without, with) = (
            drifting_zipf_utilization(false, seed),
            drifting_zipf_utilization(true, seed),
        );
        assert!(with > without, "seed {seed}: {with} <= {without}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_always_matches_brute_force(seed in 0u64..10_000, size in 2usize..40, dim in 1usize..10, k in 1usize..6) {
        let mut r = rng(seed);
        let cb = Codebook::new(dim, size, k, &mut r).unwrap();
        let v = gaussian_rows(1, dim, 2.0, &mut r);
        prop_assert_eq!(cb.quantize(&v).unwrap().0, brute_force(&cb, &v));
    }

    #[test]
    fn ema_counts_stay_nonnegative(seed in 0u64..10_000, steps in 1usize..20) {
        let mut r = rng(seed);
        let mut cb = Codebook::new(3, 5, 2, &mut r).unwrap();
        for _ in 0..steps {
            let z = gaussian_rows(7, 3, 1.0, &mut r);
            let q = cb.quantize_rows(&z).unwrap();
            cb.ema_update(&z, &q.codes).unwrap();
            prop_assert!(cb.ema_counts.data().iter().all(|&c| c >= 0.0));
            prop_assert!(cb.validate().is_ok());
        }
    }

    #[test]
    fn expiration_never_reduces_live_codes(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut cb = Codebook::new(2, 10, 2, &mut r).unwrap();
        for c in 0..10 {
            cb.ema_counts.data_mut()[c] = if r.random::<bool>() { 0.0 } else { 0.5 };
        }
        let live = 10 - cb.dead_codes().len();
        let mut pool = DataPool::new(2, 50).unwrap();
        pool.push_rows(&gaussian_rows(20, 2, 1.0, &mut r)).unwrap();
        cb.expire_and_replace(&pool, &mut r).unwrap();
        prop_assert!(10 - cb.dead_codes().len() >= live);
        prop_assert!(cb.dead_codes().is_empty());
    }
}
