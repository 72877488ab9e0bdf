use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layers::Params;
use crate::nn::{Tape, Tensor};

/// Same topology as the presets at a width that runs in milliseconds.
fn tiny() -> ModelConfig {
    let mut c = ModelConfig::mini();
    c.channels = vec![3, 4, 5, 6, 7];
    c.latent_dim = 7;
    c
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input<T: crate::nn::Real>(t: usize, seed: u64) -> Tensor<T> {
    Tensor::randn(&[2, t, 256], 0.5, &mut rng(seed))
}

#[test]
fn presets_are_valid_and_round_trip_through_json() {
    for cfg in [ModelConfig::base(), ModelConfig::mini()] {
        cfg.validate().unwrap();
        let js = cfg.to_json();
        for key in [
            "n_blocks",
            "channels",
            "kernels",
            "strides",
            "latent_dim",
            "frame_rate_out",
        ] {
            assert!(js.contains(&format!("\"{key}\"")), "{key} missing");
        }
        assert_eq!(ModelConfig::from_json(&js).unwrap(), cfg);
    }
    assert_eq!(ModelConfig::base().latent_dim, 1280);
    assert_eq!(ModelConfig::mini().latent_dim, 96);
    assert!(ModelConfig::preset("huge").is_err());
}

#[test]
fn json_without_optional_keys_uses_defaults() {
    let js = r#"{"n_blocks":4,"channels":[16,24,32,64,96],"kernels":[[3,4],[3,4],[3,4],[3,4]],
        "strides":[[1,4],[1,4],[1,4],[2,4]],"latent_dim":96,"frame_rate_out":50}"#;
    assert_eq!(ModelConfig::from_json(js).unwrap(), ModelConfig::mini());
}

#[test]
fn invalid_configs_name_the_problem() {
    let mut c = ModelConfig::mini();
    c.kernels[1] = (3, 5);
    let e = c.validate().unwrap_err().to_string();
    assert!(e.contains("block 1"), "{e}");

    let mut c = ModelConfig::mini();
    c.channels.pop();
    assert!(c.validate().is_err());

    let mut c = ModelConfig::mini();
    c.frame_rate_out = 25;
    assert!(c.validate().is_err());

    let mut c = ModelConfig::mini();
    c.latent_dim = 95;
    assert!(c.validate().is_err());

    let mut c = ModelConfig::mini();
    c.kernels[3] = (1, 4);
    let e = c.validate().unwrap_err().to_string();
    assert!(e.contains("block 3"), "{e}");
}

#[test]
fn frequency_chain_divides_by_four() {
    assert_eq!(
        ModelConfig::base().freq_chain().unwrap(),
        vec![256, 64, 16, 4, 1]
    );
    assert_eq!(
        ModelConfig::mini().freq_chain().unwrap(),
        vec![256, 64, 16, 4, 1]
    );
}

#[test]
fn one_second_gives_fifty_latent_frames() {
    let cfg = ModelConfig::base();
    let frames = (0..cfg.n_blocks).fold(100, |t, i| cfg.down_spec(i).out_frames(t));
    assert_eq!(frames, 50);
    let up = (0..cfg.n_blocks)
        .rev()
        .fold(frames, |t, i| cfg.up_spec(i).out_frames(t));
    assert_eq!(up, 100);

    let m = Model::<f32>::new(&ModelConfig::mini(), &mut rng(0)).unwrap();
    let z = m.encoder.forward(&input(100, 1)).unwrap();
    assert_eq!(z.shape(), &[50, 96]);
    let y = m.decoder.forward(&z).unwrap();
    assert_eq!(y.shape(), &[2, 100, 256]);
    assert!(y.all_finite());
}

#[test]
fn decoder_accepts_zero_latents() {
    let m = Model::<f32>::new(&tiny(), &mut rng(2)).unwrap();
    let y = m.decoder.forward(&Tensor::zeros(&[5, 7])).unwrap();
    assert_eq!(y.shape(), &[2, 10, 256]);
    assert!(y.all_finite());
}

#[test]
fn shape_errors() {
    let m = Model::<f32>::new(&tiny(), &mut rng(2)).unwrap();
    assert!(m.encoder.forward(&Tensor::zeros(&[2, 7, 256])).is_err());
    assert!(m.encoder.forward(&Tensor::zeros(&[2, 8, 257])).is_err());
    assert!(m.decoder.forward(&Tensor::zeros(&[3, 8])).is_err());
}

#[test]
fn round_trip_shape_for_many_lengths() {
    let m = Model::<f32>::new(&tiny(), &mut rng(3)).unwrap();
    for t in [2, 4, 6, 10, 16] {
        let y = m
            .decoder
            .forward(&m.encoder.forward(&input(t, t as u64)).unwrap())
            .unwrap();
        assert_eq!(y.shape(), &[2, t, 256]);
    }
}

#[test]
fn lookahead_is_one_frame_less_than_the_stride() {
    let m = Model::<f64>::new(&tiny(), &mut rng(4)).unwrap();
    let s = m.config().time_stride();
    assert_eq!(m.latency_frames(), s - 1);
    let t = 12;
    let x = input::<f64>(t, 5);
    let base = m.decoder.forward(&m.encoder.forward(&x).unwrap()).unwrap();
    for j in 0..t {
        let mut xp = x.clone();
        for c in 0..2 {
            for k in 0..256 {
                xp.data_mut()[(c * t + j) * 256 + k] += 1.0;
            }
        }
        let y = m.decoder.forward(&m.encoder.forward(&xp).unwrap()).unwrap();
        for mo in 0..t {
            let reach = s * (mo / s) + s - 1;
            let changed = (0..2).any(|c| {
                (0..256).any(|k| {
                    let i = (c * t + mo) * 256 + k;
                    y.data()[i] != base.data()[i]
                })
            });
            if reach < j {
                assert!(!changed, "output frame {mo} saw input frame {j}");
            }
            if mo == s * (j / s) {
                assert!(changed, "output frame {mo} should see input frame {j}");
            }
        }
    }
}

#[test]
fn encoder_is_causal() {
    let m = Model::<f64>::new(&tiny(), &mut rng(6)).unwrap();
    let x = input::<f64>(8, 7);
    let z = m.encoder.forward(&x).unwrap();
    let mut xp = x.clone();
    for c in 0..2 {
        for k in 0..256 {
            xp.data_mut()[(c * 8 + 7) * 256 + k] = -3.0;
        }
    }
    let zp = m.encoder.forward(&xp).unwrap();
    assert_eq!(&z.data()[..3 * 7], &zp.data()[..3 * 7]);
    assert_ne!(&z.data()[3 * 7..], &zp.data()[3 * 7..]);
}

#[test]
fn streaming_matches_batch_bitwise() {
    let m = Model::<f32>::new(&tiny(), &mut rng(8)).unwrap();
    let t = 14;
    let x = input::<f32>(t, 9);
    let z = m.encoder.forward(&x).unwrap();
    let y = m.decoder.forward(&z).unwrap();

    let mut r = rng(10);
    let mut es = m.encoder.stream().unwrap();
    let mut rows = Vec::new();
    let mut pos = 0;
    while pos < t {
        let n = r.random_range(0..=3).min(t - pos);
        let chunk = x.narrow_time(pos, pos + n);
        let out = m.encoder.push(&mut es, &chunk).unwrap();
        rows.extend_from_slice(out.data());
        pos += n;
    }
    assert_eq!(rows, z.data());

    let mut ds = m.decoder.stream().unwrap();
    let mut frames: Vec<Tensor<f32>> = Vec::new();
    let mut pos = 0;
    while pos < z.dim(0) {
        let n = r.random_range(0..=2).min(z.dim(0) - pos);
        let chunk = Tensor::new(&[n, 7], z.data()[pos * 7..(pos + n) * 7].to_vec()).unwrap();
        frames.push(m.decoder.push(&mut ds, &chunk).unwrap());
        pos += n;
    }
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    let streamed = Tensor::concat_time(&refs).unwrap();
    assert_eq!(streamed.data(), y.data());
}

#[test]
fn tape_forward_matches_batch_and_gradients_match_differences() {
    let mut m = Model::<f64>::new(&tiny(), &mut rng(11)).unwrap();
    let x = input::<f64>(4, 12);
    let target = input::<f64>(4, 13);
    let loss = |m: &Model<f64>| -> f64 {
        let y = m.decoder.forward(&m.encoder.forward(&x).unwrap()).unwrap();
        y.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / y.len() as f64
    };

    let tape = Tape::new();
    let z = m
        .encoder
        .forward_tape(&tape, "encoder", tape.constant(x.clone()))
        .unwrap();
    assert_eq!(z.value().data(), m.encoder.forward(&x).unwrap().data());
    let y = m.decoder.forward_tape(&tape, "decoder", z).unwrap();
    let l = y.mse_to(&target).unwrap();
    assert!((l.item() - loss(&m)).abs() < 1e-12);
    let grads = tape.backward(l).unwrap();

    let mut names = Vec::new();
    m.visit("", &mut |n, _| names.push(n.to_string()));
    for n in &names {
        assert!(grads.by_name(n).is_some(), "no gradient for {n}");
    }

    let probes = [
        "encoder.stem.weight",
        "encoder.blocks.2.rnn.gru.w_hh",
        "encoder.blocks.3.down.bias",
        "decoder.blocks.0.up.weight",
        "decoder.blocks.3.rnn.norm.gamma",
        "decoder.head.weight",
        "encoder.blocks.1.act.alpha",
    ];
    let h = 1e-5;
    for name in probes {
        let g = grads.by_name(name).unwrap().data()[0];
        let bump = |m: &mut Model<f64>, d: f64| {
            m.visit_mut("", &mut |n, t| {
                if n == name {
                    t.data_mut()[0] += d;
                }
            })
        };
        bump(&mut m, h);
        let lp = loss(&m);
        bump(&mut m, -2.0 * h);
        let lm = loss(&m);
        bump(&mut m, h);
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            (g - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
            "{name}: tape {g} vs difference {fd}"
        );
    }
}

#[test]
fn cost_matches_parameter_enumeration() {
    for cfg in [tiny(), ModelConfig::mini()] {
        let m = Model::<f32>::new(&cfg, &mut rng(14)).unwrap();
        let c = count_cost(&cfg).unwrap();
        assert_eq!(c.params, m.param_total());
        assert_eq!(c.encoder_params, m.encoder.param_total());
        assert_eq!(c.decoder_params, m.decoder.param_total());
        assert_eq!(c.flops_per_second_audio, 2.0 * c.macs_per_second as f64);
    }
}

#[test]
fn cost_of_a_single_block_config_by_hand() {
    let (a, b) = (5usize, 7usize);
    let cfg = ModelConfig {
        n_blocks: 1,
        channels: vec![a, b],
        kernels: vec![(3, 4)],
        strides: vec![(2, 4)],
        latent_dim: b,
        frame_rate_out: 50,
        input_bins: 4,
        input_frame_rate: 100,
        gru_hidden_scale: 1.0,
        rnn_residual: true,
    };
    let h = b;
    let rnn = 2 * b + (3 * h * (b + h) + 6 * h) + (h * b + b) + b;
    let enc = (2 * a * 9 + a) + a + (a * b * 12 + b) + b + rnn;
    let dec = rnn + (b * a * 12 + a) + a + (a * 2 * 9 + 2);
    let macs =
        2 * (2 * a * 9 * 100 * 4) + 2 * (a * b * 12 * 50) + 2 * 50 * (3 * h * (b + h) + h * b);
    let c = count_cost(&cfg).unwrap();
    assert_eq!(c.encoder_params, enc);
    assert_eq!(c.decoder_params, dec);
    assert_eq!(c.macs_per_second, macs);
    let m = Model::<f64>::new(&cfg, &mut rng(15)).unwrap();
    assert_eq!(m.param_total(), enc + dec);
}

#[test]
fn preset_parameter_counts_near_reported_sizes() {
    let mini = count_cost(&ModelConfig::mini()).unwrap().params as f64;
    let base = count_cost(&ModelConfig::base()).unwrap().params as f64;
    assert!((mini / 0.45e6 - 1.0).abs() <= 0.25, "mini {mini}");
    assert!((base / 70.61e6 - 1.0).abs() <= 0.25, "base {base}");
}

#[test]
fn doubling_channels_roughly_quadruples_parameters() {
    let one = count_cost(&ModelConfig::mini()).unwrap().params as f64;
    let two = count_cost(&ModelConfig::mini().scaled(2)).unwrap().params as f64;
    let r = two / one;
    assert!(r > 3.6 && r < 4.0, "ratio {r}");
}
