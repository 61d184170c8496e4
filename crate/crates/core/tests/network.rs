use mdrnet::mdr::NormalizedMdr;
use mdrnet::network::{
    build_model, dense_forward, encode_slice, generator_forward, init_params, Architecture, ConvLstmParams, DenseStack,
    GeneratorParams, Mode, Readout,
};
use mdrnet::Descriptor;
use mdrnet_tensor::{grad_check, GradCheckOptions, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    Architecture {
        encoder_channels: vec![1, 2, 3, 4],
        ..Architecture::default()
    }
}

fn randomize(t: &mut Tensor, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[C, 2, 2]` 3×3 zero-padded convolution by explicit loops.
fn conv3(w: &Tensor, x: &Tensor) -> Vec<f64> {
    let c = x.shape()[0];
    let s = x.shape()[1];
    let mut out = vec![0.0; c * s * s];
    for o in 0..c {
        for r in 0..s {
            for col in 0..s {
                let mut acc = 0.0;
                for i in 0..c {
                    for a in 0..3 {
                        for b in 0..3 {
                            let (rr, cc) = (r as isize + a as isize - 1, col as isize + b as isize - 1);
                            if rr < 0 || cc < 0 || rr >= s as isize || cc >= s as isize {
                                continue;
                            }
                            acc += w.at(&[o, i, a, b]) * x.at(&[i, rr as usize, cc as usize]);
                        }
                    }
                }
                out[(o * s + r) * s + col] = acc;
            }
        }
    }
    out
}

/// Scalar-loop peephole ConvLSTM step; returns `(H, C)`.
fn reference_step(p: &ConvLstmParams, x: &Tensor, h: &Tensor, c: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape()[1];
    let area = s * s;
    let gate = |wx: &Tensor, wh: &Tensor, b: &Tensor| -> Vec<f64> {
        let (a, bb) = (conv3(wx, x), conv3(wh, h));
        (0..a.len()).map(|j| a[j] + bb[j] + b.data()[j / area]).collect()
    };
    let (pi, pf, pc, po) = (
        gate(&p.w_xi, &p.w_hi, &p.b_i),
        gate(&p.w_xf, &p.w_hf, &p.b_f),
        gate(&p.w_xc, &p.w_hc, &p.b_c),
        gate(&p.w_xo, &p.w_ho, &p.b_o),
    );
    let mut hs = vec![0.0; pi.len()];
    let mut cs = vec![0.0; pi.len()];
    for j in 0..pi.len() {
        let cp = c.data()[j];
        let i = sig(pi[j] + p.w_ci.data()[j] * cp);
        let f = sig(pf[j] + p.w_cf.data()[j] * cp);
        let cn = f * cp + i * pc[j].tanh();
        let o = sig(po[j] + p.w_co.data()[j] * cn);
        cs[j] = cn;
        hs[j] = o * cn.tanh();
    }
    (hs, cs)
}

/// Surfaces tensor errors to the gradient checker; anything else is a bug
/// in the test setup.
fn tensor_result<T>(r: mdrnet::Result<T>) -> mdrnet_tensor::Result<T> {
    r.map_err(|e| match e {
        mdrnet::CoreError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn convlstm_matches_scalar_reference() {
    let arch = small_arch();
    assert_eq!(arch.latent_shape(), [4, 2, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let (mut gen, _) = init_params(&arch, Mode::Full, 3, draw);
        for t in gen.tensors_mut() {
            randomize(t, &mut rng);
        }
        let lstm = gen.lstm.unwrap();
        let x = random_tensor(&[4, 2, 2], &mut rng);
        let h = random_tensor(&[4, 2, 2], &mut rng);
        let c = random_tensor(&[4, 2, 2], &mut rng);
        let (h1, c1) = lstm.step(&x, &h, &c).unwrap();
        let (rh, rc) = reference_step(&lstm, &x, &h, &c);
        for (a, b) in h1.data().iter().zip(&rh).chain(c1.data().iter().zip(&rc)) {
            worst = worst.max(rel(*a, *b));
        }
    }
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

#[test]
fn zero_weights_halve_the_cell_state() {
    let arch = small_arch();
    let lstm = GeneratorParams::zeros(&arch, true).lstm.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[4, 2, 2], &mut rng);
    let h = random_tensor(&[4, 2, 2], &mut rng);
    let c = random_tensor(&[4, 2, 2], &mut rng);
    let (h1, c1) = lstm.step(&x, &h, &c).unwrap();
    for ((&cn, &cp), &hn) in c1.data().iter().zip(c.data()).zip(h1.data()) {
        assert_eq!(cn, 0.5 * cp);
        assert_eq!(hn, 0.5 * (0.5 * cp).tanh());
    }
    // From the zero state every gate is one half and nothing accumulates.
    let zero = Tensor::zeros(&[4, 2, 2]);
    let (h0, c0) = lstm.step(&x, &zero, &zero).unwrap();
    assert!(h0.data().iter().chain(c0.data()).all(|&v| v == 0.0));
}

#[test]
fn first_step_shortcut_equals_explicit_zero_state() {
    let arch = small_arch();
    let (mut gen, _) = init_params(&arch, Mode::Full, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in gen.tensors_mut() {
        randomize(t, &mut rng);
    }
    let mdr = NormalizedMdr::from_cells(3, 30, (0..2700).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let z = gen.generate_descriptor(&arch, &mdr, Readout::Cell).unwrap();

    // Manual unroll with explicit zero states through the tensor-level API.
    let lstm = gen.lstm.as_ref().unwrap();
    let mut h = Tensor::zeros(&[4, 2, 2]);
    let mut c = Tensor::zeros(&[4, 2, 2]);
    for s in 0..3 {
        let slice = Tensor::new(&[1, 30, 30], mdr.slice(s).to_vec()).unwrap();
        let feat = encode_slice(&gen.encoder, &arch, &slice).unwrap();
        (h, c) = lstm.step(&feat, &h, &c).unwrap();
    }
    assert_eq!(z.as_slice(), c.data());
    let zh = gen.generate_descriptor(&arch, &mdr, Readout::Hidden).unwrap();
    assert_eq!(zh.as_slice(), h.data());
}

#[test]
fn standard_encoder_yields_256_by_2_by_2() {
    let model = build_model(Mode::Full, 4, 3, 0);
    let slice = Tensor::from_fn(&[1, 30, 30], |i| (i % 7) as f64 / 7.0);
    let out = encode_slice(&model.generator.encoder, &model.arch, &slice).unwrap();
    assert_eq!(out.shape(), [256, 2, 2]);
    let shapes: Vec<&[usize]> = model
        .generator
        .encoder
        .layers
        .iter()
        .map(|l| l.weight.shape())
        .collect();
    assert_eq!(
        shapes,
        [&[32, 1, 4, 4][..], &[64, 32, 4, 4], &[128, 64, 4, 4], &[256, 128, 4, 4]]
    );
    assert!(encode_slice(&model.generator.encoder, &model.arch, &Tensor::zeros(&[1, 28, 30])).is_err());
}

#[test]
fn batched_descriptors_match_single_sequences() {
    let arch = small_arch();
    let model = mdrnet::Model::build(Mode::Full, arch.clone(), 3, 1, Readout::Cell, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mdrs: Vec<NormalizedMdr> = (0..5)
        .map(|_| NormalizedMdr::from_cells(3, 30, (0..2700).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&NormalizedMdr> = mdrs.iter().collect();
    let batched = model.descriptors(&refs).unwrap();
    for (m, d) in mdrs.iter().zip(&batched) {
        let single = model.generator.generate_descriptor(&arch, m, Readout::Cell).unwrap();
        for (a, b) in single.as_slice().iter().zip(d.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn zero_parameters_give_uniform_softmax() {
    let arch = Architecture::default();
    let head = DenseStack::zeros(&[1024, 128, 64, 5]);
    let logits = head.discriminate(&Descriptor::new(vec![0.3; 1024]), 0.2).unwrap();
    let p = mdrnet_tensor::softmax(logits.data());
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(head.discriminate(&Descriptor::new(vec![0.0; 10]), 0.2).is_err());

    let gen = GeneratorParams::zeros(&arch, false);
    let mdr = NormalizedMdr::from_cells(9, 30, vec![0.0; 8100]).unwrap();
    let z = gen.generate_descriptor(&arch, &mdr, Readout::Cell).unwrap();
    let cnn_only = DenseStack::zeros(&[1024, 128, 4]);
    let p = mdrnet_tensor::softmax(cnn_only.discriminate(&z, 0.2).unwrap().data());
    assert_eq!(p, vec![0.25; 4]);
}

/// Tiny configuration whose full loss can be finite-differenced cheaply:
/// 8×8 slices, channels 2-2-3-3 (8→4→2→1→1), descriptor length 3.
#[test]
fn end_to_end_gradient_check() {
    let arch = Architecture {
        slice_side: 8,
        encoder_channels: vec![2, 2, 3, 3],
        ..Architecture::default()
    };
    assert_eq!(arch.latent_shape(), [3, 1, 1]);
    for mode in [Mode::Full, Mode::CnnAdv] {
        let (mut gen, _) = init_params(&arch, mode, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for t in gen.tensors_mut() {
            randomize(t, &mut rng);
        }
        let mut head = DenseStack::zeros(&[3, 4, 3, 3]);
        for t in head.tensors_mut() {
            randomize(t, &mut rng);
        }
        let mdrs: Vec<NormalizedMdr> = (0..2)
            .map(|_| NormalizedMdr::from_cells(3, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let n_gen = gen.tensors_mut().len();
        let inputs: Vec<Tensor> = gen
            .named_tensors()
            .into_iter()
            .chain(head.named_tensors())
            .map(|(_, t)| t.clone())
            .collect();
        let report = grad_check(
            |tape: &mut Tape, vars| {
                let g = tensor_result(gen.bind_vars(&vars[..n_gen]))?;
                let d = tensor_result(head.bind_vars(&vars[n_gen..]))?;
                let refs: Vec<&NormalizedMdr> = mdrs.iter().collect();
                let z = tensor_result(generator_forward(tape, &arch, &g, &refs, Readout::Cell))?;
                let logits = tensor_result(dense_forward(tape, &d, z, arch.leaky_slope))?;
                tape.softmax_cross_entropy(logits, &[0, 2])
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{mode}: {report:?}");
    }
}
