//! Temporary timing probe; removed before release.

use std::time::Instant;

use codnet::bam::Bam;
use codnet::cbfm::Cbfm;
use codnet::nn::{ConvBnRelu, Mode};
use codnet::rfem::Rfem;
use codnet::tape::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn feat(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(shape), |ix| {
        ((ix[0] * 31 + ix[1] * 17 + ix[2] * 7 + ix[3] * 3) % 13) as f32 * 0.11 - 0.5
    })
}

fn bench<F: FnMut() -> Tape<f32>>(label: &str, mut run: F) {
    // One warmup, then three timed runs.
    let _ = run();
    let t = Instant::now();
    for _ in 0..3 {
        let _ = run();
    }
    println!("{label}: {:?}", t.elapsed() / 3);
}

#[test]
#[ignore]
fn time_modules() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);

    // Conv blocks at the decoder's dominant shape: 64ch, 32x32, batch 16.
    let block = ConvBnRelu::<f32>::same(64, 64, 3, &mut rng);
    let x0 = feat(&[16, 64, 32, 32]);
    bench("convbnrelu 64->64 3x3 @32^2 fwd eval", || {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let _ = block.forward(&mut tape, "b", x, Mode::Eval);
        tape
    });
    bench("convbnrelu 64->64 3x3 @32^2 fwd+bwd train", || {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = block.forward(&mut tape, "b", x, Mode::Train);
        let s = tape.sum_all(y);
        tape.backward(s);
        tape
    });

    // RFEM at each level's shape.
    for (ch, side) in [(16usize, 32usize), (32, 16), (64, 8), (96, 4)] {
        let rfem = Rfem::<f32>::new(ch, &mut rng);
        let x0 = feat(&[16, ch, side, side]);
        bench(&format!("rfem {ch}ch @{side}^2 fwd+bwd"), || {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let y = rfem.forward(&mut tape, "r", x, Mode::Train).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s);
            tape
        });
    }

    // BAM at the fusion shape (low_a 32^2, low_b 16^2, high 8^2).
    let bam = Bam::<f32>::new(&mut rng);
    let (a0, b0, h0) = (
        feat(&[16, 64, 32, 32]),
        feat(&[16, 64, 16, 16]),
        feat(&[16, 64, 8, 8]),
    );
    bench("bam @32^2 fwd+bwd", || {
        let mut tape = Tape::new();
        let a = tape.constant(a0.clone());
        let b = tape.constant(b0.clone());
        let h = tape.constant(h0.clone());
        let tr = bam.forward_traced(&mut tape, "m", a, b, h, Mode::Train).unwrap();
        let s = tape.sum_all(tr.feature);
        tape.backward(s);
        tape
    });

    // CBFM at each cascade level.
    for side in [32usize, 16, 8] {
        let cbfm = Cbfm::<f32>::new(true, &mut rng);
        let f0 = feat(&[16, 64, side, side]);
        let e0 = feat(&[16, 64, 32, 32]);
        let c0 = feat(&[16, 64, side / 2, side / 2]);
        bench(&format!("cbfm @{side}^2 fwd+bwd"), || {
            let mut tape = Tape::new();
            let f = tape.constant(f0.clone());
            let e = tape.constant(e0.clone());
            let c = tape.constant(c0.clone());
            let y = cbfm.forward(&mut tape, "c", f, Some(e), c, Mode::Train).unwrap();
            let s = tape.sum_all(y);
            tape.backward(s);
            tape
        });
    }

    // Bilinear resize 8^2 -> 128^2 with backward (head upsampling).
    let small = feat(&[16, 1, 8, 8]);
    bench("resize 8->128 fwd+bwd", || {
        let mut tape = Tape::new();
        let x = tape.input(small.clone(), true);
        let y = tape.resize_bilinear(x, (128, 128));
        let s = tape.sum_all(y);
        tape.backward(s);
        tape
    });

    // Elementwise chain at 128^2 x 16 (loss-scale tensors).
    let big = feat(&[16, 1, 128, 128]);
    bench("sigmoid+mul @128^2 fwd+bwd", || {
        let mut tape = Tape::new();
        let x = tape.input(big.clone(), true);
        let y = tape.sigmoid(x);
        let z = tape.mul(y, x);
        let s = tape.sum_all(z);
        tape.backward(s);
        tape
    });
}

#[test]
#[ignore]
fn time_train_step() {
    use codnet::config::RunConfig;
    use codnet::data::synth::{sample_seed, synth_sample};
    use codnet::network::Variant;
    use codnet::trainer::{normalize_images, stack_targets, train_step, TrainState};

    // Synthesis cost, per sample at the ablation size.
    let t = Instant::now();
    let samples: Vec<_> = (0..16)
        .map(|i| synth_sample(sample_seed(7, i), 128, 0.7).unwrap())
        .collect();
    println!("synth 16 samples @128: {:?}", t.elapsed());

    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let (gt_masks, gt_edges) = stack_targets(&samples);

    for variant in [Variant::M1, Variant::M5] {
        let mut config = RunConfig::default();
        config.precision = codnet::scalar::Dtype::F32;
        config.network.variant = variant;
        config.train.input_size = 128;
        config.train.batch_size = 16;
        let x = normalize_images::<f32>(&images, &config.normalization).unwrap();
        let mut state = TrainState::<f32>::new(&config).unwrap();
        let _ = train_step(&mut state, &x, &gt_masks, &gt_edges).unwrap();
        let t = Instant::now();
        for _ in 0..3 {
            let _ = train_step(&mut state, &x, &gt_masks, &gt_edges).unwrap();
        }
        println!("train_step {variant} f32 b16 @128^2: {:?}", t.elapsed() / 3);
    }
}

#[test]
#[ignore]
fn time_step_phases() {
    use codnet::config::RunConfig;
    use codnet::data::synth::{sample_seed, synth_sample};
    use codnet::losses::total_loss;
    use codnet::network::Variant;
    use codnet::trainer::{normalize_images, stack_targets, TrainState};

    let samples: Vec<_> = (0..16)
        .map(|i| synth_sample(sample_seed(7, i), 128, 0.7).unwrap())
        .collect();
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let (gt_masks, gt_edges) = stack_targets(&samples);

    let mut config = RunConfig::default();
    config.precision = codnet::scalar::Dtype::F32;
    config.network.variant = Variant::M5;
    config.train.input_size = 128;
    config.train.batch_size = 16;
    let x = normalize_images::<f32>(&images, &config.normalization).unwrap();
    let mut state = TrainState::<f32>::new(&config).unwrap();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let outputs = state.network.forward(&mut tape, input, Mode::Train).unwrap();
        let t1 = Instant::now();
        let (total, _bd) =
            total_loss(&mut tape, &outputs.masks, &outputs.edges, &gt_masks, &gt_edges).unwrap();
        let t2 = Instant::now();
        tape.backward(total);
        let t3 = Instant::now();
        let mut grads = std::collections::BTreeMap::new();
        let names: Vec<String> = tape.param_names().map(str::to_string).collect();
        for name in names {
            let grad = tape.param_grad(&name).unwrap().clone();
            grads.insert(name, grad);
        }
        let updates = tape.take_stat_updates();
        state.network.apply_stat_updates(updates);
        let t4 = Instant::now();
        state.optimizer.step(&mut state.network, &grads).unwrap();
        let t5 = Instant::now();
        drop(tape);
        let t6 = Instant::now();
        println!(
            "round {round}: fwd {:?}  loss {:?}  bwd {:?}  collect {:?}  adam {:?}  drop {:?}",
            t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t6 - t5
        );
    }
}
