use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikenet::arch::{parse_arch, Block, NetworkSpec};
use spikenet::checkpoint;
use spikenet::codec::{decode, Encoder};
use spikenet::data::{batches, parse_idx, Dataset};
use spikenet::network::{Network, NetworkConfig, ParamRef};
use spikenet::neuron::{Activation, FireMode, NeuronKind, NeuronState, SpikingLayerConfig};
use spikenet::ops::{conv2d_forward, dropout_forward, Mode, DEFAULT_EPS};
use spikenet::optim::{lr_at, Adam, AdamConfig};
use spikenet::param::Param;
use spikenet::Tensor;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn column(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
}

fn neuron(kind: NeuronKind, activation: Activation, k: f64) -> NeuronState<f64> {
    NeuronState::new(SpikingLayerConfig {
        kind,
        activation,
        k_init: k,
        ..SpikingLayerConfig::default()
    })
    .unwrap()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let mut out = vec![0.0; n * o * h * wd];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * c + ic) * 3 + ky) * 3 + kx]
                                    * x.data()[((s * c + ic) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((s * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, h, wd], out).unwrap()
}

fn small_spec() -> impl Strategy<Value = NetworkSpec> {
    let leaf = prop_oneof![(1usize..64).prop_map(Block::Conv), Just(Block::MaxPool)];
    let conv_part = vec(
        prop_oneof![
            3 => leaf.clone(),
            1 => (vec(leaf, 1..3), 1usize..4).prop_map(|(b, n)| Block::Repeat(b, n)),
        ],
        0..3,
    );
    let fc_part = vec((1usize..512).prop_map(Block::Fc), 0..2);
    (1usize..4, 1usize..64, conv_part, fc_part, 1usize..11, 1usize..20).prop_map(
        |(branches, ch, mut body, fcs, classes, pop)| {
            body.extend(fcs);
            NetworkSpec {
                encoder: vec![ch; branches],
                body,
                decoder_width: classes * pop,
                population: pop,
            }
        },
    )
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn unit_k_identity_klif_is_lif(xs in vec(vec(-4.0f64..4.0, 5), 1..10)) {
        let mut lif = neuron(NeuronKind::Lif, Activation::Relu, 1.0);
        let mut klif = neuron(NeuronKind::Klif, Activation::Identity, 1.0);
        for x in &xs {
            let a = lif.step(&column(x), FireMode::Hard).unwrap();
            let b = klif.step(&column(x), FireMode::Hard).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(lif.potential(), klif.potential());
        }
    }

    #[test]
    fn rectified_potential_is_never_negative(xs in vec(vec(-5.0f64..5.0, 6), 1..12), k in 0.5f64..5.0) {
        let mut n = neuron(NeuronKind::Klif, Activation::Relu, k);
        for x in &xs {
            n.step(&column(x), FireMode::Hard).unwrap();
            prop_assert!(n.potential().unwrap().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn spikes_binary_and_reset_exact(
        xs in vec(vec(-3.0f64..5.0, 6), 1..10),
        kind in prop_oneof![Just(NeuronKind::Lif), Just(NeuronKind::Klif), Just(NeuronKind::KlifStar)],
        k in 0.5f64..5.0,
    ) {
        let mut n = neuron(kind, Activation::Relu, k);
        for x in &xs {
            let s = n.step(&column(x), FireMode::Hard).unwrap();
            for (&si, &vi) in s.data().iter().zip(n.potential().unwrap().data()) {
                prop_assert!(si == 0.0 || si == 1.0);
                if si == 1.0 {
                    prop_assert_eq!(vi, 0.0);
                }
            }
        }
    }

    #[test]
    fn larger_k_never_silences(x in 0.01f64..6.0, k1 in 0.5f64..5.0, dk in 0.0f64..4.5) {
        let k2 = (k1 + dk).min(5.0);
        let mut a = neuron(NeuronKind::Klif, Activation::Relu, k1);
        let mut b = neuron(NeuronKind::Klif, Activation::Relu, k2);
        let sa = a.step(&column(&[x]), FireMode::Hard).unwrap().item();
        let sb = b.step(&column(&[x]), FireMode::Hard).unwrap().item();
        prop_assert!(sb >= sa);
    }

    #[test]
    fn k_gradient_independent_of_neuron_partition(
        xs in vec(vec(-2.0f64..4.0, 8), 1..6),
        gs in vec(vec(-1.0f64..1.0, 8), 6),
        split in 1usize..8,
        k in 0.5f64..3.0,
    ) {
        let steps = xs.len();
        let run = |lo: usize, hi: usize| {
            let mut n = neuron(NeuronKind::Klif, Activation::Relu, k);
            for x in &xs {
                n.step(&column(&x[lo..hi]), FireMode::Hard).unwrap();
            }
            let grads: Vec<_> = gs[..steps].iter().map(|g| column(&g[lo..hi])).collect();
            n.backward_seq(&grads).unwrap();
            (n.k.grad.item(), n.k_grad_per_step.clone())
        };
        let (whole, per_step) = run(0, 8);
        let (left, _) = run(0, split);
        let (right, _) = run(split, 8);
        prop_assert!((whole - (left + right)).abs() < 1e-6);
        prop_assert!((whole - per_step.iter().sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn decode_scores_in_unit_interval(
        bits in vec(any::<bool>(), 4 * 3 * 24),
        steps in 1usize..5,
    ) {
        let window: Vec<Tensor<f32>> = (0..steps)
            .map(|t| {
                let data = bits[t * 72..(t + 1) * 72].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                Tensor::new(&[3, 24], data).unwrap()
            })
            .collect();
        let (scores, preds) = decode(&window, 4).unwrap();
        prop_assert_eq!(scores.shape(), &[3, 6]);
        prop_assert!(scores.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!(preds.iter().all(|&p| p < 6));
    }

    #[test]
    fn decode_equivariant_under_population_permutation(
        bits in vec(any::<bool>(), 2 * 30),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let spikes = Tensor::new(&[2, 30], bits.iter().map(|&b| if b { 1.0f32 } else { 0.0 }).collect()).unwrap();
        let mut permuted = vec![0.0f32; 60];
        for row in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..5 {
                    permuted[row * 30 + dst * 5 + j] = spikes.data()[row * 30 + src * 5 + j];
                }
            }
        }
        let (a, _) = decode(&[spikes], 5).unwrap();
        let (b, _) = decode(&[Tensor::new(&[2, 30], permuted).unwrap()], 5).unwrap();
        for row in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(b.data()[row * 6 + dst], a.data()[row * 6 + src]);
            }
        }
    }

    #[test]
    fn encoder_equals_merged_convolution(seed in any::<u64>(), branches in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::<f64>::new(2, 3, branches, SpikingLayerConfig::default(), (DEFAULT_EPS, 0.1), &mut rng).unwrap();
        let x = Tensor::new(&[2, 2, 5, 4], (0..80).map(|i| ((i * 37 + seed as usize % 11) % 17) as f64 / 17.0).collect()).unwrap();
        let mut w = Tensor::zeros(&[3, 2, 3, 3]);
        let mut b = Tensor::zeros(&[3]);
        for br in &enc.branches {
            w.add_assign(&br.weight.value).unwrap();
            b.add_assign(&br.bias.value).unwrap();
        }
        let merged = naive_conv(&x, &w, &b);
        prop_assert!(enc.pre_activation(&x).unwrap().max_abs_diff(&merged) < 1e-5);
    }

    #[test]
    fn conv_forward_matches_loop_oracle(seed in any::<u64>(), c in 1usize..4, o in 1usize..4, h in 1usize..6, w in 1usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (x, wt, b) = (t(&[2, c, h, w]), t(&[o, c, 3, 3]), t(&[o]));
        let (y, _) = conv2d_forward(&x, &wt, &b).unwrap();
        prop_assert!(y.max_abs_diff(&naive_conv(&x, &wt, &b)) < 1e-6);
    }

    #[test]
    fn arch_render_round_trips(spec in small_spec()) {
        let text = spec.render();
        prop_assert_eq!(parse_arch(&text).unwrap(), spec);
    }

    #[test]
    fn forward_diagnostics_bounded(seed in any::<u64>(), steps in 1usize..4) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = parse_arch("(3C3+3C3)(encoding)-4C3-MP2-12FC-(20FC-AP10)(decoding)").unwrap();
        let mut net = Network::<f32>::new(NetworkConfig::new(spec, [1, 6, 6], SpikingLayerConfig::default()), &mut rng).unwrap();
        let x = Tensor::new(&[3, 1, 6, 6], (0..108).map(|_| rng.gen::<f32>() * 4.0).collect()).unwrap();
        let out = net.forward(&x, steps, Mode::Train, FireMode::Hard, &mut rng).unwrap();
        prop_assert!(out.scores.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!(net.layer_rates().iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert!(net.k_values().iter().all(|k| (0.5..=5.0).contains(k)));
    }

    #[test]
    fn adam_keeps_k_within_bounds(grads in vec(-1e8f64..1e8, 1..60), lr in 1e-4f64..10.0) {
        let mut k = Param::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        for g in grads {
            k.grad = Tensor::scalar(g);
            adam.step(&mut [ParamRef { name: "spk0.k".into(), param: &mut k, k_bounds: Some((0.5, 5.0)) }], lr).unwrap();
            let v = k.value.item();
            prop_assert!((0.5..=5.0).contains(&v));
        }
    }

    #[test]
    fn cosine_schedule_non_increasing(lr in 1e-6f64..1.0, frac in 0.0f64..1.0, t_max in 1usize..300) {
        let lr_min = lr * frac;
        for e in 0..t_max {
            prop_assert!(lr_at(e + 1, lr, lr_min, t_max) <= lr_at(e, lr, lr_min, t_max));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        entries in vec(("[a-z.0-9]{1,12}", vec(1usize..4, 0..4), any::<u64>()), 0..5),
    ) {
        use rand::Rng;
        let tensors: Vec<(String, Tensor<f32>)> = entries
            .into_iter()
            .map(|(name, shape, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n: usize = shape.iter().product();
                (name, Tensor::new(&shape, (0..n).map(|_| rng.gen::<f32>() - 0.5).collect()).unwrap())
            })
            .collect();
        let back = checkpoint::decode(&checkpoint::encode(&tensors)).unwrap();
        prop_assert_eq!(back, tensors);
    }

    #[test]
    fn batches_cover_dataset_exactly_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>(), shuffle in any::<bool>()) {
        let data = Dataset::new(
            Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f32 / n as f32).collect()).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            10,
        ).unwrap();
        let mut seen: Vec<f32> = batches(&data, bs, seed, shuffle).unwrap().flat_map(|(x, _)| x.into_data()).collect();
        prop_assert_eq!(seen.len(), n);
        seen.sort_by(f32::total_cmp);
        prop_assert_eq!(seen, data.images.data().to_vec());
    }

    #[test]
    fn idx_pixels_and_labels_in_range(pixels in vec(any::<u8>(), 3 * 4), labels in vec(0u8..10, 3)) {
        let mut im = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
        im.extend(&pixels);
        let mut lb = vec![0, 0, 8, 1, 0, 0, 0, 3];
        lb.extend(&labels);
        let ds = parse_idx(&im, &lb).unwrap();
        prop_assert!(ds.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(ds.labels.iter().all(|&l| l < ds.classes));
        for (p, &byte) in ds.images.data().iter().zip(&pixels) {
            prop_assert_eq!(*p, f32::from(byte) / 255.0);
        }
    }

    #[test]
    fn dropout_reproducible_from_seed(seed in any::<u64>(), p in 0.0f64..0.9) {
        let x = Tensor::full(&[4, 16], 1.0f32);
        let (a, _) = dropout_forward(&x, p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (b, _) = dropout_forward(&x, p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
