use std::path::PathBuf;
use std::sync::OnceLock;

use ccx::autodiff::Tape;
use ccx::data::{generate_dataset, iterate, load_manifest, CaptionRecord, GeneratorOptions, IterationMode};
use ccx::enhancer::{DiffEnhancer, EnhancerConfig};
use ccx::gradcheck::{check, project, random_tensor};
use ccx::optim::{uniform_lr, AdamW, AdamWConfig};
use ccx::params::{Group, GroupSet, ParamStore};
use ccx::rng::Rng;
use ccx::tensor::Tensor;
use proptest::prelude::*;

fn records() -> &'static [CaptionRecord] {
    static RECORDS: OnceLock<(tempfile::TempDir, Vec<CaptionRecord>)> = OnceLock::new();
    &RECORDS
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let options = GeneratorOptions {
                pairs: 12,
                seed: 11,
                image_size: 16,
                weight: 2,
                ..GeneratorOptions::default()
            };
            let manifest: PathBuf = generate_dataset(&options, dir.path()).unwrap().manifest;
            let records = load_manifest(&manifest).unwrap();
            (dir, records)
        })
        .1
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, &mut Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let tape = Tape::new();
        let mut rng = Rng::new(seed);
        let x = tape.constant(Tensor::from_fn(&[rows, cols], |_| rng.uniform_range(-spread, spread)));
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
            prop_assert!(out.row(r).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn matmul_gradients_match_differences(n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let xs = [tensor(&[n, k], seed), tensor(&[k, m], seed ^ 1)];
        let r = check(&ParamStore::new(), GroupSet::none(), &xs, None, 1, |cx, v| {
            let y = cx.tape.matmul(v[0], v[1])?;
            project(cx.tape, y, seed)
        })
        .unwrap();
        prop_assert!(r.max_rel() < 1e-5, "{:?}", r.worst());
    }

    #[test]
    fn pointwise_chain_gradients_match_differences(len in 1usize..8, seed in any::<u64>()) {
        let xs = [tensor(&[2, len], seed), tensor(&[2, len], seed ^ 2)];
        let r = check(&ParamStore::new(), GroupSet::none(), &xs, None, 1, |cx, v| {
            let t = cx.tape;
            let a = t.gelu(v[0])?;
            let b = t.sigmoid(v[1])?;
            let c = t.mul(a, b)?;
            let d = t.tanh(c)?;
            let e = t.softmax(d, 1)?;
            project(t, e, seed)
        })
        .unwrap();
        prop_assert!(r.max_rel() < 1e-5, "{:?}", r.worst());
    }

    #[test]
    fn layer_norm_gradients_match_differences(rows in 1usize..4, width in 2usize..7, seed in any::<u64>()) {
        let xs = [tensor(&[rows, width], seed), tensor(&[width], seed ^ 3), tensor(&[width], seed ^ 4)];
        let r = check(&ParamStore::new(), GroupSet::none(), &xs, None, 1, |cx, v| {
            let y = cx.tape.layer_norm(v[0], v[1], v[2])?;
            project(cx.tape, y, seed)
        })
        .unwrap();
        prop_assert!(r.max_rel() < 1e-5, "{:?}", r.worst());
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::new(seed).fork(stream);
        let mut b = Rng::new(seed).fork(stream);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::from_state(seed, 5);
        let mut d = Rng::new(seed);
        for _ in 0..5 {
            d.next_u64();
        }
        prop_assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn zero_learning_rate_leaves_everything_untouched(seed in any::<u64>(), prior_steps in 0usize..3) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        store.register("a", Group::Enhancer, random_tensor(&[3, 4], &mut rng)).unwrap();
        store.register("b", Group::Decoder, random_tensor(&[5], &mut rng)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..prior_steps {
            for p in store.iter_mut() {
                let g: Vec<f64> = (0..p.tensor.len()).map(|_| rng.normal()).collect();
                p.tensor.accumulate_grad(&g);
            }
            opt.step(&mut store, &uniform_lr(1e-2)).unwrap();
            store.zero_grads();
        }
        for p in store.iter_mut() {
            let g: Vec<f64> = (0..p.tensor.len()).map(|_| rng.normal()).collect();
            p.tensor.accumulate_grad(&g);
        }
        let (before_store, before_opt) = (store.checksum(None), opt.clone());
        opt.step(&mut store, &uniform_lr(0.0)).unwrap();
        prop_assert_eq!(store.checksum(None), before_store);
        prop_assert_eq!(opt, before_opt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn initialization_depends_only_on_seed(seed in any::<u64>(), layers in 1usize..3) {
        let config = EnhancerConfig { num_catl_layers: layers, heads: 2, ..EnhancerConfig::for_width(8) };
        let build = |s: u64| {
            let mut store = ParamStore::new();
            DiffEnhancer::new(config.clone(), &mut store, &mut Rng::new(s)).unwrap();
            store.checksum(None)
        };
        prop_assert_eq!(build(seed), build(seed));
        prop_assert_ne!(build(seed), build(seed.wrapping_add(1)));
    }

    #[test]
    fn epoch_order_is_deterministic(seed in any::<u64>(), epoch in 0u64..20, flatten in any::<bool>()) {
        let mode = if flatten { IterationMode::Flatten } else { IterationMode::RandomChoice };
        let a = iterate(records(), mode, seed, epoch).unwrap();
        let b = iterate(records(), mode, seed, epoch).unwrap();
        prop_assert_eq!(&a, &b);
        let mut counts = vec![0usize; records().len()];
        for item in &a {
            counts[item.record] += 1;
            prop_assert!(item.caption < records()[item.record].captions.len());
        }
        if !flatten {
            prop_assert!(counts.iter().all(|c| *c == 2), "each record appears weight times: {counts:?}");
        }
    }
}
