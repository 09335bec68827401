use dml_core::checkpoint;
use dml_core::config::ExperimentConfig;
use dml_core::data::BalancedSampler;
use dml_core::peft::prompt_schedule;
use dml_core::Tensor;
use proptest::prelude::*;
use serde_json::json;

fn labels_for(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_batches_have_the_exact_shape(
        counts in prop::collection::vec(2usize..7, 4..12),
        per_class in 1usize..3,
        classes_per_batch in 1usize..4,
        seed in any::<u64>(),
        step in 0u64..500,
    ) {
        let labels = labels_for(&counts);
        let batch = per_class * classes_per_batch;
        let sampler = BalancedSampler::new(&labels, batch, per_class, seed).unwrap();
        let idx = sampler.batch_at(step);
        prop_assert_eq!(idx.len(), batch);
        let mut seen = idx.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), batch);
        let mut per: std::collections::BTreeMap<usize, usize> = Default::default();
        for &i in &idx {
            *per.entry(labels[i]).or_default() += 1;
        }
        prop_assert_eq!(per.len(), classes_per_batch);
        prop_assert!(per.values().all(|&n| n == per_class));
        prop_assert_eq!(sampler.batch_at(step), idx);
    }

    #[test]
    fn prompt_schedule_never_grows(base in 0usize..64, tau in 0usize..10, layers in 1usize..24) {
        let s = prompt_schedule(base, tau, layers);
        prop_assert_eq!(s.len(), layers);
        prop_assert_eq!(s[0], base);
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        if tau == 0 {
            prop_assert!(s.iter().all(|&n| n == base));
        }
    }

    #[test]
    fn config_round_trip_is_a_fixed_point(
        steps in 0u64..10_000,
        lr in 1e-6f64..1.0,
        alpha in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
        m in 1usize..8,
        method in prop::sample::select(vec!["full", "linear_probe", "bitfit", "adapter", "vpt", "vpt_adapter"]),
        kind in prop::sample::select(vec!["ema", "gru_relu", "gru_tanh"]),
        cap in prop::option::of(8usize..64),
    ) {
        let raw = json!({
            "run.steps": steps,
            "run.buffer_capacity": cap,
            "optim.lr": lr,
            "proxy": {"alpha": alpha, "lambda": lambda, "m": m, "accumulator_kind": kind},
            "peft.method": method,
        });
        let cfg = ExperimentConfig::from_value(raw).unwrap();
        let text = cfg.to_json();
        let again = ExperimentConfig::from_json_str(&text).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(text, again.to_json());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..4), any::<u32>()),
            0..6,
        )
    ) {
        let entries: Vec<(String, Tensor<f32>)> = tensors
            .iter()
            .enumerate()
            .map(|(i, (shape, bits))| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f32::from_bits(bits.wrapping_add((k as u32).wrapping_mul(2654435761)) & 0xbf7f_ffff)).collect();
                (format!("t.{i}"), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let bytes = checkpoint::encode(entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((a, ta), (b, tb)) in entries.iter().zip(&back) {
            prop_assert_eq!(a, b);
            prop_assert!(ta.bit_eq(tb));
        }
        for (info, (_, t)) in checkpoint::inspect(&bytes).unwrap().iter().zip(&entries) {
            prop_assert_eq!(info.bytes, t.len() * 4);
        }
    }
}

#[test]
fn sampler_epoch_counts_differ_by_at_most_per_class() {
    let labels = labels_for(&[4, 4, 4, 4, 4, 4, 4]);
    let sampler = BalancedSampler::new(&labels, 4, 2, 17).unwrap();
    let mut counts = vec![0usize; 7];
    for step in 0..sampler.batches_per_epoch() as u64 {
        for i in sampler.batch_at(step) {
            counts[labels[i]] += 1;
        }
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 2, "{counts:?}");
}
