use deltagossip::aggregation::{
    average_full_models, delta_sum_integrate, fedavg_integrate, sample_weighted_integrate,
    variance_corrected_average, LambdaSchedule, ModelUpdate,
};
use deltagossip::dataset::{shard_equal, synth_classification, ShardPlan, SynthSpec};
use deltagossip::model::{
    init_weights, train_epochs, Batch, EpochPlan, Mlp, ModelConfig, TrainableModel,
};
use deltagossip::params::{Layout, ParameterVector};
use deltagossip::topology::{generate_semi_random, validate, TopologyConstraints};
use proptest::prelude::*;
use std::sync::Arc;

const TOL: f64 = 1e-12;

fn close(a: &ParameterVector, b: &ParameterVector, scale: f64) -> bool {
    a.linf_distance(b).unwrap() <= TOL * scale.max(1.0)
}

fn pv(values: Vec<f64>) -> ParameterVector {
    ParameterVector::flat(values).unwrap()
}

/// A shared base plus `count` deltas, all of length `len`.
fn base_and_deltas(
    max_len: usize,
    max_count: usize,
) -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (1..=max_len, 1..=max_count).prop_flat_map(|(len, count)| {
        (
            prop::collection::vec(-10.0..10.0f64, len),
            prop::collection::vec(prop::collection::vec(-5.0..5.0f64, len), count),
        )
    })
}

fn updates(base: &[f64], deltas: &[Vec<f64>], counts: &[u64]) -> Vec<ModelUpdate> {
    deltas
        .iter()
        .enumerate()
        .map(|(i, d)| {
            ModelUpdate::new(
                i,
                1,
                pv(base.to_vec()),
                pv(d.clone()),
                counts[i % counts.len()],
                1,
            )
            .unwrap()
        })
        .collect()
}

fn sum(deltas: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; deltas[0].len()];
    for d in deltas {
        for (o, v) in out.iter_mut().zip(d) {
            *o += v;
        }
    }
    out
}

proptest! {
    #[test]
    fn averaging_divides_progress_by_update_count((base, deltas) in base_and_deltas(12, 9)) {
        let fulls: Vec<_> = deltas
            .iter()
            .map(|d| pv(base.iter().zip(d).map(|(b, x)| b + x).collect()))
            .collect();
        let m = deltas.len() as f64;
        let expected = pv(base.iter().zip(sum(&deltas)).map(|(b, s)| b + s / m).collect());
        prop_assert!(close(&average_full_models(&fulls).unwrap(), &expected, 50.0));
    }

    #[test]
    fn sample_weighted_step_is_count_times_fedavg_step(
        (base, deltas) in base_and_deltas(10, 8),
        counts in prop::collection::vec(1u64..500, 1..8),
    ) {
        let w = pv(base.clone());
        let ups = updates(&base, &deltas, &counts);
        let fa = fedavg_integrate(&w, &ups).unwrap().sub(&w).unwrap();
        let sw = sample_weighted_integrate(&w, &ups).unwrap().sub(&w).unwrap();
        let scaled = fa.scale(ups.len() as f64).unwrap();
        prop_assert!(close(&sw, &scaled, 50.0 * ups.len() as f64));
    }

    #[test]
    fn equal_bases_reduce_delta_sum_to_base_plus_total((base, deltas) in base_and_deltas(10, 8)) {
        let ups = updates(&base, &deltas, &[1]);
        let out = delta_sum_integrate(&ups[0], &ups[1..], &LambdaSchedule::UNIT, 17).unwrap();
        let expected = pv(base.iter().zip(sum(&deltas)).map(|(b, s)| b + s).collect());
        prop_assert!(close(&out, &expected, 50.0));
    }

    #[test]
    fn integration_ignores_arrival_order(
        (base, deltas) in base_and_deltas(8, 7),
        rotate in 0usize..7,
        t in 0u64..400,
    ) {
        let w = pv(base.clone());
        let ups = updates(&base, &deltas, &[3, 5, 7]);
        let mut shuffled = ups.clone();
        shuffled.rotate_left(rotate % ups.len());
        shuffled.reverse();
        prop_assert_eq!(fedavg_integrate(&w, &ups).unwrap(), fedavg_integrate(&w, &shuffled).unwrap());
        prop_assert_eq!(
            sample_weighted_integrate(&w, &ups).unwrap(),
            sample_weighted_integrate(&w, &shuffled).unwrap()
        );
        let local = &ups[0];
        let mut remote: Vec<_> = ups[1..].to_vec();
        let forward = delta_sum_integrate(local, &remote, &LambdaSchedule::MNIST, t).unwrap();
        remote.reverse();
        prop_assert_eq!(forward, delta_sum_integrate(local, &remote, &LambdaSchedule::MNIST, t).unwrap());
    }

    #[test]
    fn variance_correction_keeps_segment_means(
        models in (2usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 7), n)),
    ) {
        let layout = Arc::new(Layout::from_sizes([("a", 3), ("b", 4)]));
        let pvs: Vec<_> = models
            .iter()
            .map(|m| ParameterVector::from_values(layout.clone(), m.clone()).unwrap())
            .collect();
        let plain = average_full_models(&pvs).unwrap();
        let corrected = variance_corrected_average(&pvs).unwrap();
        for seg in 0..2 {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| { let m = mean(v); v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64 };
            prop_assert!((mean(plain.segment(seg)) - mean(corrected.segment(seg))).abs() < 1e-12);
            let target = pvs.iter().map(|p| var(p.segment(seg))).sum::<f64>() / pvs.len() as f64;
            if var(plain.segment(seg)) > 1e-12 {
                prop_assert!((var(corrected.segment(seg)) - target).abs() < 1e-9 * target.max(1.0));
            }
        }
    }

    #[test]
    fn lambda_is_monotone_and_capped(t in 0u64..100_000, step in 1u64..5_000) {
        let s = LambdaSchedule::MNIST;
        prop_assert!(s.value(t) <= s.value(t + step));
        prop_assert!(s.value(t) >= s.a && s.value(t) <= s.c);
    }

    #[test]
    fn topology_generation_satisfies_or_refuses(n in 2usize..40, target in 0.5f64..9.0, seed in any::<u64>()) {
        let c = TopologyConstraints::with_target(target);
        match generate_semi_random(n, &c, seed) {
            Ok(g) => prop_assert!(validate(&g, &c).unwrap().passes(&c)),
            Err(e) => prop_assert!(e.to_string().contains("unsatisfiable"), "{e}"),
        }
    }
}

fn model_config(hidden: usize, lr: f64) -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        hidden_dim: hidden,
        class_count: 3,
        learning_rate: lr,
        seed: 9,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradient_matches_central_differences(
        hidden in prop::sample::select(vec![0usize, 5]),
        scale in 0.1f64..2.0,
        inputs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 1..6),
        label_seed in any::<u64>(),
    ) {
        let config = model_config(hidden, 0.1);
        let w = init_weights(&config).unwrap().scale(scale).unwrap();
        let mut model = Mlp::with_weights(config, w.clone()).unwrap();
        let labels: Vec<usize> = (0..inputs.len()).map(|i| ((label_seed >> (2 * i)) % 3) as usize).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(refs, labels).unwrap();
        let (_, grad) = model.loss_and_gradient(&batch).unwrap();
        let h = 1e-5;
        for i in 0..w.len() {
            let mut v = w.values().to_vec();
            v[i] += h;
            model.set_weights(ParameterVector::from_values(w.layout().clone(), v.clone()).unwrap()).unwrap();
            let up = model.loss(&batch).unwrap();
            v[i] -= 2.0 * h;
            model.set_weights(ParameterVector::from_values(w.layout().clone(), v).unwrap()).unwrap();
            let down = model.loss(&batch).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.values()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "coordinate {i}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn trained_weights_equal_base_plus_delta(epochs in 1usize..4, seed in any::<u64>(), hidden in 0usize..4) {
        let data = synth_classification(&SynthSpec { classes: 3, dim: 4, per_class: 10, sigma: 0.05, seed }).unwrap();
        let mut model = Mlp::new(model_config(hidden, 0.3)).unwrap();
        let before = model.weights().clone();
        let delta = train_epochs(&mut model, &data, &EpochPlan::new(epochs, 4, seed)).unwrap();
        prop_assert_eq!(before.add(&delta).unwrap(), model.weights().clone());
    }

    #[test]
    fn shards_partition_the_dataset(nodes in 1usize..12, seed in any::<u64>()) {
        let data = synth_classification(&SynthSpec { classes: 2, dim: 2, per_class: 40, sigma: 0.05, seed: 1 }).unwrap();
        let sharded = shard_equal(&data, &ShardPlan::new(nodes, seed)).unwrap();
        let mut ids: Vec<usize> = sharded.global_val.ids().to_vec();
        let sizes: Vec<usize> = sharded.nodes.iter().map(|n| n.train.len() + n.local_val.len()).collect();
        for n in &sharded.nodes {
            ids.extend(n.train.ids());
            ids.extend(n.local_val.ids());
        }
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..data.len()).collect::<Vec<_>>());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
