use proptest::prelude::*;

use signmaml::meta::{
    meta_grad_maml_autodiff, meta_grad_signmaml, meta_step, task_meta_gradient, unroll_signsgd, InnerOptimizer,
    MetaConfig, MetaMethod, ModelTask,
};
use signmaml::oracle::suite::random_instance;
use signmaml::tasks::{domain, sample_task, StreamKey, TaskDistribution};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sign_unroll_collapses_exactly(seed in any::<u64>(), beta in 1e-4f64..0.1, m in 0usize..6) {
        let inst = random_instance(seed);
        let obj = inst.objective();
        let full = meta_grad_maml_autodiff(&inst.x, &obj, &InnerOptimizer::signsgd(beta, m)).unwrap();
        let first = meta_grad_signmaml(&unroll_signsgd(&inst.x, &obj, beta, m).unwrap(), &obj).unwrap();
        prop_assert!(full.grad.bitwise_eq(&first.grad));
    }

    #[test]
    fn sign_steps_are_bounded_by_beta(seed in any::<u64>(), beta in 1e-4f64..1.0, m in 1usize..5) {
        let inst = random_instance(seed);
        let t = unroll_signsgd(&inst.x, &inst.objective(), beta, m).unwrap();
        for pair in t.iterates.windows(2) {
            for (a, b) in pair[0].values().iter().zip(pair[1].values()) {
                prop_assert!((a - b).abs() <= beta * (1.0 + 1e-12) + 1e-12 * a.abs());
            }
        }
    }

    #[test]
    fn zero_alpha_step_is_identity(seed in any::<u64>(), method in 0usize..4) {
        let inst = random_instance(seed);
        let method = MetaMethod::ALL[method];
        let cfg = MetaConfig {
            alpha: 0.0,
            inner: InnerOptimizer { kind: method.inner_kind(), beta: 0.05, steps: 2 },
            method,
            meta_batch: 1,
            test_steps: 1,
        };
        let (next, _) = meta_step(&inst.x, &[inst.objective()], &cfg).unwrap();
        prop_assert!(next.bitwise_eq(&inst.x));
    }

    #[test]
    fn zero_steps_make_all_engines_agree(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let obj = inst.objective();
        let grads: Vec<_> = MetaMethod::ALL
            .iter()
            .map(|&m| {
                let inner = InnerOptimizer { kind: m.inner_kind(), beta: 0.3, steps: 0 };
                task_meta_gradient(&inst.x, &obj, m, &inner).unwrap().grad
            })
            .collect();
        for g in &grads[1..] {
            prop_assert!(g.bitwise_eq(&grads[0]));
        }
    }

    #[test]
    fn sampled_tasks_are_balanced(seed in any::<u64>(), way in 2usize..7, shot in 1usize..4, query in 1usize..4) {
        let dist = TaskDistribution::blobs(3, way, shot, query, 3.0, 1.0);
        let task = sample_task(&dist, StreamKey::new(seed, domain::TRAIN, 0, 0));
        let s = task.support.labels().unwrap();
        let q = task.query.labels().unwrap();
        for c in 0..way {
            prop_assert_eq!(s.iter().filter(|&&l| l == c).count(), shot);
            prop_assert_eq!(q.iter().filter(|&&l| l == c).count(), query);
        }
    }

    #[test]
    fn sinusoid_targets_within_amplitude(seed in any::<u64>()) {
        let task = sample_task(&TaskDistribution::sinusoid(5, 10), StreamKey::new(seed, domain::TRAIN, 0, 0));
        let amp = task.amplitude.unwrap();
        prop_assert!((0.1..=5.0).contains(&amp));
        for batch in [&task.support, &task.query] {
            if let signmaml::Targets::Values(v) = &batch.targets {
                prop_assert!(v.iter().all(|t| t.abs() <= amp));
            }
        }
    }
}

#[test]
fn model_task_is_shareable_across_threads() {
    fn assert_sync<T: Sync>() {}
    assert_sync::<ModelTask<'static>>();
}
