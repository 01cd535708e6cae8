use lamda_core::accounting::{count_lamda_effective, ModelSpec, RankAssignment};
use lamda_core::allocator::ModuleKind;
use lamda_core::freezing::{FreezeSchedule, ScheduleRule};
use proptest::prelude::*;

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(r in 0usize..64, ti in 0usize..400, extra in 0usize..400) {
        for rule in [ScheduleRule::Linear, ScheduleRule::Floor, ScheduleRule::Literal] {
            let s = FreezeSchedule::with_rule(r, ti, ti + extra, rule).unwrap();
            let rows: Vec<usize> = (0..=ti + extra).map(|t| s.trainable_rows(t).unwrap()).collect();
            prop_assert!(rows.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(rows.iter().all(|&x| x <= r));
            // the midpoint rule starts below r when the ramp is shorter than r steps
            if ti > 0 && (rule != ScheduleRule::Linear || ti > r) {
                prop_assert_eq!(rows[0], r);
            }
            prop_assert!(rows[ti..].iter().all(|&x| x == 0));
        }
    }

    #[test]
    fn linear_rule_integrates_to_half_rank(r in 1usize..64, ti in 1usize..2000) {
        let s = FreezeSchedule::new(r, ti, ti).unwrap();
        let sum: usize = (0..ti).map(|t| s.trainable_rows(t).unwrap()).sum();
        prop_assert!((2 * sum).abs_diff(r * ti) <= 1);
    }
}

/// Time-average of `Σ r² + rows(t)·d_out` against the closed form.
#[test]
fn schedule_average_matches_effective_count() {
    let spec = ModelSpec {
        name: "toy".into(),
        layers: 2,
        d_model: 64,
        ffn_dim: 256,
        kinds: ModuleKind::ALL.to_vec(),
        seq_len: 16,
        batch: 4,
        bytes_per_scalar: 4,
    };
    for &(r, t, f) in &[(8usize, 1000usize, 0.3f64), (8, 2000, 0.1), (4, 3000, 0.5), (16, 1000, 1.0)] {
        let sched = FreezeSchedule::from_fraction(r, f, t).unwrap();
        let per_step_dout: usize = spec.modules().iter().map(|m| m.d_out).sum();
        let lda = spec.modules().len() * r * r;
        let total: usize = (0..t).map(|s| lda + sched.trainable_rows(s).unwrap() * per_step_dout).sum();
        let avg = total as f64 / t as f64;
        let want = count_lamda_effective(&spec, &RankAssignment::Uniform(r), f).unwrap().effective_params;
        assert!((avg - want).abs() / want < 1e-3, "r={r} T={t} f={f}: {avg} vs {want}");
    }
}
