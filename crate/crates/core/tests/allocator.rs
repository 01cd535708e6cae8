mod common;

use common::{brute_force_ranks, random_matrix};
use lamda_core::allocator::{allocate, score_modules, score_spectrum, ModuleId, ModuleKind, ModuleScore, RankBudget};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<ModuleId> {
    (0..n).map(|i| ModuleId::new(i / 6, ModuleKind::ALL[i % 6])).collect()
}

fn score(module: ModuleId, nu: f64) -> ModuleScore {
    ModuleScore { module, e_r1: 0.0, e_rs: nu, e_rt: 1.0, e_total: 1.0, nu }
}

proptest! {
    #[test]
    fn plan_matches_brute_force(
        nus in proptest::collection::vec(0u8..6, 1..60),
        reverse in any::<bool>(),
        s in 1usize..5,
    ) {
        let ranks: Vec<usize> = (1..=s).map(|i| 4 * i).collect();
        let target = ranks.iter().sum::<usize>() / s;
        // keep the target integral
        prop_assume!(ranks.iter().sum::<usize>() % s == 0);
        let budget = RankBudget::new(ranks, target).unwrap();
        let modules: Vec<(ModuleId, f64)> = ids(nus.len()).into_iter().zip(nus.iter().map(|&n| n as f64 / 4.0)).collect();
        let scores: Vec<ModuleScore> = modules.iter().map(|&(id, nu)| score(id, nu)).collect();
        let plan = allocate(&scores, &budget, reverse).unwrap();
        for (id, rank) in brute_force_ranks(&modules, &budget, reverse) {
            prop_assert_eq!(plan.rank_of(id), Some(rank));
        }
        if nus.len() % s == 0 {
            prop_assert_eq!(plan.mean_rank, target as f64);
        }
        // nondecreasing nu along the plan order
        prop_assert!(plan.entries.windows(2).all(|w| w[0].nu <= w[1].nu));
    }

    #[test]
    fn nu_is_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(10, 14, &mut rng);
        let budget = RankBudget::new(vec![2, 4, 6], 4).unwrap();
        let id = ModuleId::new(0, ModuleKind::Q);
        let a = score_modules(&[(id, w.clone())], &budget).unwrap()[0].nu;
        let b = score_modules(&[(id, w.scale(scale))], &budget).unwrap()[0].nu;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
    }
}

#[test]
fn reverse_is_a_mirror() {
    let budget = RankBudget::new(vec![16, 24, 32, 40, 48], 32).unwrap();
    let scores: Vec<ModuleScore> = ids(5).into_iter().zip([0.5, 0.1, 0.9, 0.3, 0.7]).map(|(id, nu)| score(id, nu)).collect();
    let fwd = allocate(&scores, &budget, false).unwrap();
    let rev = allocate(&scores, &budget, true).unwrap();
    let f: Vec<usize> = fwd.entries.iter().map(|e| e.rank).collect();
    let r: Vec<usize> = rev.entries.iter().map(|e| e.rank).collect();
    assert_eq!(f, vec![48, 40, 32, 24, 16]);
    assert_eq!(r, vec![16, 24, 32, 40, 48]);
    assert!(rev.reversed);
}

#[test]
fn flat_and_concentrated_spectra() {
    let budget = RankBudget::new(vec![1, 2, 3], 2).unwrap();
    let id = ModuleId::new(0, ModuleKind::V);
    let flat = score_spectrum(id, &[1.0; 6], &budget).unwrap();
    assert!((flat.nu - 1.0).abs() < 1e-15);
    let spike = score_spectrum(id, &[3.0, 0.0, 0.0, 0.0], &budget).unwrap();
    assert_eq!(spike.nu, 0.0);
    assert!(score_spectrum(id, &[0.0; 4], &budget).is_err());
}
