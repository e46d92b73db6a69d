use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qfilter::channels::{self, apply_channel, conditional_update, outcome_probs, OutcomePartition};
use qfilter::dilation;
use qfilter::linalg;
use qfilter::measures::{self, Measure};
use qfilter::states::{self, partial_trace, purify, Keep};
use qfilter::verify::{self, Instance, Tolerances};

fn instance(seed: u64, n: usize, m: usize, rs: usize, rr: usize, blocks: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = channels::random_channel(n, m, &mut rng).unwrap();
    let sigma = states::random_density(n, 1 + rs % n, &mut rng).unwrap();
    let rho = states::random_density(n, 1 + rr % n, &mut rng).unwrap();
    let p = OutcomePartition::random(m, 1 + blocks % m, &mut rng).unwrap();
    Instance::new(ch, sigma, rho).with_partition(p)
}

fn arb_instance() -> impl Strategy<Value = Instance> {
    (any::<u64>(), 1usize..=5, 1usize..=5, any::<usize>(), any::<usize>(), any::<usize>())
        .prop_map(|(seed, n, m, rs, rr, b)| instance(seed, n, m, rs, rr, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn blocks_probabilities_sum_and_refine(inst in arb_instance()) {
        let fine = outcome_probs(&inst.channel, &inst.rho, &inst.channel.singletons()).unwrap();
        let coarse = outcome_probs(&inst.channel, &inst.rho, &inst.partition).unwrap();
        assert_abs_diff_eq!(coarse.probabilities().iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        for (nu, block) in inst.partition.blocks().iter().enumerate() {
            let sum: f64 = block.iter().map(|&mu| fine.get(mu)).sum();
            assert_abs_diff_eq!(coarse.get(nu), sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn updates_are_valid_states(inst in arb_instance()) {
        let probs = outcome_probs(&inst.channel, &inst.rho, &inst.partition).unwrap();
        for nu in 0..inst.partition.len() {
            let up = conditional_update(&inst.channel, nu, &inst.rho, &inst.partition, None).unwrap();
            prop_assert_eq!(up.used_fallback, probs.get(nu) <= channels::ZERO_PROBABILITY_TOL);
            prop_assert!(states::DensityMatrix::new(up.state.matrix().clone()).is_ok());
        }
    }

    #[test]
    fn fidelity_properties(inst in arb_instance()) {
        let f = measures::fidelity(&inst.sigma, &inst.rho).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        assert_abs_diff_eq!(f, measures::fidelity(&inst.rho, &inst.sigma).unwrap(), epsilon = 1e-10);
        assert_abs_diff_eq!(f, measures::fidelity_via_singular_values(&inst.sigma, &inst.rho).unwrap(), epsilon = 1e-10);
        assert_abs_diff_eq!(measures::fidelity(&inst.rho, &inst.rho).unwrap(), 1.0, epsilon = 1e-10);
        // Fuchs-van de Graaf lower bound with the normalized distance
        let d = measures::trace_distance_normalized(&inst.sigma, &inst.rho).unwrap();
        prop_assert!(1.0 - f.sqrt() <= d + 1e-9);
    }

    #[test]
    fn one_step_inequalities(inst in arb_instance()) {
        let tol = Tolerances::default();
        let fid = verify::check_filter_step(&inst, Measure::Fidelity, &tol).unwrap();
        prop_assert!(fid.passed(), "{:?}", fid);
        let fine = inst.clone().with_partition(inst.channel.singletons());
        let fro = verify::check_filter_step(&fine, Measure::Frobenius, &tol).unwrap();
        prop_assert!(fro.passed(), "{:?}", fro);
        let kraus = verify::check_kraus_monotonicity(&inst.channel, &inst.sigma, &inst.rho).unwrap();
        prop_assert!(kraus.passed(), "{:?}", kraus);
        prop_assert!(verify::check_mean_evolution(&inst.channel, &inst.rho, &inst.partition).unwrap() <= 1e-12);
    }

    #[test]
    fn channel_preserves_trace_and_contracts_distance(inst in arb_instance()) {
        let ks = apply_channel(&inst.channel, &inst.sigma).unwrap();
        let kr = apply_channel(&inst.channel, &inst.rho).unwrap();
        assert_abs_diff_eq!(linalg::trace_re(kr.matrix()), 1.0, epsilon = 1e-10);
        let before = measures::trace_distance(&inst.sigma, &inst.rho).unwrap();
        let after = measures::trace_distance(&ks, &kr).unwrap();
        prop_assert!(after <= before + 1e-9);
    }

    #[test]
    fn purification_round_trip(inst in arb_instance()) {
        let n = inst.dim();
        let psi = purify(&inst.rho);
        let back = partial_trace(&psi.projector(), n, n, Keep::B).unwrap();
        prop_assert!(linalg::max_abs(&(back - inst.rho.matrix())) <= 1e-12);
    }

    #[test]
    fn replay_links_hold(inst in arb_instance()) {
        let r = dilation::replay_proof(&inst.channel, &inst.sigma, &inst.rho, &inst.partition).unwrap();
        prop_assert!(r.all_links_hold, "{}", r.render());
        assert_abs_diff_eq!(r.overlap_initial, r.overlap_purifications, epsilon = 1e-12);
        let d = dilation::stinespring(&inst.channel).unwrap();
        prop_assert!(d.roundtrip_error(&inst.channel).unwrap() <= 1e-12);
        prop_assert!(d.unitarity_deviation() <= 1e-12);
    }

    #[test]
    fn json_round_trips(inst in arb_instance()) {
        let ch: channels::KrausChannel =
            serde_json::from_str(&serde_json::to_string(&inst.channel).unwrap()).unwrap();
        prop_assert_eq!(&ch, &inst.channel);
        let rho: states::DensityMatrix =
            serde_json::from_str(&serde_json::to_string(&inst.rho).unwrap()).unwrap();
        prop_assert_eq!(&rho, &inst.rho);
        let p: OutcomePartition =
            serde_json::from_str(&serde_json::to_string(&inst.partition).unwrap()).unwrap();
        prop_assert_eq!(&p, &inst.partition);
    }
}
