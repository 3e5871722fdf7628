use deconfounder_core::checks::p_value;
use deconfounder_core::data::{pad_and_mask, unpad};
use deconfounder_core::data::{remove_covariate, split_dataset, Dataset, PatientTrajectory, Provenance};
use deconfounder_core::msm::{quantile, rmse, weights_from_probs};
use deconfounder_core::numerics::{derive_seed, log_sigmoid, sigmoid, softplus, RngStream};
use deconfounder_core::sim::simulate_synthetic;
use deconfounder_core::SynthConfig;
use proptest::prelude::*;

fn dataset(lengths: &[usize], dx: usize, k: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let patients = lengths
        .iter()
        .map(|&len| PatientTrajectory {
            x: (0..len).map(|_| (0..dx).map(|_| rng.normal(0.0, 1.0)).collect()).collect(),
            a: (0..len).map(|_| (0..k).map(|_| u8::from(rng.bernoulli(0.4))).collect()).collect(),
            y: (0..len).map(|_| rng.normal(0.0, 1.0)).collect(),
            z: Some((0..len).map(|_| vec![rng.normal(0.0, 1.0)]).collect()),
            group: None,
        })
        .collect();
    let provenance = Provenance {
        generator: "prop".into(),
        config_hash: String::new(),
        seed,
    };
    Dataset::new(patients, k, dx, provenance).unwrap()
}

fn lengths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..8, 10..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(lens in lengths(), seed in any::<u64>()) {
        let ds = dataset(&lens, 2, 2, 1);
        let n = ds.len();
        let (train, val, test) = split_dataset(&ds, (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert_eq!(val.len(), (0.1 * n as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(test.len(), val.len());
        prop_assert_eq!(train.len() + val.len() + test.len(), n);
        // Trajectories are distinct with probability one, so matching y vectors identify patients.
        let mut seen: Vec<&Vec<f64>> = train.patients.iter().chain(&val.patients).chain(&test.patients).map(|p| &p.y).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut all: Vec<&Vec<f64>> = ds.patients.iter().map(|p| &p.y).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(seen, all);
        let again = split_dataset(&ds, (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert_eq!(again.0.patients, train.patients);
    }

    #[test]
    fn padding_round_trips(lens in lengths(), seed in any::<u64>()) {
        let ds = dataset(&lens, 3, 2, seed);
        let padded = pad_and_mask(&ds);
        let t_max = *lens.iter().max().unwrap();
        prop_assert_eq!(padded.t_max(), t_max);
        for (i, &len) in lens.iter().enumerate() {
            for t in 0..t_max {
                let m = padded.mask.values()[i * t_max + t];
                prop_assert_eq!(m, if t < len { 1.0 } else { 0.0 });
                if t >= len {
                    prop_assert_eq!(padded.y.values()[i * t_max + t], 0.0);
                }
            }
        }
        prop_assert_eq!(unpad(&padded), ds.patients);
    }

    #[test]
    fn removing_a_covariate_keeps_the_others(lens in lengths(), j in 0usize..3) {
        let ds = dataset(&lens, 3, 2, 4);
        let out = remove_covariate(&ds, j).unwrap();
        prop_assert_eq!(out.covariate_dim, 2);
        for (p, q) in ds.patients.iter().zip(&out.patients) {
            for (row, short) in p.x.iter().zip(&q.x) {
                let mut expect = row.clone();
                expect.remove(j);
                prop_assert_eq!(&expect, short);
            }
            prop_assert_eq!(&p.a, &q.a);
            prop_assert_eq!(&p.y, &q.y);
        }
    }

    #[test]
    fn seeds_are_pure_functions(parent in any::<u64>(), index in any::<u64>(), label in "[a-z/]{0,12}") {
        prop_assert_eq!(derive_seed(parent, &label, index), derive_seed(parent, &label, index));
        prop_assert_ne!(derive_seed(parent, &label, index), derive_seed(parent, &label, index.wrapping_add(1)));
    }

    #[test]
    fn activations_agree(x in -30.0f64..30.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
        prop_assert!((log_sigmoid(x) - s.ln()).abs() < 1e-9);
        prop_assert!((softplus(x) + log_sigmoid(-x)).abs() < 1e-12);
    }

    #[test]
    fn p_value_is_fraction_below(stats in prop::collection::vec(-5.0f64..5.0, 1..60), observed in -6.0f64..6.0) {
        let p = p_value(&stats, observed);
        prop_assert!((0.0..=1.0).contains(&p));
        let below = stats.iter().filter(|&&s| s < observed).count();
        prop_assert_eq!(p, below as f64 / stats.len() as f64);
    }

    #[test]
    fn quantile_is_monotone_and_bounded(values in prop::collection::vec(-100.0f64..100.0, 1..50), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (quantile(&values, lo), quantile(&values, hi));
        prop_assert!(a <= b);
        prop_assert!(min <= a && b <= max);
        prop_assert_eq!(quantile(&values, 0.0), min);
        prop_assert_eq!(quantile(&values, 1.0), max);
    }

    #[test]
    fn truncated_weights_stay_inside_percentiles(lens in lengths(), seed in any::<u64>()) {
        let ds = dataset(&lens, 2, 2, seed);
        let mut rng = RngStream::new(seed);
        let rows = ds.num_steps();
        let mut probs = || -> Vec<Vec<f64>> { (0..rows).map(|_| vec![rng.uniform() * 0.9 + 0.05, rng.uniform() * 0.9 + 0.05]).collect() };
        let (num, den) = (probs(), probs());
        let w = weights_from_probs(&ds, &num, &den, Some((0.01, 0.99)));
        let (lo, hi) = (quantile(&w.cumulative, 0.01), quantile(&w.cumulative, 0.99));
        for (&c, &t) in w.cumulative.iter().zip(&w.truncated) {
            prop_assert!(t >= lo && t <= hi);
            if c >= lo && c <= hi {
                prop_assert_eq!(c, t);
            }
        }
        let untruncated = weights_from_probs(&ds, &num, &den, None);
        prop_assert_eq!(untruncated.truncated, untruncated.cumulative);
    }

    #[test]
    fn rmse_is_a_scaled_norm(v in prop::collection::vec(-10.0f64..10.0, 1..30), c in 0.1f64..10.0) {
        let zero = vec![0.0; v.len()];
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        prop_assert!(rmse(&v, &zero) >= 0.0);
        prop_assert!((rmse(&scaled, &zero) - c * rmse(&v, &zero)).abs() < 1e-9);
        prop_assert_eq!(rmse(&v, &v), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_trajectories_are_well_formed(seed in any::<u64>(), gamma in 0.0f64..1.0, d_true in 1usize..4) {
        let cfg = SynthConfig { n_patients: 30, d_true, seed, ..SynthConfig::default() }.with_gamma(gamma);
        let ds = simulate_synthetic(&cfg).unwrap();
        prop_assert_eq!(ds.len(), 30);
        for p in &ds.patients {
            prop_assert!((cfg.t_min..=cfg.t_max).contains(&p.len()));
            prop_assert_eq!(p.x.len(), p.len());
            prop_assert_eq!(p.a.len(), p.len());
            prop_assert!(p.a.iter().flatten().all(|&v| v <= 1));
            prop_assert!(p.x.iter().flatten().chain(&p.y).all(|v| v.is_finite()));
            prop_assert_eq!(p.z.as_ref().unwrap()[0].len(), d_true);
        }
        prop_assert_eq!(simulate_synthetic(&cfg).unwrap().patients, ds.patients);
    }
}
