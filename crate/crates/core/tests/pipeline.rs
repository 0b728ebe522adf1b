use rand::Rng;

use blowfish_rtp::adversary::{track, track_steps, ObservedRate, DEFAULT_GRID_POINTS};
use blowfish_rtp::mechanism::{publish_rate, Curator, PrivacyParams, SupportPreserving};
use blowfish_rtp::model::{
    expand_factorized, propagate_prior, BeliefKind, HouseholdSpec, JointMatrix, ModelClass, OccupancyModel,
    StateVector, TransitionSpec, DEFAULT_JOINT_LIMIT,
};
use blowfish_rtp::rng::{self, domain};
use blowfish_rtp::schema::ModelDocument;
use blowfish_rtp::simulator::{run, SimulationConfig};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn simulation_ignores_pool_size() {
    let config = SimulationConfig {
        n_households: 300,
        seed: 42,
        ..Default::default()
    };
    let one = in_pool(1, || run(&config).unwrap());
    let four = in_pool(4, || run(&config).unwrap());
    assert_eq!(one, four);
    let mut a = Vec::new();
    let mut b = Vec::new();
    one.write_csv(&mut a).unwrap();
    four.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seeds_change_output() {
    let base = SimulationConfig {
        n_households: 50,
        ..Default::default()
    };
    let a = run(&SimulationConfig { seed: 1, ..base.clone() }).unwrap();
    let b = run(&SimulationConfig { seed: 2, ..base }).unwrap();
    assert_ne!(a.records, b.records);
    assert_ne!(a.config_hash, b.config_hash);
}

fn two_house_model() -> (OccupancyModel, Vec<HouseholdSpec>) {
    let specs = vec![
        HouseholdSpec::new(0, 1.0, 0.2).unwrap(),
        HouseholdSpec::new(1, 0.7, 0.1).unwrap(),
    ];
    let steps = vec![vec![[[0.8, 0.2], [0.3, 0.7]], [[0.6, 0.4], [0.1, 0.9]]]];
    let model = OccupancyModel::new("pair", 2, vec![0.6, 0.5], TransitionSpec::factorized(steps).unwrap()).unwrap();
    (expand_factorized(&model, DEFAULT_JOINT_LIMIT).unwrap(), specs)
}

/// Simulate hidden occupancy from the joint chain and publish exact rates.
fn noiseless_fixture(model: &OccupancyModel, specs: &[HouseholdSpec], params: &PrivacyParams, steps: usize) -> (Vec<StateVector>, Vec<ObservedRate>) {
    let mut rng = rng::stream(5, domain::TRACK_FIXTURE, 0, 0);
    let TransitionSpec::Joint(mats) = model.transitions() else { unreachable!() };
    let pick = |probs: &[f64], rng: &mut rng::StreamRng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let mut idx = pick(model.initial(), &mut rng);
    let mut states = Vec::new();
    let mut rates = Vec::new();
    for t in 0..steps {
        if t > 0 {
            idx = pick(mats[(t - 1) % mats.len()].row(idx), &mut rng);
        }
        let s = StateVector::from_index(2, idx).unwrap();
        let z: f64 = specs.iter().map(|h| h.bound_in(s.is_occupied(h.id)) * rng.random::<f64>()).sum();
        let rec = publish_rate(t, z, 0.0, params, &mut rng).unwrap();
        states.push(s);
        rates.push(ObservedRate { r_hat: rec.r_published, lambda: 0.0 });
    }
    (states, rates)
}

#[test]
fn noiseless_tracking_respects_likelihood_support() {
    let (model, specs) = two_house_model();
    let params = PrivacyParams::new(0.5, 1.0, 62.5).unwrap();
    let (states, rates) = noiseless_fixture(&model, &specs, &params, 30);
    let posteriors = track(&rates, &model, &specs, &params, DEFAULT_GRID_POINTS, DEFAULT_JOINT_LIMIT).unwrap();
    for ((post, truth), obs) in posteriors.iter().zip(&states).zip(&rates) {
        let z = obs.r_hat - params.beta;
        let probs = post.probs().unwrap();
        // the realized state always survives
        assert!(probs[truth.index()] > 0.0);
        for (i, &p) in probs.iter().enumerate() {
            let s = StateVector::from_index(2, i).unwrap();
            let max_z: f64 = specs.iter().map(|h| h.bound_in(s.is_occupied(h.id))).sum();
            if z > max_z + 1e-9 {
                assert_eq!(p, 0.0, "state {s} cannot produce z={z}");
            }
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn uninformative_rates_follow_prior_chain() {
    let (model, specs) = two_house_model();
    let params = PrivacyParams::new(0.5, 1.0, 62.5).unwrap();
    let rates: Vec<ObservedRate> = (0..10).map(|t| ObservedRate { r_hat: 62.5 + t as f64 * 0.1, lambda: 1e7 }).collect();
    let steps = track_steps(&rates, &model, &specs, &params, 256, DEFAULT_JOINT_LIMIT).unwrap();
    let mut prior = model.initial_belief();
    for (t, s) in steps.iter().enumerate() {
        for (a, b) in s.posterior.probs().unwrap().iter().zip(prior.probs().unwrap()) {
            assert!((a - b).abs() < 1e-6, "t={t}");
        }
        prior = propagate_prior(&prior.with_kind(BeliefKind::Posterior), model.transitions(), t).unwrap();
    }
}

#[test]
fn curator_with_identity_chain_reports_constant_lambda() {
    let specs: Vec<HouseholdSpec> = (0..3).map(|i| HouseholdSpec::new(i, 1.0 - 0.1 * i as f64, 0.2).unwrap()).collect();
    // joint models take a 2^N initial vector
    assert!(OccupancyModel::new("frozen", 3, vec![0.5; 3], TransitionSpec::joint(vec![JointMatrix::identity(8)]).unwrap()).is_err());
    let initial = vec![0.125; 8];
    let model = OccupancyModel::new("frozen", 3, initial, TransitionSpec::joint(vec![JointMatrix::identity(8)]).unwrap()).unwrap();
    let params = PrivacyParams::new(0.5, 1.0, 62.5).unwrap();
    let mut curator = Curator::new(ModelClass::single(model), specs, params, SupportPreserving).unwrap();
    let mut rng = rng::stream(1, domain::RATE_NOISE, 0, 0);
    for _ in 0..5 {
        assert_eq!(curator.step(10.0, &mut rng).unwrap().lambda, 1.0);
    }
}

#[test]
fn model_document_feeds_tracker() {
    let (model, specs) = two_house_model();
    let doc = ModelDocument::from_model(&model, Some(&specs));
    let parsed = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
    let params = PrivacyParams::new(0.5, 1.0, 62.5).unwrap();
    let rates = vec![ObservedRate { r_hat: 63.0, lambda: 0.5 }];
    let a = track(&rates, &model, &specs, &params, 256, 12).unwrap();
    let b = track(&rates, &parsed.to_model().unwrap(), &parsed.household_specs().unwrap().unwrap(), &params, 256, 12).unwrap();
    assert_eq!(a, b);
}
