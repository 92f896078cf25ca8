use std::collections::HashMap;

use ctxpred::synth::{
    choice_probabilities, generate_markov_corpus, run_simulation, sample_choice,
    simulate_substitutions, IndependentFeatures, MarkovChain, ProviderKind, SimulationConfig,
    SpeakerPolicy, POLICY_FEATURES,
};
use ctxpred::{Corpus, Speaker, Utterance};
use indexmap::IndexMap;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn policy(beta: &[(&str, f64)]) -> SpeakerPolicy {
    SpeakerPolicy {
        true_beta: beta.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        temperature: 1.0,
    }
}

fn slot_corpus(n: usize) -> (Corpus, IndependentFeatures) {
    let words: Vec<String> = (0..100).map(|i| format!("v{i}")).collect();
    let utts = (0..n)
        .map(|i| Utterance::new("c", Speaker::A, vec![words[i % words.len()].clone()]))
        .collect();
    (
        Corpus::new(utts),
        IndependentFeatures::new(words, 10).unwrap(),
    )
}

#[test]
fn markov_bigram_frequencies_match_the_transition_matrix() {
    let chain = MarkovChain::random(5, 3);
    let corpus = generate_markov_corpus(14_000, &chain, 9).unwrap();
    assert!(
        corpus.token_count() >= 100_000,
        "{} tokens",
        corpus.token_count()
    );
    let index: HashMap<&str, usize> = chain
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut counts = vec![vec![0u64; 5]; 5];
    for utt in corpus.iter() {
        for pair in utt.tokens.windows(2) {
            counts[index[pair[0].as_str()]][index[pair[1].as_str()]] += 1;
        }
    }
    for (i, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let freq = c as f64 / total as f64;
            assert!(
                (freq - chain.transition[i][j]).abs() < 0.02,
                "{i}->{j}: {freq} vs {}",
                chain.transition[i][j]
            );
        }
    }
    let mean_len = corpus.token_count() as f64 / corpus.len() as f64;
    assert!((mean_len - chain.mean_length).abs() < 0.2, "{mean_len}");
}

#[test]
fn markov_corpus_is_seed_deterministic() {
    let chain = MarkovChain::random(8, 1);
    let a = generate_markov_corpus(200, &chain, 5).unwrap();
    let b = generate_markov_corpus(200, &chain, 5).unwrap();
    let c = generate_markov_corpus(200, &chain, 6).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_ne!(a.to_jsonl(), c.to_jsonl());
}

#[test]
fn invalid_chains_are_rejected() {
    let mut chain = MarkovChain::random(3, 0);
    chain.transition[1][0] += 0.1;
    assert!(generate_markov_corpus(10, &chain, 0)
        .unwrap_err()
        .to_string()
        .contains("row 1"));
    let mut chain = MarkovChain::random(3, 0);
    chain.states[2] = "w0".into();
    assert!(generate_markov_corpus(10, &chain, 0).is_err());
}

#[test]
fn softmax_sampler_matches_its_probabilities() {
    let utilities = [0.3, -1.2, 2.0, 0.0, 1.1];
    for temperature in [0.5, 1.0, 3.0] {
        let probs = choice_probabilities(&utilities, temperature);
        let mut rng = ctxpred::rng::stream(21, 0);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_choice(&utilities, temperature, &mut rng)] += 1;
        }
        let tv: f64 = 0.5
            * counts
                .iter()
                .zip(&probs)
                .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
                .sum::<f64>();
        assert!(tv < 0.01, "T={temperature}: TV {tv}");
    }
}

#[test]
fn softmax_handles_extreme_utilities_and_temperature() {
    let p = choice_probabilities(&[1000.0, 0.0, -1000.0], 1.0);
    assert!((p[0] - 1.0).abs() < 1e-12 && p.iter().all(|v| v.is_finite()));
    let flat = choice_probabilities(&[1.0, 2.0, 3.0], 1e6);
    assert!(flat.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
}

#[test]
fn zero_coefficients_choose_uniformly_among_competitors() {
    let (corpus, provider) = slot_corpus(5000);
    let zero: Vec<(&str, f64)> = POLICY_FEATURES.iter().map(|f| (*f, 0.0)).collect();
    let sim = simulate_substitutions(&corpus, &policy(&zero), &provider, 4).unwrap();
    let mut slots = [0u64; 9];
    let mut k = 0;
    for row in &sim.rows {
        if row.is_repair {
            k = 0;
            continue;
        }
        if row.produced == 1 {
            slots[k] += 1;
        }
        k += 1;
    }
    assert_eq!(slots.iter().sum::<u64>(), 5000);
    let expected = 5000.0 / 9.0;
    let stat: f64 = slots
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(stat);
    assert!(p > 0.001, "χ² = {stat}, p = {p}");
}

#[test]
fn produced_cond_pmi_rises_with_its_coefficient() {
    let (corpus, provider) = slot_corpus(3000);
    let mut means = Vec::new();
    for beta in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let sim =
            simulate_substitutions(&corpus, &policy(&[("cond_pmi", beta)]), &provider, 8).unwrap();
        let chosen: Vec<f64> = sim
            .rows
            .iter()
            .filter(|r| r.produced == 1)
            .map(|r| r.cond_pmi)
            .collect();
        means.push(chosen.iter().sum::<f64>() / chosen.len() as f64);
    }
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn target_row_is_never_produced_and_every_frame_has_one_choice() {
    let (corpus, provider) = slot_corpus(500);
    let sim =
        simulate_substitutions(&corpus, &policy(&[("sem_dist", -50.0)]), &provider, 2).unwrap();
    let mut per_frame: IndexMap<usize, (u32, u32)> = IndexMap::new();
    for r in &sim.rows {
        let e = per_frame.entry(r.frame_id).or_default();
        e.0 += u32::from(r.produced);
        e.1 += u32::from(r.is_repair);
        assert!(!(r.is_repair && r.produced == 1), "frame {}", r.frame_id);
    }
    assert_eq!(per_frame.len(), 500);
    assert!(per_frame.values().all(|&(p, t)| p == 1 && t == 1));
    assert_eq!(sim.truth.frames.len(), 500);
}

#[test]
fn simulation_config_runs_end_to_end_with_both_providers() {
    for provider in [ProviderKind::Independent, ProviderKind::Pipeline] {
        let config = SimulationConfig {
            n_utts: 60,
            n_states: 20,
            n_candidates: 10,
            provider,
            seed: 3,
            transition: None,
            true_beta: SpeakerPolicy::default().true_beta,
            temperature: 1.0,
        };
        let (corpus, a) = run_simulation(&config).unwrap();
        let (_, b) = run_simulation(&config).unwrap();
        assert_eq!(corpus.len(), 60);
        assert_eq!(a.rows, b.rows, "{provider:?}");
        assert_eq!(
            a.truth.n_frames,
            a.rows.iter().filter(|r| r.produced == 1).count()
        );
    }
}
