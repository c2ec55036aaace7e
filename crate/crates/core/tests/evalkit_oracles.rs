use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scf_core::evalkit::{mean_likert, paired_t_test, score_test_set, top_ngrams, GRADE_SCALE};
use scf_core::sim::{GameSpec, QuestionKind};

const VOCAB: [&str; 9] = ["what", "is", "the", "duration", "of", "your", "pain", "Do", "you"];

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<String> {
    let texts = rng.gen_range(1..=12);
    (0..texts)
        .map(|_| {
            let len = rng.gen_range(0..=80);
            (0..len)
                .map(|_| {
                    let w = VOCAB[rng.gen_range(0..VOCAB.len())];
                    match rng.gen_range(0..6) {
                        0 => format!("{w}?"),
                        1 => format!("{w},"),
                        _ => w.to_string(),
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Recount by sliding a window over each text's lowercased, unpunctuated words.
fn brute_counts(corpus: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for text in corpus {
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c == '?' || c == ',').to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        let mut i = 0;
        while i + n <= words.len() {
            *counts.entry(words[i..i + n].join(" ")).or_insert(0) += 1;
            i += 1;
        }
    }
    counts
}

#[test]
fn ngram_counts_match_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let corpus = random_corpus(&mut rng);
        let n = rng.gen_range(1..=6);
        let expected = brute_counts(&corpus, n);
        let all = top_ngrams(&corpus, n, usize::MAX);
        let got: BTreeMap<String, usize> = all.iter().map(|r| (r.ngram.clone(), r.count)).collect();
        assert_eq!(got, expected, "trial {trial}");
        assert!(all.windows(2).all(|w| w[0].count > w[1].count
            || (w[0].count == w[1].count && w[0].ngram < w[1].ngram)));
        let k = rng.gen_range(1..=10);
        assert_eq!(top_ngrams(&corpus, n, k), all[..k.min(all.len())].to_vec());
    }
}

/// Two-sided tail P(|T| > t) by Simpson integration. Substituting
/// x = √ν·tan θ turns the t density into cos^(ν−1) θ on [0, π/2), so no
/// gamma functions are involved.
fn integrated_two_sided_p(t: f64, df: f64) -> f64 {
    let f = |theta: f64| theta.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64| {
        let steps = 20_000;
        let h = (b - a) / steps as f64;
        let inner: f64 = (1..steps)
            .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
            .sum();
        (f(a) + inner + f(b)) * h / 3.0
    };
    let theta = (t.abs() / df.sqrt()).atan();
    simpson(theta, FRAC_PI_2) / simpson(0.0, FRAC_PI_2)
}

#[test]
fn t_test_matches_integrated_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..50 {
        let n = rng.gen_range(2..=30);
        let shift = rng.gen_range(-1.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - shift + rng.gen_range(-2.0..2.0)).collect();
        let r = paired_t_test(&a, &b, 0.05).unwrap();
        let p = r.p.expect("random samples are not degenerate");
        let reference = integrated_two_sided_p(r.t, r.df);
        assert!((p - reference).abs() < 1e-6, "trial {trial}: {p} vs {reference} (t {}, df {})", r.t, r.df);
        assert_eq!(r.significant, p < 0.05);
    }
}

#[test]
fn grade_scale_and_score_example() {
    assert_eq!(score_test_set(&[1.0, 0.5, 0.0]).unwrap(), 50.0);
    assert_eq!(GRADE_SCALE, [1.0, 0.5, 0.0]);
    let spec = GameSpec::default();
    assert_eq!(spec.grade_diagnosis("dx00", "dx00").unwrap(), 1.0);
    assert_eq!(spec.grade_diagnosis("dx01", "dx00").unwrap(), 0.5);
    assert_eq!(spec.grade_diagnosis("dx02", "dx00").unwrap(), 0.0);
}

fn grades() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::sample::select(GRADE_SCALE.to_vec()), 1..200)
}

proptest! {
    #[test]
    fn score_is_permutation_invariant_and_bounded(
        (g, shuffled) in grades().prop_flat_map(|g| (Just(g.clone()), Just(g).prop_shuffle()))
    ) {
        let s = score_test_set(&g).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert_eq!(s, score_test_set(&shuffled).unwrap());
    }

    /// Moving probability mass from yes/no questions to the broad question
    /// lowers the expected Likert mean of the asked questions.
    #[test]
    fn broadness_drops_under_shift_to_broad(
        weights in prop::collection::vec(0.01..1.0f64, 17),
        shift in 0.01..1.0f64,
    ) {
        let spec = GameSpec::default();
        let likert: Vec<f64> =
            spec.question_actions.iter().map(|a| f64::from(a.broadness_likert)).collect();
        let total: f64 = weights.iter().sum();
        let before: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut after = before.clone();
        let mut moved = 0.0;
        for (i, a) in spec.question_actions.iter().enumerate() {
            if matches!(a.kind, QuestionKind::YesNo(_)) {
                moved += after[i] * shift;
                after[i] *= 1.0 - shift;
            }
        }
        let broad = spec.question_actions.iter().position(|a| a.kind == QuestionKind::Broad).unwrap();
        after[broad] += moved;
        let expect = |p: &[f64]| p.iter().zip(&likert).map(|(p, l)| p * l).sum::<f64>();
        prop_assert!(expect(&after) < expect(&before));
    }
}

/// The same shift measured on sampled questions through `mean_likert`.
#[test]
fn sampled_broadness_drops_under_shift_to_broad() {
    let spec = GameSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let yes_no: Vec<u8> = spec
        .question_actions
        .iter()
        .filter(|a| matches!(a.kind, QuestionKind::YesNo(_)))
        .map(|a| a.broadness_likert)
        .collect();
    let broad = spec.question_actions.iter().find(|a| a.kind == QuestionKind::Broad).unwrap();
    let mut last = f64::INFINITY;
    for share in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let asked: Vec<u8> = (0..400)
            .map(|i| {
                if (i as f64) < share * 400.0 {
                    broad.broadness_likert
                } else {
                    *yes_no.choose(&mut rng).unwrap()
                }
            })
            .collect();
        let mean = mean_likert(asked).unwrap();
        assert!(mean < last, "share {share}: {mean} vs {last}");
        last = mean;
    }
}
