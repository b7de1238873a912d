mod common;

use bmfa::config::RunConfig;
use bmfa::training::{gen_corpus, train, CorpusConfig, Utterance};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn nearest_template_on_utterance_means_is_perfect() {
    let corpus = gen_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(corpus.n_speakers, 20);
    assert_eq!(corpus.utterances.len(), 1000);
    for u in &corpus.utterances {
        let (t, dim) = (u.frames(), u.features.shape().f());
        let mean: Vec<f64> = (0..dim)
            .map(|d| (0..t).map(|r| u.features.data()[r * dim + d] as f64).sum::<f64>() / t as f64)
            .collect();
        let dist = |tpl: &Vec<f64>| tpl.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = (0..corpus.n_speakers)
            .min_by(|&a, &b| dist(&corpus.templates[a]).total_cmp(&dist(&corpus.templates[b])))
            .unwrap();
        assert_eq!(best, u.speaker, "{} misclassified", u.id);
    }
}

#[test]
fn loss_goes_down_on_the_standard_corpus() {
    let mut cfg = RunConfig::toy();
    cfg.train.steps = 200;
    let corpus = gen_corpus(&cfg.corpus).unwrap();
    let utts: Vec<Utterance> = corpus.train.iter().map(|&i| corpus.utterances[i].clone()).collect();
    let out = train(&cfg.model, &cfg.train, &utts, corpus.n_speakers, |_| {}).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|m| m.loss).collect();
    assert!(loss.iter().all(|l| l.is_finite()));
    let early = median(loss[..100].to_vec());
    let late = median(loss[100..200].to_vec());
    assert!(late < early, "median loss {early} -> {late}");
}
