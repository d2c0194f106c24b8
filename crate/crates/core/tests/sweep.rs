use nap_steer::metrics::SeqScore;
use nap_steer::nap::{Nap, NapConfig};
use nap_steer::perturb::{alpha_sweep, mean, SweepSpec};
use nap_steer::seq2seq::{ModelConfig, Seq2Seq};
use nap_steer::tasks::{decode_and_score, gen_rows, Sample, TaskKind, TaskSpec};

fn setup() -> (Seq2Seq, Nap, Vec<Sample>) {
    let model = Seq2Seq::init(ModelConfig::small(19, 10, 4)).unwrap();
    let nap = Nap::init(NapConfig {
        d_model: model.config().d_model,
        d_ffn: 16,
        seed: 2,
    });
    let spec = TaskSpec {
        kind: TaskKind::NoisyCopy,
        vocab_size: 19,
        min_len: 2,
        max_len: 6,
        noise_rate: 0.5,
        seed: 3,
        tag: None,
        keep_noise_above: None,
    };
    (model, nap, gen_rows(&spec, 30, 5).unwrap())
}

fn spec(alphas: &[f64]) -> SweepSpec<'_> {
    SweepSpec {
        task: "t",
        split: "test",
        alphas,
        beam: 1,
        max_len: 10,
        epsilon: 1e-12,
    }
}

#[test]
fn zero_alpha_reproduces_the_unperturbed_baseline() {
    let (model, nap, rows) = setup();
    let scored = decode_and_score(&model, &rows, &SeqScore, 10);
    let baseline = mean(&scored.iter().map(|r| r.score).collect::<Vec<_>>());
    let out = alpha_sweep(&model, &[(1, &nap)], &rows, &spec(&[0.0]), &SeqScore).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].mean_score.to_bits(), baseline.to_bits());
    assert_eq!(out.rows[0].n_samples, 30);
}

#[test]
fn identical_proxies_give_identical_scores() {
    let (model, nap, rows) = setup();
    let alphas = [0.0, 0.5, 2.0];
    let a = alpha_sweep(&model, &[(1, &nap), (2, &nap)], &rows, &spec(&alphas), &SeqScore).unwrap();
    let b = alpha_sweep(&model, &[(1, &nap)], &rows, &spec(&alphas), &SeqScore).unwrap();
    for &alpha in &alphas {
        let at = |r: &nap_steer::perturb::SweepResult, seed| {
            r.rows
                .iter()
                .find(|x| x.alpha == alpha && x.seed == seed)
                .unwrap()
                .mean_score
        };
        assert_eq!(at(&a, 1).to_bits(), at(&a, 2).to_bits());
        assert_eq!(at(&a, 1).to_bits(), at(&b, 1).to_bits());
    }
    let agg = a.aggregate();
    assert!(agg.iter().all(|s| s.std_score == Some(0.0) && s.n_seeds == 2));
}

#[test]
fn grids_without_zero_are_rejected() {
    let (model, nap, rows) = setup();
    assert!(alpha_sweep(&model, &[(1, &nap)], &rows, &spec(&[0.5]), &SeqScore).is_err());
    assert!(alpha_sweep(&model, &[(1, &nap)], &rows, &spec(&[0.0, -1.0]), &SeqScore).is_err());
    assert!(alpha_sweep(&model, &[], &rows, &spec(&[0.0]), &SeqScore).is_err());
}
