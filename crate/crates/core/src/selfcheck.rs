//! Built-in checks run by `comve selfcheck`: finite-difference gradient
//! checks, scoring invariants and the optimizer recurrence, all on tiny
//! configurations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointHeader};
use crate::dataset::{ExplanationExample, ValidationExample};
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::Result;
use crate::heads::{candidate_logits, distribution_from_logits, score_candidates};
use crate::model::{Example, Head, HeadKind, Model, Prepared, Task, TaskFormat};
use crate::params::{Graph, ParamStore};
use crate::report::{fallacy_rate, labels_from_choice};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenizedSequence, Vocab};
use crate::training::{AdamWState, FINE_TUNE_LR};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {} ({})", self.name, self.detail)
    }
}

/// Largest finite-difference disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_value(model: &Model, ex: &Prepared) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let (loss, _) = model.forward(&mut g, ex)?;
    Ok(g.tape.value(loss).data()[0])
}

/// Compares backprop gradients of the example loss against central
/// differences with step `h` for every parameter scalar.
pub fn gradient_check(model: &Model, ex: &Prepared, h: f64) -> Result<GradCheck> {
    let mut m = model.clone();
    m.store.zero_grads();
    let mut g = Graph::new(&m.store);
    let (loss, _) = m.forward(&mut g, ex)?;
    g.backward_into(loss, &mut m.store)?;
    let analytic = m.store.flat_grads();
    m.store.clear_grads();

    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let mut flat = 0;
    for id in m.store.ids().collect::<Vec<_>>() {
        for j in 0..m.store.get(id).numel() {
            let orig = m.store.get(id).data()[j];
            m.store.get_mut(id).data_mut()[j] = orig + h;
            let plus = loss_value(&m, ex)?;
            m.store.get_mut(id).data_mut()[j] = orig - h;
            let minus = loss_value(&m, ex)?;
            m.store.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[flat], numeric, 1e-6);
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst_param = format!("{}[{j}]", m.store.name(id));
            }
            out.checked += 1;
            flat += 1;
        }
    }
    Ok(out)
}

fn tiny_config(vocab_size: usize, pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_sequence_length: 12,
        pooling,
    }
}

fn tiny_vocab() -> Vocab {
    let corpus = [
        "he drinks milk . he drinks a car .",
        "a car is not a drink , you cannot drink a car .",
        "she reads a book about a stone",
    ];
    Vocab::build(&corpus, 64).expect("non-empty corpus")
}

fn validation_example() -> Example {
    Example::Validation(ValidationExample {
        id: "v".into(),
        sent0: "he drinks milk .".into(),
        sent1: "he drinks a car .".into(),
        label: 1,
    })
}

fn explanation_example() -> Example {
    Example::Explanation(ExplanationExample {
        id: "e".into(),
        false_sent: "he drinks a car .".into(),
        options: [
            "a car is not a drink .".into(),
            "she reads a book .".into(),
            "you cannot drink a stone .".into(),
        ],
        label: 0,
    })
}

fn random_sequence(rng: &mut impl Rng, vocab: usize, max_len: usize) -> TokenizedSequence {
    let real = rng.gen_range(2..=max_len);
    let mut ids = vec![crate::tokenizer::CLS];
    ids.extend((1..real).map(|_| rng.gen_range(4..vocab as u32)));
    let mut mask = vec![1u8; real];
    ids.resize(max_len, crate::tokenizer::PAD);
    mask.resize(max_len, 0);
    TokenizedSequence {
        ids,
        attention_mask: mask,
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

const GRAD_TOL: f64 = 1e-4;

fn grad_check_case(task: Task, head: HeadKind, pooling: Pooling) -> Result<(bool, String)> {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(vocab.len(), pooling), head, 11)?;
    let format = TaskFormat {
        task,
        head,
        template: None,
        max_len: 12,
    };
    let ex = match task {
        Task::A => validation_example(),
        Task::B => explanation_example(),
    };
    let prepared = format.prepare(&vocab, &ex)?;
    let r = gradient_check(&model, &prepared, 1e-5)?;
    Ok((
        r.max_rel_error <= GRAD_TOL,
        format!(
            "{} scalars, max rel err {:.2e} at {}",
            r.checked, r.max_rel_error, r.worst_param
        ),
    ))
}

fn siamese_parts(seed: u64) -> Result<(Model, crate::encoder::EncoderWeights, crate::heads::ScorerHead)> {
    let model = Model::new(tiny_config(30, Pooling::Mean), HeadKind::Siamese, seed)?;
    let Head::Siamese(head) = model.head.clone() else {
        unreachable!("siamese model has a scorer head")
    };
    let enc = model.encoder.clone();
    Ok((model, enc, head))
}

fn softmax_normalization() -> Result<(bool, String)> {
    let (model, enc, head) = siamese_parts(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let cands: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, 30, 12)).collect();
        let d = score_candidates(&model.store, &enc, &head, &cands)?;
        worst = worst.max((d.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let extreme = distribution_from_logits(&[1000.0, -1000.0, 0.0])?;
    worst = worst.max((extreme.probs.iter().sum::<f64>() - 1.0).abs());
    Ok((worst <= 1e-9, format!("max |sum - 1| = {worst:.1e}")))
}

fn identical_candidates_uniform() -> Result<(bool, String)> {
    let (model, enc, head) = siamese_parts(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = random_sequence(&mut rng, 30, 12);
    let d = score_candidates(&model.store, &enc, &head, &[c.clone(), c.clone(), c])?;
    let dev = d.probs.iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    Ok((dev <= 1e-12 && d.predicted_index == 0, format!("max deviation {dev:.1e}")))
}

fn two_way_logistic() -> Result<(bool, String)> {
    let (model, enc, head) = siamese_parts(7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cands = [random_sequence(&mut rng, 30, 12), random_sequence(&mut rng, 30, 12)];
    let mut g = Graph::new(&model.store);
    let logits = candidate_logits(&mut g, &model.store, &enc, &head, &cands)?;
    let l = g.tape.value(logits).data().to_vec();
    let d = score_candidates(&model.store, &enc, &head, &cands)?;
    let expected = 1.0 / (1.0 + (l[1] - l[0]).exp());
    let err = (d.probs[0] - expected).abs();
    Ok((err <= 1e-12, format!("|p0 - sigmoid(l0 - l1)| = {err:.1e}")))
}

fn permutation_equivariance() -> Result<(bool, String)> {
    let (model, enc, head) = siamese_parts(9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut index_ok = true;
    for _ in 0..25 {
        let n = rng.gen_range(2..=4);
        let cands: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, 30, 12)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let a = score_candidates(&model.store, &enc, &head, &cands)?;
        let b = score_candidates(&model.store, &enc, &head, &permuted)?;
        for (k, &i) in perm.iter().enumerate() {
            worst = worst.max((b.probs[k] - a.probs[i]).abs());
        }
        index_ok &= perm[b.predicted_index] == a.predicted_index;
    }
    Ok((worst <= 1e-9 && index_ok, format!("25 examples, max deviation {worst:.1e}")))
}

/// The full 3-candidate loss gradient equals the sum of per-candidate
/// gradients of `(pᵢ − [i = gold]) · logitᵢ` with `p` held fixed.
fn weight_sharing() -> Result<(bool, String)> {
    let (model, enc, head) = siamese_parts(12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cands: Vec<_> = (0..3).map(|_| random_sequence(&mut rng, 30, 12)).collect();
    let gold = 1;
    let prepared = Prepared {
        id: "w".into(),
        inputs: cands.clone(),
        supports: vec![0, 1, 2],
        n_options: 3,
        gold,
    };

    let mut full = model.clone();
    full.store.zero_grads();
    let mut g = Graph::new(&full.store);
    let (loss, pred) = full.forward(&mut g, &prepared)?;
    g.backward_into(loss, &mut full.store)?;

    let mut split = model.clone();
    split.store.zero_grads();
    for (i, c) in cands.iter().enumerate() {
        let coef = pred.option_scores[i] - f64::from(u8::from(i == gold));
        let mut g = Graph::new(&split.store);
        let logit = candidate_logits(&mut g, &split.store, &enc, &head, std::slice::from_ref(c))?;
        let weighted = g.tape.scale(logit, coef)?;
        let total = g.tape.sum(weighted)?;
        g.backward_into(total, &mut split.store)?;
    }
    let worst = full
        .store
        .flat_grads()
        .iter()
        .zip(split.store.flat_grads())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-8, format!("max |difference| = {worst:.1e}")))
}

fn pad_invariance() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for pooling in [Pooling::Cls, Pooling::Mean] {
        let model = Model::new(tiny_config(30, pooling), HeadKind::Siamese, 14)?;
        let Head::Siamese(head) = &model.head else {
            unreachable!("siamese model has a scorer head")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_sequence(&mut rng, 30, 8).trimmed();
        let b = random_sequence(&mut rng, 30, 8).trimmed();
        let short = score_candidates(&model.store, &model.encoder, head, &[a.clone(), b.clone()])?;
        let long = score_candidates(
            &model.store,
            &model.encoder,
            head,
            &[a.with_padding(12 - a.len()), b.with_padding(12 - b.len())],
        )?;
        for (x, y) in short.probs.iter().zip(&long.probs) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max deviation {worst:.1e}")))
}

fn siamese_fallacy_free() -> Result<(bool, String)> {
    let (model, _, _) = siamese_parts(16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut labels = Vec::new();
    for k in 0..20 {
        let prepared = Prepared {
            id: format!("p{k}"),
            inputs: vec![random_sequence(&mut rng, 30, 12), random_sequence(&mut rng, 30, 12)],
            supports: vec![0, 1],
            n_options: 2,
            gold: 0,
        };
        let p = model.predict(&prepared)?;
        labels.extend(labels_from_choice(&prepared.id, p.predicted_index));
    }
    let rate = fallacy_rate(&labels)?;
    Ok((rate == 0.0, format!("fallacy rate {rate}")))
}

/// Three AdamW steps on one scalar against the recurrence written out by
/// hand.
fn adamw_oracle() -> Result<(bool, String)> {
    let (lr, b1, b2, eps, wd) = (FINE_TUNE_LR, 0.9, 0.999, 1e-8, 0.01);
    let grads = [0.5, -1.5, 0.25];
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0));
    let mut opt = AdamWState::new(&store, lr, b1, b2, eps, wd);

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        store.zero_grads();
        store.get_mut(id).accumulate_grad(&[g])?;
        opt.step(&mut store)?;

        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * x);
        worst = worst.max((store.get(id).data()[0] - x).abs());
    }
    Ok((worst <= 1e-12, format!("3 steps, max |difference| = {worst:.1e}")))
}

fn checkpoint_roundtrip() -> Result<(bool, String)> {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(vocab.len(), Pooling::Cls), HeadKind::Binary, 18)?;
    let header = CheckpointHeader {
        encoder: *model.config(),
        head: HeadKind::Binary,
        task: Task::A,
        template: None,
        vocab: vocab.tokens().to_vec(),
        epoch: 0,
        dev_accuracy: None,
    };
    let bytes = checkpoint::encode(&header, &model)?;
    let (h, params) = checkpoint::decode(&bytes)?;
    let restored = checkpoint::restore(&h, params)?;
    let same = restored.store.checksum() == model.store.checksum() && h == header;
    Ok((same, format!("{} bytes", bytes.len())))
}

/// Runs every check; the order is fixed.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("gradient check: siamese loss, 2 candidates", || {
            grad_check_case(Task::A, HeadKind::Siamese, Pooling::Cls)
        }),
        check("gradient check: siamese loss, 3 candidates, mean pooling", || {
            grad_check_case(Task::B, HeadKind::Siamese, Pooling::Mean)
        }),
        check("gradient check: binary classifier loss", || {
            grad_check_case(Task::A, HeadKind::Binary, Pooling::Mean)
        }),
        check("softmax normalization", softmax_normalization),
        check("identical candidates score uniformly", identical_candidates_uniform),
        check("two candidates: logistic of the logit gap", two_way_logistic),
        check("permutation equivariance", permutation_equivariance),
        check("shared encoder gradient is the sum over candidates", weight_sharing),
        check("padding does not change scores", pad_invariance),
        check("siamese choices have no fallacies", siamese_fallacy_free),
        check("AdamW matches the scalar recurrence", adamw_oracle),
        check("checkpoint round trip", checkpoint_roundtrip),
    ]
}
