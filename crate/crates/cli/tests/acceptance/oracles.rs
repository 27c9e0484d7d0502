//! Metric values and the self-critical gradient against brute-force oracles.

use mtcap_core::metrics::{bleu, cider_per_image, rouge_l, CiderVariant, EvalCorpus};
use mtcap_core::tensor::{Tape, Tensor};
use mtcap_core::training::{lr_at_epoch, scst_sequence_loss, TrainConfig};

use crate::common::Outcome;

const TOL: f64 = 1e-6;

fn corpus(entries: &[(&str, &str, &[&str])]) -> EvalCorpus {
    let rows: Vec<(&str, &str, Vec<&str>)> = entries.iter().map(|(i, c, r)| (*i, *c, r.to_vec())).collect();
    EvalCorpus::from_strings(&rows).unwrap()
}

fn windows(ws: &[String], n: usize) -> Vec<Vec<String>> {
    if ws.len() < n {
        return Vec::new();
    }
    (0..=ws.len() - n).map(|i| ws[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> f64 {
    list.iter().filter(|x| x.as_slice() == g).count() as f64
}

/// Direct transcription of CIDEr / CIDEr-D with linear scans in place of
/// hash maps.
pub fn cider_oracle(items: &[(Vec<String>, Vec<Vec<String>>)], variant: CiderVariant) -> Vec<f64> {
    let n_docs = items.len() as f64;
    let df = |g: &[String]| -> f64 {
        items
            .iter()
            .filter(|(_, refs)| refs.iter().any(|r| count(&windows(r, g.len()), g) > 0.0))
            .count() as f64
    };
    let vecs = |ws: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let grams = windows(ws, n);
        let mut uniq: Vec<Vec<String>> = Vec::new();
        for g in &grams {
            if !uniq.contains(g) {
                uniq.push(g.clone());
            }
        }
        uniq.into_iter()
            .map(|g| {
                let w = count(&grams, &g) * (n_docs.ln() - df(&g).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    items
        .iter()
        .map(|(cand, refs)| {
            let mut total = 0.0;
            for r in refs {
                let delta = cand.len() as f64 - r.len() as f64;
                for n in 1..=4 {
                    let vc = vecs(cand, n);
                    let vr = vecs(r, n);
                    let mut dot = 0.0;
                    for (g, wc) in &vc {
                        for (h, wr) in &vr {
                            if g == h {
                                dot += match variant {
                                    CiderVariant::D => wc.min(*wr) * wr,
                                    CiderVariant::Plain => wc * wr,
                                };
                            }
                        }
                    }
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc != 0.0 && nr != 0.0 {
                        dot /= nc * nr;
                    }
                    if variant == CiderVariant::D {
                        dot *= (-delta * delta / 72.0).exp();
                    }
                    total += dot;
                }
            }
            total / 4.0 / refs.len() as f64 * 10.0
        })
        .collect()
}

fn cider_checks() -> (f64, f64) {
    // Two disjoint images whose candidates equal their references: every
    // n-gram has df 1, so uni- and bigram cosines are 1 and the
    // tri-/four-gram vectors are empty, giving (1 + 1 + 0 + 0) / 4 · 10.
    let simple = corpus(&[("0", "a b", &["a b"]), ("1", "c d", &["c d"])]);
    let mut hand_err: f64 = 0.0;
    for v in [CiderVariant::D, CiderVariant::Plain] {
        for s in cider_per_image(&simple, v).unwrap() {
            hand_err = hand_err.max((s - 5.0).abs());
        }
    }
    let toy = corpus(&[
        (
            "img1",
            "a red circle above a blue star",
            &["a red circle above a blue star", "a circle above a star"],
        ),
        ("img2", "a large square next-to a square", &["a large green square next-to a small square"]),
        (
            "img3",
            "a star",
            &["a small star left-of a red circle", "a star left-of a circle"],
        ),
        ("img4", "a small red triangle above a small red triangle", &["a small red triangle above a large blue circle"]),
    ]);
    let items: Vec<_> = toy
        .items()
        .iter()
        .map(|it| (it.candidate.clone(), it.references.clone()))
        .collect();
    let mut toy_err: f64 = 0.0;
    for v in [CiderVariant::D, CiderVariant::Plain] {
        let got = cider_per_image(&toy, v).unwrap();
        let want = cider_oracle(&items, v);
        for (g, w) in got.iter().zip(&want) {
            toy_err = toy_err.max((g - w).abs());
        }
    }
    (hand_err, toy_err)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Two-token, length-two tabular policy: `theta[0..2]` are first-step
/// logits, `theta[2..4]` / `theta[4..6]` the second-step logits after token
/// 0 / 1.
fn seq_prob(theta: &[f64], w: [usize; 2]) -> f64 {
    softmax(&theta[0..2])[w[0]] * softmax(&theta[2 + 2 * w[0]..4 + 2 * w[0]])[w[1]]
}

const REWARD: [[f64; 2]; 2] = [[0.3, 1.0], [0.0, 0.6]];
const SEQS: [[usize; 2]; 4] = [[0, 0], [0, 1], [1, 0], [1, 1]];

fn expected_reward(theta: &[f64]) -> f64 {
    SEQS.iter().map(|&w| seq_prob(theta, w) * REWARD[w[0]][w[1]]).sum()
}

/// Exact expectation over all four sequences of the per-sequence
/// self-critical loss gradient, with the greedy reward as baseline.
fn scst_expected_grad(theta: &[f64], baseline: f64) -> Vec<f64> {
    let mut total = vec![0.0; 6];
    for w in SEQS {
        let mut tape = Tape::<f64>::standalone(false, 0);
        let first = tape.leaf(Tensor::matrix(1, 2, theta[0..2].to_vec()).unwrap());
        let second = tape.leaf(Tensor::matrix(2, 2, theta[2..6].to_vec()).unwrap());
        let row = tape.slice_rows(second, w[0], 1).unwrap();
        let logits = tape.concat_rows(&[first, row]).unwrap();
        let adv = REWARD[w[0]][w[1]] - baseline;
        let loss = scst_sequence_loss(&mut tape, logits, &w, adv, 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = seq_prob(theta, w);
        let (g1, g2) = (g.get(first), g.get(second));
        for (k, v) in g1.data().iter().chain(g2.data()).enumerate() {
            total[k] += p * v;
        }
    }
    total
}

/// (max error vs −∇E[r], max difference between baseline and no baseline).
pub fn scst_check() -> (f64, f64) {
    let theta = [0.2, -0.1, 0.5, -0.3, -0.2, 0.4];
    let argmax = |x: &[f64]| if x[1] > x[0] { 1 } else { 0 };
    let g1 = argmax(&theta[0..2]);
    let g2 = argmax(&theta[2 + 2 * g1..4 + 2 * g1]);
    let baseline = REWARD[g1][g2];
    let ours = scst_expected_grad(&theta, baseline);
    let no_baseline = scst_expected_grad(&theta, 0.0);
    let h = 1e-6;
    let mut err: f64 = 0.0;
    let mut bias: f64 = 0.0;
    for k in 0..6 {
        let mut up = theta;
        let mut down = theta;
        up[k] += h;
        down[k] -= h;
        let d = (expected_reward(&up) - expected_reward(&down)) / (2.0 * h);
        err = err.max((ours[k] + d).abs());
        bias = bias.max((ours[k] - no_baseline[k]).abs());
    }
    (err, bias)
}

pub fn criterion() -> Outcome {
    let b = bleu(&corpus(&[("0", "the the the the", &["the cat"])]), 1).unwrap()[0];
    let r = rouge_l(&corpus(&[("0", "a b c", &["a c b"])])).unwrap();
    let (cider_hand, cider_toy) = cider_checks();
    let (scst_err, baseline_shift) = scst_check();
    let b_err = (b - 0.25).abs();
    // LCS 2 gives P = R = 2/3, and the F-measure of equal P and R is 2/3.
    let r_err = (r - 2.0 / 3.0).abs();
    let pass = [b_err, r_err, cider_hand, cider_toy, scst_err, baseline_shift]
        .iter()
        .all(|&e| e < TOL);
    Outcome::new(
        pass,
        format!(
            "BLEU-1 {b:.6} (want 0.25), ROUGE-L {r:.6} (want 2/3), CIDEr hand case err {cider_hand:.1e}, CIDEr toy corpus vs oracle err {cider_toy:.1e}, SCST expected gradient vs -grad E[r] err {scst_err:.1e}, baseline shift {baseline_shift:.1e}; tol {TOL:.0e}"
        ),
    )
}

pub fn lr_criterion() -> Outcome {
    let cfg = TrainConfig::default();
    let want = [
        1e-4, 2e-4, 3e-4, 3e-4, 3e-4, 3e-4, 1.5e-4, 1.5e-4, 1.5e-4, 7.5e-5, 7.5e-5, 7.5e-5, 3.75e-5, 3.75e-5, 3.75e-5,
    ];
    let got: Vec<f64> = (1..=15).map(|t| lr_at_epoch(t, &cfg).unwrap()).collect();
    let bad: Vec<usize> = (0..15).filter(|&i| got[i] != want[i]).map(|i| i + 1).collect();
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "epochs 1..15 match the table exactly".to_string()
        } else {
            format!("epochs {bad:?} differ: got {got:?}")
        },
    )
}
