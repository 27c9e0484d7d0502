//! Greedy, beam and exhaustive search compared on tiny models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtcap_core::decoder::{TemporalMode, EOS};
use mtcap_core::decoding::{beam_search, greedy_decode, Hypothesis, ImageStepper, StepModel};
use mtcap_core::encoder::EncoderKind;
use mtcap_core::model::MtModel;
use mtcap_core::Result;

use crate::common::{random_views, tiny_cfg, Outcome};

/// Next-token probabilities given as a function of the words after `<s>`.
pub struct Table {
    pub vocab: usize,
    pub max_len: usize,
    pub probs: fn(&[usize]) -> Vec<f64>,
}

impl StepModel for Table {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_len(&self) -> usize {
        self.max_len
    }
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok((self.probs)(&prefix[1..]).into_iter().map(f64::ln).collect())
    }
}

const A: usize = 3;
const B: usize = 4;

/// Greedy takes `a` first (0.5 > 0.48) and ends on a·a = 0.40, while b·a =
/// 0.42 is the best sequence.
pub fn counterexample() -> Table {
    Table {
        vocab: 5,
        max_len: 2,
        probs: |p| match p {
            [] => vec![0.0, 0.0, 0.02, 0.5, 0.48],
            [A] => vec![0.0, 0.0, 0.05, 0.8, 0.15],
            _ => vec![0.0, 0.0, 0.025, 0.875, 0.1],
        },
    }
}

/// Every sequence with nonzero probability that ends in `</s>` or hits
/// the length limit, with its log-probability.
pub fn enumerate(model: &impl StepModel) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((toks, lp)) = stack.pop() {
        let mut prefix = vec![mtcap_core::decoder::BOS];
        prefix.extend(&toks);
        let dist = model.log_probs(&prefix).unwrap();
        for (t, &l) in dist.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut next: Vec<usize> = toks.clone();
            next.push(t);
            if t == EOS || next.len() == model.max_len() {
                out.push((next, lp + l));
            } else {
                stack.push((next, lp + l));
            }
        }
    }
    out
}

fn best_of(all: &[(Vec<usize>, f64)]) -> (Vec<usize>, f64) {
    all.iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .unwrap()
}

fn same_hypothesis(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.tokens == b.tokens && a.logp.to_bits() == b.logp.to_bits() && a.finished == b.finished
}

pub struct BeamStats {
    pub b1_mismatches: usize,
    pub beam_below_greedy: usize,
    pub comparisons: usize,
    pub logp_sum_errors: usize,
}

/// Beam vs greedy on random tiny transformers.
pub fn random_model_stats(models: u64) -> BeamStats {
    let mut s = BeamStats {
        b1_mismatches: 0,
        beam_below_greedy: 0,
        comparisons: 0,
        logp_sum_errors: 0,
    };
    for trial in 0..models {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + trial);
        let tm = if trial % 2 == 0 { TemporalMode::Lstm } else { TemporalMode::Pe };
        let model = MtModel::<f64>::new(tiny_cfg(EncoderKind::Sv, &[7], tm), trial).unwrap();
        let m = rng.gen_range(1..6);
        let views = random_views(&mut rng, &[7], &[m], false);
        let step = ImageStepper::new(&model, &views).unwrap();
        let greedy = greedy_decode(&step).unwrap();
        let b1 = beam_search(&step, 1, 0.0).unwrap().best;
        if !same_hypothesis(&greedy, &b1) {
            s.b1_mismatches += 1;
        }
        for width in 2..=4 {
            for alpha in [0.0, 0.7] {
                let r = beam_search(&step, width, alpha).unwrap();
                s.comparisons += 1;
                if r.best.score(alpha) < greedy.score(alpha) {
                    s.beam_below_greedy += 1;
                }
                for h in &r.beams {
                    let sum: f64 = h.step_logps.iter().sum();
                    if (sum - h.logp).abs() > 1e-6 || h.tokens.len() > model.cfg.max_len {
                        s.logp_sum_errors += 1;
                    }
                }
            }
        }
    }
    s
}

pub fn criterion() -> Outcome {
    let stats = random_model_stats(50);

    let ce = counterexample();
    let all = enumerate(&ce);
    let (best_toks, best_lp) = best_of(&all);
    let greedy = greedy_decode(&ce).unwrap();
    let beam = beam_search(&ce, 2, 0.0).unwrap().best;
    let ce_ok = beam.tokens == best_toks
        && (beam.logp - best_lp).abs() < 1e-12
        && best_toks == vec![B, A]
        && greedy.tokens == vec![A, A];

    // With B at least |live tokens|^n, beam search is exhaustive.
    let wide = Table {
        vocab: 6,
        max_len: 3,
        probs: |p| {
            let k = p.iter().sum::<usize>() as f64;
            let w = [0.0, 0.0, 0.1 + 0.05 * k, 0.5 - 0.1 * k.min(3.0), 0.3, 0.2];
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        },
    };
    let (wide_best, _) = best_of(&enumerate(&wide));
    let wide_ok = beam_search(&wide, 64, 0.0).unwrap().best.tokens == wide_best;

    let pass = stats.b1_mismatches == 0 && ce_ok && wide_ok && stats.beam_below_greedy == 0 && stats.logp_sum_errors == 0;
    Outcome::new(
        pass,
        format!(
            "B=1 vs greedy mismatches {}/50; counterexample greedy {:?} p={:.2}, B=2 {:?} p={:.2}, exhaustive best {:?} p={:.2}; wide beam = exhaustive argmax: {wide_ok}; beam below greedy in {}/{} (B∈2..4, α∈{{0,0.7}}); per-step logp sum mismatches {}",
            stats.b1_mismatches,
            greedy.tokens,
            greedy.logp.exp(),
            beam.tokens,
            beam.logp.exp(),
            best_toks,
            best_lp.exp(),
            stats.beam_below_greedy,
            stats.comparisons,
            stats.logp_sum_errors
        ),
    )
}
