//! Bit-exact structural properties in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtcap_core::decoder::{TemporalMode, BOS};
use mtcap_core::encoder::EncoderKind;
use mtcap_core::model::MtModel;
use mtcap_core::tensor::Tensor;

use crate::common::{bits_equal, random_perm, random_views, random_words, tiny_cfg, Outcome};

const TRIALS: u64 = 100;

fn temporal(trial: u64) -> TemporalMode {
    if trial.is_multiple_of(2) {
        TemporalMode::Lstm
    } else {
        TemporalMode::Pe
    }
}

/// Changing token t never moves a logit at positions before t.
pub fn causal_violations() -> (usize, usize) {
    let mut violations = 0;
    let mut changed_at_t = 0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let cfg = tiny_cfg(EncoderKind::Sv, &[7], temporal(trial));
        let model = MtModel::<f64>::new(cfg.clone(), trial).unwrap();
        let m = rng.gen_range(1..6);
        let views = random_views(&mut rng, &[7], &[m], false);
        let mut ids = vec![BOS];
        ids.extend(random_words(&mut rng, cfg.max_len - 1, cfg.vocab_size));
        let t = rng.gen_range(1..ids.len());
        let mut other = ids.clone();
        while other[t] == ids[t] {
            other[t] = rng.gen_range(4..cfg.vocab_size);
        }
        let a = model.decode_train(&views, &ids).unwrap();
        let b = model.decode_train(&views, &other).unwrap();
        if (0..t).any(|i| !bits_equal(a.row(i), b.row(i))) {
            violations += 1;
        }
        if !bits_equal(a.row(t), b.row(t)) {
            changed_at_t += 1;
        }
    }
    (violations, changed_at_t)
}

pub fn causal_criterion() -> Outcome {
    let (v, changed) = causal_violations();
    Outcome::new(
        v == 0 && changed == TRIALS as usize,
        format!("{v} of {TRIALS} trials moved an earlier logit; position t itself changed in {changed}"),
    )
}

fn rows_permuted(out: &Tensor<f64>, base: &Tensor<f64>, perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(k, &p)| bits_equal(out.row(k), base.row(p)))
}

/// Counts failing trials for the four encoder properties.
pub struct EncoderChecks {
    pub sv_equivariance: usize,
    pub amv_equivariance: usize,
    pub umv_secondary_invariance: usize,
    pub umv_primary_equivariance: usize,
    pub amv_one_view_matches_sv: usize,
}

pub fn encoder_checks() -> EncoderChecks {
    let mut c = EncoderChecks {
        sv_equivariance: 0,
        amv_equivariance: 0,
        umv_secondary_invariance: 0,
        umv_primary_equivariance: 0,
        amv_one_view_matches_sv: 0,
    };
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let tm = temporal(trial);

        let sv = MtModel::<f64>::new(tiny_cfg(EncoderKind::Sv, &[7], tm), trial).unwrap();
        let m = rng.gen_range(2..7);
        let views = random_views(&mut rng, &[7], &[m], false);
        let perm = random_perm(&mut rng, m);
        let base = sv.encode(&views).unwrap().features;
        let out = sv.encode(&views.permute_view(0, &perm)).unwrap().features;
        if !rows_permuted(&out, &base, &perm) {
            c.sv_equivariance += 1;
        }

        let amv = MtModel::<f64>::new(tiny_cfg(EncoderKind::Amv, &[5, 7], tm), trial).unwrap();
        let views = random_views(&mut rng, &[5, 7], &[m, m], true);
        let base = amv.encode(&views).unwrap().features;
        let out = amv
            .encode(&views.permute_view(0, &perm).permute_view(1, &perm))
            .unwrap()
            .features;
        if !rows_permuted(&out, &base, &perm) {
            c.amv_equivariance += 1;
        }

        let umv = MtModel::<f64>::new(tiny_cfg(EncoderKind::Umv, &[5, 7, 6], tm), trial).unwrap();
        let rows = [m, rng.gen_range(1..7), rng.gen_range(1..7)];
        let views = random_views(&mut rng, &[5, 7, 6], &rows, false);
        let base = umv.encode(&views).unwrap().features;
        let p1 = random_perm(&mut rng, rows[1]);
        let p2 = random_perm(&mut rng, rows[2]);
        let shuffled = views.permute_view(1, &p1).permute_view(2, &p2);
        if !bits_equal(umv.encode(&shuffled).unwrap().features.data(), base.data()) {
            c.umv_secondary_invariance += 1;
        }
        let out = umv.encode(&views.permute_view(0, &perm)).unwrap().features;
        if !rows_permuted(&out, &base, &perm) {
            c.umv_primary_equivariance += 1;
        }

        // Same seed, same parameter names: AMV over one view is SV.
        let amv1 = MtModel::<f64>::new(tiny_cfg(EncoderKind::Amv, &[7], tm), trial).unwrap();
        let views = random_views(&mut rng, &[7], &[m], true);
        let mut ids = vec![BOS];
        ids.extend(random_words(&mut rng, 4, 9));
        let a = sv.decode_train(&views, &ids).unwrap();
        let b = amv1.decode_train(&views, &ids).unwrap();
        let same_params = sv.store.named_f32() == amv1.store.named_f32();
        if !same_params || !bits_equal(a.data(), b.data()) {
            c.amv_one_view_matches_sv += 1;
        }
    }
    c
}

pub fn encoder_criterion() -> Outcome {
    let c = encoder_checks();
    let total = c.sv_equivariance
        + c.amv_equivariance
        + c.umv_secondary_invariance
        + c.umv_primary_equivariance
        + c.amv_one_view_matches_sv;
    Outcome::new(
        total == 0,
        format!(
            "failing trials of {TRIALS}: SV equivariance {}, AMV equivariance {}, UMV secondary invariance {}, UMV primary equivariance {}, AMV(M=1)==SV {}",
            c.sv_equivariance,
            c.amv_equivariance,
            c.umv_secondary_invariance,
            c.umv_primary_equivariance,
            c.amv_one_view_matches_sv
        ),
    )
}
