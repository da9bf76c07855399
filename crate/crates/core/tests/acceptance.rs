//! One PASS/FAIL line per acceptance criterion. Criteria listed in
//! `KNOWN_UNMET` are reported but do not fail the run; every other
//! criterion must pass.

mod common;

use std::time::Instant;

use common::checks::{ablation_mismatches, expected_groups, live_groups, max_gradient_error};
use common::oracles::{elbo_toy, gaussian_entropy, gumbel_tv, iid_standard_entropy, kl_categorical_error, kl_gaussian_quadrature_error};
use common::{bleu_fixture, structural, NLTK_FULL};
use dialflow::evalkit::metrics::{bleu_n, distinct_n, rouge};
use dialflow::experiments::{run_memorization, run_structure_recovery, run_transfer, TransferSpec};
use dialflow::Variant;

/// Criteria that cannot be met as written; see the README.
const KNOWN_UNMET: &[u8] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let kl_g = kl_gaussian_quadrature_error();
    let kl_c = kl_categorical_error(200);
    let (ours, hand, _) = elbo_toy();
    let analytic = gaussian_entropy();
    let raw = iid_standard_entropy(1024, 1024, 9);
    let raw_rel = (raw - analytic).abs() / analytic;
    let tv = gumbel_tv(50_000);
    let pass = kl_g < 1e-3 && kl_c < 1e-12 && (ours - hand).abs() < 1e-10 && raw_rel < 0.1 && tv < 0.02;
    outcome(
        pass,
        format!(
            "kl_gaussian err {kl_g:.2e}; kl_categorical err {kl_c:.2e}; elbo err {:.2e}; entropy B=M=1024 {raw:.4} vs {analytic:.4} \
             (rel {raw_rel:.2}, minus ln M {:.4}); gumbel TV {tv:.4}",
            (ours - hand).abs(),
            raw - 1024f64.ln()
        ),
    )
}

fn criterion_2() -> Outcome {
    let (worst, checked) = max_gradient_error(3);
    let mut detached = Vec::new();
    for v in Variant::ALL {
        let live = live_groups(v);
        let expected = expected_groups(v);
        if live != expected {
            detached.push(format!("{v}: live {live:?} expected {expected:?}"));
        }
    }
    outcome(
        worst < 1e-3 && detached.is_empty(),
        format!("max rel err {worst:.2e} over {checked} coordinates; audit mismatches {detached:?}"),
    )
}

fn criterion_3() -> Outcome {
    let failures: Vec<String> = structural::ALL
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect();
    outcome(failures.is_empty(), format!("{} checks, failures {failures:?}", structural::ALL.len()))
}

fn criterion_4() -> Outcome {
    let r = run_memorization(200, 0).unwrap();
    outcome(
        r.improvement >= 0.5 && r.verbatim >= 8 && r.bleu_1 >= 0.9,
        format!(
            "reconstruction {:.3} -> {:.3} ({:.0}%); verbatim {}/{}; BLEU-1 {:.3}",
            r.first_reconstruction,
            r.last_reconstruction,
            100.0 * r.improvement,
            r.verbatim,
            r.total,
            r.bleu_1
        ),
    )
}

fn criterion_5() -> Outcome {
    let r = run_structure_recovery(5000, 3000, 0).unwrap();
    outcome(
        r.full_ami - r.random_ami >= 0.3 && r.random_ami.abs() < 0.02,
        format!(
            "full AMI {:.3}; random {:.4}; no_c has no states; {} utterances, {} steps",
            r.full_ami, r.random_ami, r.utterances, r.steps
        ),
    )
}

fn criterion_6() -> Outcome {
    let r = run_transfer(&[Variant::Full, Variant::NoLatents], &TransferSpec::default()).unwrap();
    let full = r.row(Variant::Full).unwrap();
    let none = r.row(Variant::NoLatents).unwrap();
    outcome(
        full.degradation.abs() <= 0.10 && none.degradation > full.degradation,
        format!(
            "full {:.4} -> {:.4} ({:+.2}%); no_zS_zI {:.4} -> {:.4} ({:+.2}%)",
            full.unfrozen_nll,
            full.frozen_nll,
            100.0 * full.degradation,
            none.unfrozen_nll,
            none.frozen_nll,
            100.0 * none.degradation
        ),
    )
}

fn criterion_7() -> Outcome {
    let bad = ablation_mismatches();
    outcome(bad.is_empty(), format!("{} variants; mismatched terms {bad:?}", Variant::ALL.len()))
}

fn criterion_8() -> Outcome {
    let (h, r) = bleu_fixture(20);
    let identical = (1..=4).all(|n| bleu_n(&r, &r, n).unwrap() == 1.0) && rouge(&r, &r).unwrap() == (1.0, 1.0, 1.0);
    let distinct = distinct_n(&[vec!["a", "b", "a", "b"]], 1).unwrap();
    let worst = (1..=4)
        .map(|n| (bleu_n(&h, &r, n).unwrap() - NLTK_FULL[n - 1]).abs())
        .fold(0.0, f64::max);
    outcome(
        identical && distinct == 0.5 && worst < 1e-6,
        format!("identical corpora score 1: {identical}; distinct-1 {distinct}; BLEU gap to reference {worst:.2e}"),
    )
}

fn main() {
    let criteria: [(u8, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut unexpected = Vec::new();
    for (id, run) in criteria {
        let start = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = if !o.pass && KNOWN_UNMET.contains(&id) { " (known)" } else { "" };
        println!("criterion {id}: {tag}{known} [{:.0}s] {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass && !KNOWN_UNMET.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
