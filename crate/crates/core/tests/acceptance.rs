//! Acceptance gate. Each criterion prints one `PASS` / `FAIL` line with its
//! measured value, pinned tolerance and runtime.

use std::time::{Duration, Instant};

use cmb_core::config::{Ablation, RunConfig};
use cmb_core::data::{gen_dataset, Dataset, GenOptions};
use cmb_core::metrics::{evaluate, EvalReport};
use cmb_core::train::{train, TrainOutputs};
use cmb_core::verify::{self, CheckResult, GradcheckSpec};

fn report(id: u32, title: &str, pass: bool, what: &str, elapsed: Duration, budget: Option<Duration>) -> bool {
    let in_time = budget.is_none_or(|b| elapsed < b);
    let ok = pass && in_time;
    let budget = budget.map_or(String::new(), |b| format!(" (budget {:.0}s)", b.as_secs_f64()));
    println!(
        "[{}] criterion {id}: {title}: {what}; runtime {:.2}s{budget}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn check(id: u32, title: &str, budget: Option<Duration>, run: impl FnOnce() -> Vec<CheckResult>) {
    let t = Instant::now();
    let results = run();
    let elapsed = t.elapsed();
    let pass = results.iter().all(CheckResult::passed);
    let what = results
        .iter()
        .map(|r| format!("{} = {:e} (tolerance {:e})", r.name, r.metric, r.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    assert!(report(id, title, pass, &what, elapsed, budget), "criterion {id} failed: {results:#?}");
}

#[test]
fn criterion_1_invertibility() {
    check(1, "coupling round trip", Some(Duration::from_secs(10)), || {
        vec![verify::invertibility(100, 8, 8, false, 0).unwrap()]
    });
}

#[test]
fn criterion_2_gradient_check() {
    let spec = GradcheckSpec::default();
    assert_eq!((spec.image_size, spec.tokens), (32, 4));
    assert!(spec.coordinates >= 500 && spec.tolerance == 1e-4);
    check(2, "full network gradient check", Some(Duration::from_secs(300)), || {
        vec![verify::gradcheck_network(&spec).unwrap()]
    });
}

#[test]
fn criterion_3_knn_oracle() {
    check(3, "KNN exhaustive-oracle equivalence", Some(Duration::from_secs(30)), || {
        vec![verify::knn_equivalence(200, 0).unwrap()]
    });
}

#[test]
fn criterion_4_kl_monte_carlo() {
    check(4, "closed-form KL vs Monte Carlo", Some(Duration::from_secs(60)), || {
        vec![verify::kl_monte_carlo(50, 200_000, 0).unwrap()]
    });
}

#[test]
fn criterion_5_ambiguity_bounds() {
    check(5, "ambiguity bounds", Some(Duration::from_secs(30)), || {
        vec![
            verify::ambiguity_bounds(1000, 0).unwrap(),
            verify::ambiguity_identical_heads(100, 0).unwrap(),
        ]
    });
}

#[test]
fn criterion_6_itim_residual_identity() {
    check(6, "interaction residual identity", None, || {
        vec![verify::itim_residual_identity(100, 0).unwrap()]
    });
}

fn desk_config(ablation: Ablation) -> RunConfig {
    RunConfig {
        ablation,
        seed: 1,
        epochs: 20,
        image_size: 64,
        threshold: 0.5,
        ..RunConfig::default()
    }
}

fn train_and_score(cfg: &RunConfig, train_set: &Dataset, held_out: &Dataset) -> (EvalReport, Duration) {
    let t = Instant::now();
    let outcome = train(cfg, train_set, Some(held_out), &TrainOutputs::default()).unwrap();
    let elapsed = t.elapsed();
    (evaluate(&outcome.net, held_out, cfg.threshold, cfg.batch).unwrap(), elapsed)
}

/// Criteria 7 to 9 share one training set and the FULL run.
#[test]
fn criteria_7_8_9_desk_scale_training() {
    let dir = tempfile::tempdir().unwrap();
    let base = desk_config(Ablation::Full);
    let gen = |name: &str, n, seed| {
        let path = dir.path().join(name);
        let opts = GenOptions {
            n,
            seed,
            size: base.image_size,
            tokens: base.n_tokens,
            width: base.d_text,
        };
        gen_dataset(&path, opts).unwrap();
        Dataset::load(&path).unwrap()
    };
    let train_set = gen("train", 400, 1);
    let held_out = gen("held_out", 100, 2);

    let (full, t_full) = train_and_score(&base, &train_set, &held_out);
    let ok7 = report(
        7,
        "desk-scale learning (FULL, 400 x 64x64, 20 epochs, seed 1)",
        full.f1 >= 0.75 && full.iou >= 0.60,
        &format!("held-out F1 = {:.4} (>= 0.75), IoU = {:.4} (>= 0.60)", full.f1, full.iou),
        t_full,
        Some(Duration::from_secs(15 * 60)),
    );

    let matched = full.ambiguity_matched.unwrap();
    let mismatched = full.ambiguity_mismatched.unwrap();
    let ok8 = report(
        8,
        "ambiguity discrimination",
        mismatched - matched >= 0.02,
        &format!(
            "mean a mismatched = {mismatched:.4}, matched = {matched:.4}, gap = {:.4} (>= 0.02)",
            mismatched - matched
        ),
        t_full,
        None,
    );

    let t = Instant::now();
    let mut rows = vec![(Ablation::Full, full.f1, full.iou)];
    for ab in [Ablation::Base, Ablation::BaseRed, Ablation::BaseRedItim] {
        let (r, _) = train_and_score(&desk_config(ab), &train_set, &held_out);
        rows.push((ab, r.f1, r.iou));
    }
    rows.sort_by_key(|r| Ablation::ALL.iter().position(|a| *a == r.0));
    for (ab, f1, iou) in &rows {
        println!("    ablation {:<11} F1 {f1:.4}  IoU {iou:.4}", ab.label());
    }
    let f1 = |ab: Ablation| rows.iter().find(|r| r.0 == ab).unwrap().1;
    let band = 0.01;
    let ok9 = report(
        9,
        "ablation ordering",
        f1(Ablation::Full) >= f1(Ablation::BaseRedItim) - band && f1(Ablation::BaseRedItim) >= f1(Ablation::Base) - band,
        &format!(
            "F1 FULL {:.4} >= B+RED+ITIM {:.4} >= B {:.4} within {band}",
            f1(Ablation::Full),
            f1(Ablation::BaseRedItim),
            f1(Ablation::Base)
        ),
        t.elapsed(),
        None,
    );
    assert!(ok7 && ok8 && ok9, "desk-scale criteria: 7 {ok7}, 8 {ok8}, 9 {ok9}");
}
