//! Acceptance run: one line per criterion, exit status nonzero on any failure not recorded
//! as a known shortfall.

mod end_to_end;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Outcome of one criterion.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
    /// The failure is a measured shortfall written up in the decisions ledger.
    pub known: bool,
}

impl Verdict {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self {
            pass: true,
            detail: detail.into(),
            known: false,
        }
    }
    pub fn fail(detail: impl Into<String>) -> Self {
        Self {
            pass: false,
            detail: detail.into(),
            known: false,
        }
    }
}

pub type Check = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn within(limit: Duration, took: Duration, what: &str) -> Check {
    ensure!(took < limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(format!("{took:.1?}"))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> Verdict {
    let t0 = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::fail(format!("panicked: {msg}"))
    });
    let tag = match (v.pass, v.known) {
        (true, _) => "PASS",
        (false, true) => "FAIL (known, see decisions ledger)",
        (false, false) => "FAIL",
    };
    println!(
        "[{tag}] criterion {n:>2} {name} ({:.1?}): {}",
        t0.elapsed(),
        v.detail
    );
    v
}

fn from_check(c: Check) -> Verdict {
    match c {
        Ok(d) => Verdict::pass(d),
        Err(d) => Verdict::fail(d),
    }
}

fn main() {
    // `cargo test -- --list` and filters come through as arguments; only a bare run executes
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut verdicts = vec![
        run(1, "autodiff finite differences", || {
            from_check(oracles::autodiff())
        }),
        run(2, "attribution axioms", || {
            from_check(oracles::attribution_axioms())
        }),
        run(3, "gini", || from_check(oracles::gini_values())),
        run(4, "sae contracts", || from_check(oracles::sae_contracts())),
        run(5, "propagation", || from_check(oracles::propagation())),
        run(
            6,
            "diffusion optimizer",
            || from_check(oracles::diffusion()),
        ),
        run(7, "transformer optimizer", || {
            from_check(oracles::transformer())
        }),
        run(8, "umap constraint", || {
            from_check(oracles::umap_constraint())
        }),
        run(9, "pca", || from_check(oracles::pca_checks())),
        run(10, "statistics", || from_check(oracles::statistics())),
    ];
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut seed_one = None;
    verdicts.push(run(11, "planted-signal recovery", || {
        end_to_end::recovery(scratch.path(), &mut seed_one)
    }));
    verdicts.push(run(12, "end-to-end iid then ood", || {
        end_to_end::end_to_end(scratch.path(), seed_one)
    }));

    let hard: Vec<usize> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.pass && !v.known)
        .map(|(i, _)| i + 1)
        .collect();
    let known = verdicts.iter().filter(|v| !v.pass && v.known).count();
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!(
        "acceptance: {passed}/{} passed, {known} known shortfall(s), {} unexpected failure(s)",
        verdicts.len(),
        hard.len()
    );
    if !hard.is_empty() {
        eprintln!("unexpected failures: {hard:?}");
        std::process::exit(1);
    }
}
