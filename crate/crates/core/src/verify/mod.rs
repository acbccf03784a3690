//! Built-in oracle suite: finite-difference gradient checks of every loss
//! against its literal formula, stabilised-versus-naive SupCon, recomputation
//! of the paper's AA/PD tables and a moment test of the weight sampler.
//!
//! The losses under test are passed in as a [`LossImpls`] table so that a
//! deliberately broken implementation can be swapped in and caught.

pub mod oracle;
pub mod tables;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::classifier::StochasticClassifier;
use crate::datagen::mix_seed;
use crate::diffmath::{finite_difference_gradient, Graph, Tensor, Var};
use crate::losses::{self, LossConfig, LossError, PrototypeTable};

pub type SupconFn = fn(&mut Graph, Var, &[usize], f64) -> Result<Var, LossError>;
pub type CosineCeFn = fn(&mut Graph, Var, &[usize], Var, f64) -> Result<Var, LossError>;
pub type JointBaseFn = fn(&mut Graph, Var, Var, &[usize], Var, &LossConfig) -> Result<Var, LossError>;
pub type PrototypeFn = fn(&mut Graph, &PrototypeTable, Var, f64) -> Result<Var, LossError>;
pub type IncrementalFn = fn(&mut Graph, Var, &[usize], &PrototypeTable, Var, &LossConfig) -> Result<Var, LossError>;

/// The loss implementations a suite run exercises.
#[derive(Clone, Copy)]
pub struct LossImpls {
    pub supcon: SupconFn,
    pub cosine_ce: CosineCeFn,
    pub joint_base: JointBaseFn,
    pub prototype: PrototypeFn,
    pub incremental: IncrementalFn,
}

impl Default for LossImpls {
    fn default() -> Self {
        Self {
            supcon: losses::supcon_loss,
            cosine_ce: losses::cosine_ce_loss,
            joint_base: losses::joint_base_loss,
            prototype: losses::prototype_loss,
            incremental: losses::incremental_loss,
        }
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradient entries smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
pub const SUPCON_NAIVE_TOLERANCE: f64 = 1e-10;
pub const SUPCON_PERMUTATION_TOLERANCE: f64 = 1e-12;
/// Mean bound in units of `σ/√draws`.
pub const MOMENT_MEAN_SIGMAS: f64 = 4.0;
/// Relative bound on the sample standard deviation.
pub const MOMENT_STD_RELATIVE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per loss in the gradient checks.
    pub gradient_instances: usize,
    pub supcon_batches: usize,
    pub moment_draws: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_instances: 100,
            supcon_batches: 1000,
            moment_draws: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

/// The losses with a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Supcon,
    CosineCe,
    JointBase,
    Prototype,
    Incremental,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Supcon,
        LossKind::CosineCe,
        LossKind::JointBase,
        LossKind::Prototype,
        LossKind::Incremental,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Supcon => "supcon_loss",
            LossKind::CosineCe => "cosine_ce_loss",
            LossKind::JointBase => "joint_base_loss",
            LossKind::Prototype => "prototype_loss",
            LossKind::Incremental => "incremental_loss",
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<f64> {
    let mut v = normal(rng, n * p);
    for row in v.chunks_mut(p) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// `n` labels in which every class occurs at least twice.
fn paired_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n / 2);
    let mut labels: Vec<usize> = (0..2 * k).map(|i| i / 2).collect();
    labels.extend((2 * k..n).map(|_| rng.random_range(0..k)));
    labels.shuffle(rng);
    labels
}

/// One random problem instance for a loss: the differentiable inputs plus
/// everything held fixed.
struct Instance {
    params: Vec<Tensor>,
    labels: Vec<usize>,
    /// Row-major `d × c` prototypes and old columns, for the prototype term.
    protos: Option<(Tensor, Vec<usize>)>,
    cfg: LossConfig,
}

fn instance(kind: LossKind, rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=8);
    let c = rng.random_range(2..=6);
    let cfg = LossConfig {
        tau: rng.random_range(0.2..1.0),
        alpha: rng.random_range(0.1..0.9),
        scale: 1.0,
        ..LossConfig::default()
    };
    let mat = |rng: &mut ChaCha8Rng, r: usize, k: usize| Tensor::from_parts(vec![r, k], normal(rng, r * k));
    let ce_labels = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..c)).collect::<Vec<_>>();
    let protos = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..c);
        (mat(rng, d, c), (0..k).collect::<Vec<_>>())
    };
    match kind {
        LossKind::Supcon => Instance {
            params: vec![Tensor::from_parts(vec![n, d], unit_rows(rng, n, d))],
            labels: paired_labels(rng, n),
            protos: None,
            cfg,
        },
        LossKind::CosineCe => Instance {
            params: vec![mat(rng, n, d), mat(rng, d, c)],
            labels: ce_labels(rng),
            protos: None,
            cfg,
        },
        LossKind::JointBase => {
            let labels = paired_labels(rng, n);
            let classes = labels.iter().max().unwrap() + 1;
            let p = rng.random_range(2..=8);
            Instance {
                params: vec![mat(rng, n, d), Tensor::from_parts(vec![n, p], unit_rows(rng, n, p)), mat(rng, d, classes)],
                labels,
                protos: None,
                cfg,
            }
        }
        LossKind::Prototype => Instance {
            params: vec![mat(rng, d, c)],
            labels: Vec::new(),
            protos: Some(protos(rng)),
            cfg,
        },
        LossKind::Incremental => {
            let labels = ce_labels(rng);
            Instance {
                params: vec![mat(rng, n, d), mat(rng, d, c)],
                labels,
                protos: Some(protos(rng)),
                cfg,
            }
        }
    }
}

fn table_of(protos: &(Tensor, Vec<usize>)) -> PrototypeTable {
    PrototypeTable {
        matrix: protos.0.clone(),
        old_columns: protos.1.clone(),
    }
}

/// The implementation's value and gradients at `params`.
fn autodiff(kind: LossKind, impls: &LossImpls, inst: &Instance) -> Result<(f64, Vec<Tensor>), LossError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.params.iter().map(|t| g.param(t.clone())).collect();
    let y = &inst.labels;
    let cfg = &inst.cfg;
    let l = match kind {
        LossKind::Supcon => (impls.supcon)(&mut g, vars[0], y, cfg.tau)?,
        LossKind::CosineCe => (impls.cosine_ce)(&mut g, vars[0], y, vars[1], cfg.scale)?,
        LossKind::JointBase => (impls.joint_base)(&mut g, vars[0], vars[1], y, vars[2], cfg)?,
        LossKind::Prototype => {
            let table = table_of(inst.protos.as_ref().expect("prototype instance"));
            (impls.prototype)(&mut g, &table, vars[0], cfg.scale)?
        }
        LossKind::Incremental => {
            let table = table_of(inst.protos.as_ref().expect("incremental instance"));
            (impls.incremental)(&mut g, vars[0], y, &table, vars[1], cfg)?
        }
    };
    let grads = g.backward(l)?;
    Ok((g.value(l).data()[0], vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// The literal formula at `params`.
fn literal(kind: LossKind, inst: &Instance, params: &[Tensor]) -> f64 {
    let y = &inst.labels;
    let cfg = &inst.cfg;
    let ce = |e: &Tensor, w: &Tensor| oracle::cosine_ce_naive(e.data(), e.shape()[1], y, w.data(), w.shape()[1], cfg.scale);
    let proto = |w: &Tensor| {
        let (p, old) = inst.protos.as_ref().expect("prototype instance");
        oracle::prototype_naive(p.data(), w.data(), w.shape()[1], old, cfg.scale)
    };
    match kind {
        LossKind::Supcon => oracle::supcon_naive(params[0].data(), params[0].shape()[1], y, cfg.tau),
        LossKind::CosineCe => ce(&params[0], &params[1]),
        LossKind::JointBase => {
            cfg.lambda * ce(&params[0], &params[2])
                + cfg.beta * oracle::supcon_naive(params[1].data(), params[1].shape()[1], y, cfg.tau)
        }
        LossKind::Prototype => proto(&params[0]),
        LossKind::Incremental => cfg.alpha * proto(&params[1]) + (1.0 - cfg.alpha) * ce(&params[0], &params[1]),
    }
}

fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    crate::diffmath::max_relative_error(a, b, GRAD_FLOOR)
}

/// Compare the implementation's autodiff gradients with central differences
/// of the literal formula on `instances` random problems (`n, d ≤ 8`, `s = 1`).
pub fn gradient_check(kind: LossKind, impls: &LossImpls, seed: u64, instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6AD, kind as u64]));
    let mut worst = 0.0f64;
    let mut failure = None;
    for i in 0..instances {
        let inst = instance(kind, &mut rng);
        let (_, analytic) = match autodiff(kind, impls, &inst) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("instance {i}: {e}"));
                break;
            }
        };
        let numeric =
            finite_difference_gradient(|p| Ok::<_, std::convert::Infallible>(literal(kind, &inst, p)), &inst.params, FD_STEP)
                .expect("infallible");
        let err = relative_error(&analytic, &numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    let name = format!("gradient:{}", kind.name());
    match failure {
        Some(detail) => CheckResult { name, passed: false, detail },
        None => CheckResult {
            name,
            passed: worst <= GRAD_TOLERANCE,
            detail: format!("{instances} instances, max relative error {worst:.3e} (bound {GRAD_TOLERANCE:e})"),
        },
    }
}

fn supcon_value(impls: &LossImpls, z: &[f64], p: usize, labels: &[usize], tau: f64) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let v = g.input(Tensor::from_parts(vec![labels.len(), p], z.to_vec()));
    let l = (impls.supcon)(&mut g, v, labels, tau)?;
    Ok(g.value(l).data()[0])
}

struct SupconBatch {
    z: Vec<f64>,
    p: usize,
    labels: Vec<usize>,
    tau: f64,
}

fn supcon_batches(seed: u64, count: usize) -> Vec<SupconBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5C0]));
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=16);
            let p = rng.random_range(2..=16);
            let tau = [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)];
            SupconBatch {
                z: unit_rows(&mut rng, n, p),
                p,
                labels: paired_labels(&mut rng, n),
                tau,
            }
        })
        .collect()
}

/// Stabilised SupCon against the naive double loop on `batches` random
/// unit-row batches.
pub fn supcon_equivalence(impls: &LossImpls, seed: u64, batches: usize) -> CheckResult {
    let mut worst = 0.0f64;
    for b in supcon_batches(seed, batches) {
        let naive = oracle::supcon_naive(&b.z, b.p, &b.labels, b.tau);
        let diff = match supcon_value(impls, &b.z, b.p, &b.labels, b.tau) {
            Ok(v) => (v - naive).abs(),
            Err(_) => f64::INFINITY,
        };
        worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
    }
    CheckResult {
        name: "supcon:naive_equivalence".into(),
        passed: worst <= SUPCON_NAIVE_TOLERANCE,
        detail: format!("{batches} batches, max |stable − naive| {worst:.3e} (bound {SUPCON_NAIVE_TOLERANCE:e})"),
    }
}

/// SupCon under a joint shuffle of rows and labels.
pub fn supcon_permutation(impls: &LossImpls, seed: u64, batches: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9E6]));
    let mut worst = 0.0f64;
    for b in supcon_batches(seed, batches) {
        let n = b.labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let z2: Vec<f64> = perm.iter().flat_map(|&i| b.z[i * b.p..(i + 1) * b.p].iter().copied()).collect();
        let y2: Vec<usize> = perm.iter().map(|&i| b.labels[i]).collect();
        let diff = match (
            supcon_value(impls, &b.z, b.p, &b.labels, b.tau),
            supcon_value(impls, &z2, b.p, &y2, b.tau),
        ) {
            (Ok(a), Ok(c)) => (a - c).abs(),
            _ => f64::INFINITY,
        };
        worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
    }
    CheckResult {
        name: "supcon:permutation_invariance".into(),
        passed: worst <= SUPCON_PERMUTATION_TOLERANCE,
        detail: format!("{batches} batches, max difference {worst:.3e} (bound {SUPCON_PERMUTATION_TOLERANCE:e})"),
    }
}

/// Recompute every AA/PD cell of both printed tables. Passes when the only
/// disagreeing cells are the known printed errata.
pub fn table_reproduction() -> CheckResult {
    let cells = tables::check_all_tables();
    let failing: Vec<&str> = cells.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let unexpected: Vec<&str> = failing.iter().copied().filter(|n| !tables::PRINTED_ERRATA.contains(n)).collect();
    let missing: Vec<&str> = tables::PRINTED_ERRATA.iter().copied().filter(|n| !failing.contains(n)).collect();
    CheckResult {
        name: "tables:aa_pd".into(),
        passed: unexpected.is_empty() && missing.is_empty(),
        detail: format!(
            "{} of {} cells reproduce; printed errata {:?}; unexpected mismatches {:?}",
            cells.len() - failing.len(),
            cells.len(),
            tables::PRINTED_ERRATA,
            unexpected
        ),
    }
}

/// Draw `draws` weight matrices from a fixed classifier state and compare
/// per-entry sample moments with `(μ, σ)`.
pub fn moment_test(seed: u64, draws: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x303]));
    let (d, c) = (3, 4);
    let mu: Vec<Vec<f64>> = (0..c).map(|_| normal(&mut rng, d)).collect();
    let sigma: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| rng.random_range(0.05..0.5)).collect()).collect();
    let state = StochasticClassifier::from_parts(d, mu, sigma, (0..c).collect(), vec![0]).expect("valid state");
    let mu_m = state.mu_matrix().expect("non-empty");
    let sigma_m = state.sigma_matrix().expect("non-empty");
    let mut sum = vec![0.0; d * c];
    let mut sq = vec![0.0; d * c];
    for i in 0..draws {
        let w = state.sample_weights(mix_seed(&[seed, 0x303, i as u64])).expect("non-empty");
        for (k, v) in w.data().iter().enumerate() {
            let dev = v - mu_m.data()[k];
            sum[k] += dev;
            sq[k] += dev * dev;
        }
    }
    let nd = draws as f64;
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for k in 0..d * c {
        let s = sigma_m.data()[k];
        let mean_dev = sum[k] / nd;
        let var = (sq[k] - nd * mean_dev * mean_dev) / (nd - 1.0);
        worst_mean = worst_mean.max(mean_dev.abs() / (s / nd.sqrt()));
        worst_std = worst_std.max((var.sqrt() - s).abs() / s);
    }
    CheckResult {
        name: "classifier:moments".into(),
        passed: worst_mean <= MOMENT_MEAN_SIGMAS && worst_std <= MOMENT_STD_RELATIVE,
        detail: format!(
            "{draws} draws, worst mean offset {worst_mean:.2} σ/√n (bound {MOMENT_MEAN_SIGMAS}), worst std error {:.2}% (bound {:.0}%)",
            100.0 * worst_std,
            100.0 * MOMENT_STD_RELATIVE
        ),
    }
}

/// Run every check.
pub fn run_suite(cfg: &VerifyConfig, impls: &LossImpls) -> VerifyReport {
    let mut checks: Vec<CheckResult> = LossKind::ALL
        .iter()
        .map(|&k| gradient_check(k, impls, cfg.seed, cfg.gradient_instances))
        .collect();
    checks.push(supcon_equivalence(impls, cfg.seed, cfg.supcon_batches));
    checks.push(supcon_permutation(impls, cfg.seed, cfg.supcon_batches));
    checks.push(table_reproduction());
    checks.push(moment_test(cfg.seed, cfg.moment_draws));
    VerifyReport {
        config: cfg.clone(),
        checks,
    }
}

/// Names of the checks [`run_suite`] runs, in order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = LossKind::ALL.iter().map(|k| format!("gradient:{}", k.name())).collect();
    names.extend(
        ["supcon:naive_equivalence", "supcon:permutation_invariance", "tables:aa_pd", "classifier:moments"]
            .map(String::from),
    );
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            seed: 3,
            gradient_instances: 20,
            supcon_batches: 50,
            moment_draws: 2000,
        }
    }

    #[test]
    fn pristine_suite_passes() {
        let r = run_suite(&small(), &LossImpls::default());
        assert!(r.all_passed(), "{}", r.to_text());
        assert_eq!(r.checks.iter().map(|c| c.name.clone()).collect::<Vec<_>>(), check_names());
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(&small(), &LossImpls::default());
        let b = run_suite(&small(), &LossImpls::default());
        assert_eq!(a, b);
    }

    fn supcon_wrong_temperature(g: &mut Graph, z: Var, labels: &[usize], tau: f64) -> Result<Var, LossError> {
        losses::supcon_loss(g, z, labels, tau * 1.05)
    }

    #[test]
    fn perturbed_supcon_is_named() {
        let impls = LossImpls {
            supcon: supcon_wrong_temperature,
            ..LossImpls::default()
        };
        let r = run_suite(&small(), &impls);
        let failing = r.failing();
        assert!(failing.contains(&"gradient:supcon_loss"));
        assert!(failing.contains(&"supcon:naive_equivalence"));
        assert!(!failing.contains(&"gradient:cosine_ce_loss"));
    }

    #[test]
    fn paired_labels_have_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let y = paired_labels(&mut rng, n);
            assert_eq!(y.len(), n);
            for &c in &y {
                assert!(y.iter().filter(|&&v| v == c).count() >= 2);
            }
        }
    }
}
