//! Monte-Carlo KL estimators against exact sums, quadrature and closed forms.

use lwta_icp::bayes::{kl_bernoulli, kl_categorical_mc, kl_kumaraswamy_beta};
use lwta_icp::icp::mi_min_bound;
use lwta_icp::samplers::{sample_categorical_hard, sample_kumaraswamy, RngState};
use lwta_icp::tensor::{Tape, Tensor};

const N: usize = 100_000;
const REL_TOL: f64 = 0.01;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ── Oracles ────────────────────────────────────────────────────────────────

fn categorical_exact(q: &[f64]) -> f64 {
    let u = q.len() as f64;
    q.iter().map(|&p| p * (p * u).ln()).sum()
}

/// Composite Simpson rule on (0, 1) with endpoint values taken as limits.
fn simpson(f: impl Fn(f64) -> f64, f0: f64, f1: f64, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let inner: f64 = (1..n).map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f0 + f1 + inner) * h / 3.0
}

fn kumaraswamy_beta_quadrature(a: f64, b: f64, omega: f64) -> f64 {
    let ln_q = |u: f64| a.ln() + b.ln() + (a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u.powf(a)).ln();
    let ln_p = |u: f64| omega.ln() + (omega - 1.0) * u.ln();
    let f = |u: f64| ln_q(u).exp() * (ln_q(u) - ln_p(u));
    // substitute u = s^2 to tame the integrable log singularity at 0
    let g = |s: f64| 2.0 * s * f(s * s);
    simpson(g, 0.0, if b > 1.0 { 0.0 } else { 2.0 * f(1.0 - 1e-15) }, 200_000)
}

// ── Categorical ────────────────────────────────────────────────────────────

#[test]
fn categorical_mc_matches_exact_sum() {
    let q = [0.9, 0.05, 0.05];
    let exact = categorical_exact(&q);
    assert!((exact - 0.704_2).abs() < 1e-3);
    let logits = Tensor::new(&[N, 3], q.iter().map(|p| p.ln()).cycle().take(3 * N).collect()).unwrap();
    let sample = sample_categorical_hard(&logits, &mut RngState::seed(21)).unwrap();
    let tape = Tape::no_grad();
    let probs = tape.constant(Tensor::new(&[N, 3], q.iter().copied().cycle().take(3 * N).collect()).unwrap());
    let mc = kl_categorical_mc(probs, tape.constant(sample)).unwrap().item() / N as f64;
    assert!(rel(mc, exact) <= REL_TOL, "mc {mc} vs exact {exact}");
}

#[test]
fn categorical_expected_value_is_exact_with_true_probs_as_sample() {
    // E_q[one-hot] = q, so plugging in q itself must reproduce the exact sum.
    let q = [0.6, 0.25, 0.1, 0.05];
    let tape = Tape::no_grad();
    let p = tape.constant(Tensor::new(&[1, 4], q.to_vec()).unwrap());
    let v = kl_categorical_mc(p, p).unwrap().item();
    assert!((v - categorical_exact(&q)).abs() < 1e-12);
}

// ── Kumaraswamy vs Beta ────────────────────────────────────────────────────

#[test]
fn quadrature_oracle_sanity() {
    // Kumaraswamy(1, 1) is Uniform = Beta(1, 1): KL 0.
    assert!(kumaraswamy_beta_quadrature(1.0, 1.0, 1.0).abs() < 1e-9);
    // Kumaraswamy(a, 1) = Beta(a, 1): KL[Beta(a,1) || Beta(w,1)] = ln(a/w) + (w - a)/a
    let (a, w) = (3.0f64, 0.5f64);
    let closed = (a / w).ln() + (w - a) / a;
    assert!((kumaraswamy_beta_quadrature(a, 1.0, w) - closed).abs() < 1e-6);
    // frozen from an independent adaptive quadrature
    assert!((kumaraswamy_beta_quadrature(2.0, 5.0, 2.0) - 0.809_44).abs() < 1e-4);
    assert!((kumaraswamy_beta_quadrature(3.0, 1.0, 0.5) - 0.958_43).abs() < 1e-4);
}

#[test]
fn kumaraswamy_beta_mc_matches_quadrature() {
    for (a, b, omega, seed) in [(2.0, 5.0, 2.0, 22), (3.0, 1.0, 0.5, 23)] {
        let exact = kumaraswamy_beta_quadrature(a, b, omega);
        let tape = Tape::no_grad();
        let av = tape.constant(Tensor::full(&[N], a));
        let bv = tape.constant(Tensor::full(&[N], b));
        let u = sample_kumaraswamy(av, bv, &mut RngState::seed(seed)).unwrap();
        let mc = kl_kumaraswamy_beta(av, bv, u, omega).unwrap().item() / N as f64;
        assert!(rel(mc, exact) <= REL_TOL, "({a}, {b}, {omega}): mc {mc} vs quadrature {exact}");
    }
}

// ── Closed forms against Monte Carlo ──────────────────────────────────────

#[test]
fn bernoulli_closed_form_matches_mc() {
    let (q, p) = (0.9f64, 0.2f64);
    let tape = Tape::no_grad();
    let closed = kl_bernoulli(tape.scalar(q), tape.scalar(p)).unwrap().item();
    let mut rng = RngState::seed(24);
    let mc = rng
        .uniforms(N)
        .into_iter()
        .map(|v| if v < q { (q / p).ln() } else { ((1.0 - q) / (1.0 - p)).ln() })
        .sum::<f64>()
        / N as f64;
    assert!(rel(closed, mc) <= REL_TOL, "closed {closed} vs mc {mc}");
}

#[test]
fn gaussian_closed_form_matches_mc() {
    let (mu, sigma) = (1.5f64, 0.5f64);
    let tape = Tape::no_grad();
    let closed = mi_min_bound(tape.constant(Tensor::full(&[1, 1], mu)), tape.constant(Tensor::full(&[1, 1], sigma)))
        .unwrap()
        .item();
    let mut rng = RngState::seed(25);
    let mc = rng
        .normals(N)
        .into_iter()
        .map(|e| {
            let z = mu + sigma * e;
            // log N(z; mu, sigma²) - log N(z; 0, 1)
            -sigma.ln() - 0.5 * e * e + 0.5 * z * z
        })
        .sum::<f64>()
        / N as f64;
    assert!(rel(closed, mc) <= REL_TOL, "closed {closed} vs mc {mc}");
}
