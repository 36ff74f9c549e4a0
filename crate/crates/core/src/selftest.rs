//! Built-in oracle and gradient suites run by `hire selftest`.
//!
//! Every suite uses fixed seeds, so repeated runs print identical reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Var};
use crate::error::Result;
use crate::jbu::{self, JBUConfig, JBULayerParams, JbuVars, Normalization};
use crate::ops;
use crate::reference;
use crate::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub const SUITES: [&str; 5] = ["conv", "resize", "jbu_oracle", "gradients", "kernel_normalization"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Kernel normalization used when building JBU kernels. Anything but
    /// softmax is a negative control and must make the run fail.
    pub normalization: Normalization,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            normalization: Normalization::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst error seen, or the failing check.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub suites: Vec<SuiteReport>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect()
    }

    /// One `PASS`/`FAIL` line per suite.
    pub fn lines(&self) -> Vec<String> {
        self.suites
            .iter()
            .map(|s| {
                format!(
                    "{} {:<22} {:>4} cases  {}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.cases,
                    s.detail
                )
            })
            .collect()
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let suites = SUITES
        .iter()
        .map(|&name| {
            let outcome = match name {
                "conv" => conv_suite(),
                "resize" => resize_suite(),
                "jbu_oracle" => jbu_oracle_suite(opts),
                "gradients" => gradient_suite(),
                _ => normalization_suite(opts),
            };
            match outcome {
                Ok((cases, worst, tol)) => SuiteReport {
                    name,
                    passed: worst <= tol,
                    cases,
                    detail: format!("max error {worst:.3e} (tol {tol:.0e})"),
                },
                Err(e) => SuiteReport {
                    name,
                    passed: false,
                    cases: 0,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect();
    SelftestReport { suites }
}

type Outcome = Result<(usize, f64, f64)>;

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5e1f_7e57 ^ salt)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_suite() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &(cin, cout, k, stride, pad, side) in &[
        (1, 1, 1, 1, 0, 5),
        (3, 4, 3, 1, 1, 9),
        (2, 3, 3, 2, 1, 8),
        (4, 2, 5, 1, 2, 7),
        (3, 5, 3, 2, 0, 11),
        (2, 2, 1, 2, 0, 6),
    ] {
        let x = random(&mut r, &[1, cin, side, side]);
        let w = random(&mut r, &[cout, cin, k, k]);
        let b = random(&mut r, &[cout]);
        let got = ops::conv2d(&x, &w, Some(&b), stride, pad)?;
        worst = worst.max(got.max_abs_diff(&reference::conv2d_naive(&x, &w, Some(&b), stride, pad))?);
        cases += 1;
    }
    Ok((cases, worst, ORACLE_TOL))
}

fn resize_suite() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &(c, h, w, oh, ow) in &[(1, 3, 3, 7, 7), (2, 4, 6, 8, 12), (3, 5, 5, 3, 3), (1, 2, 7, 9, 4), (2, 6, 6, 24, 24)] {
        let x = random(&mut r, &[1, c, h, w]);
        worst = worst.max(ops::bilinear_resize(&x, oh, ow)?.max_abs_diff(&reference::bilinear_resize_naive(&x, oh, ow))?);
        worst = worst.max(ops::bicubic_resize(&x, oh, ow)?.max_abs_diff(&reference::bicubic_resize_naive(&x, oh, ow))?);
        cases += 2;
    }
    for &(c, side, k) in &[(2, 8, 2), (3, 12, 4), (1, 9, 3)] {
        let x = random(&mut r, &[1, c, side, side]);
        worst = worst.max(ops::avg_pool2d(&x, k)?.max_abs_diff(&reference::avg_pool2d_naive(&x, k))?);
        cases += 1;
    }
    Ok((cases, worst, ORACLE_TOL))
}

struct JbuCase {
    features: Tensor,
    guidance: Tensor,
    params: JBULayerParams,
    cfg: JBUConfig,
}

fn jbu_case(r: &mut ChaCha8Rng) -> JbuCase {
    let window = [1, 3, 5, 7][r.gen_range(0..4)];
    let cfg = JBUConfig {
        window,
        proj_dim: r.gen_range(1..4),
        share_params: false,
    };
    let c = r.gen_range(1..4);
    let g = r.gen_range(1..4);
    let h = r.gen_range(1..6);
    let w = r.gen_range(1..6);
    let scale = r.gen_range(1..4);
    let mut params = JBULayerParams::init(&cfg, g, r);
    params.sigma_spatial = r.gen_range(0.3..2.5);
    params.range_temp = r.gen_range(0.1..20.0);
    let extra = r.gen_range(0..2);
    JbuCase {
        features: random(r, &[1, c, h, w]),
        guidance: random(r, &[1, g, h * scale, w * scale + extra]),
        params,
        cfg,
    }
}

fn jbu_oracle_suite(opts: &SelftestOptions) -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let n = 24;
    for _ in 0..n {
        let case = jbu_case(&mut r);
        let [_, _, h, w] = case.features.dims4()?;
        let kernel = jbu::jbu_kernel_with((h, w), &case.guidance, &case.params, &case.cfg, opts.normalization)?;
        let got = kernel.apply(&case.features)?;
        let want = jbu::jbu_naive_oracle(&case.features, &case.guidance, &case.params, &case.cfg)?;
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    Ok((n, worst, ORACLE_TOL))
}

fn normalization_suite(opts: &SelftestOptions) -> Outcome {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let n = 24;
    for _ in 0..n {
        let case = jbu_case(&mut r);
        let [_, _, h, w] = case.features.dims4()?;
        let kernel = jbu::jbu_kernel_with((h, w), &case.guidance, &case.params, &case.cfg, opts.normalization)?;
        let weights = kernel.weights();
        let per_pixel = case.cfg.window * case.cfg.window;
        for px in weights.data().chunks(per_pixel) {
            if px.iter().any(|&v| v < 0.0) {
                return Ok((n, f64::INFINITY, ORACLE_TOL));
            }
            worst = worst.max((px.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((n, worst, ORACLE_TOL))
}

fn check(report: GradCheckReport, worst: &mut f64, cases: &mut usize) {
    *worst = worst.max(report.max_rel_error);
    *cases += 1;
}

/// Mean of `out ⊙ p`; keeps the loss O(1) so roundoff stays below the
/// finite-difference resolution.
fn probed(out: Var, p: &Var) -> Result<Var> {
    Ok(out.mul(p)?.sum().scale(1.0 / p.value().numel() as f64))
}

fn gradient_suite() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let probe = |r: &mut ChaCha8Rng, shape: &[usize]| Var::constant(random(r, shape));

    let x = random(&mut r, &[1, 2, 5, 5]);
    let w = random(&mut r, &[3, 2, 3, 3]);
    let b = random(&mut r, &[3]);
    let p = probe(&mut r, &[1, 3, 3, 3]);
    check(
        grad_check(|v| probed(v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?, &p), &[x, w, b], EPS)?,
        &mut worst,
        &mut cases,
    );

    let x = random(&mut r, &[1, 2, 3, 4]);
    let p = probe(&mut r, &[1, 2, 7, 9]);
    check(grad_check(|v| probed(v[0].bilinear_resize(7, 9)?, &p), &[x.clone()], EPS)?, &mut worst, &mut cases);
    check(grad_check(|v| probed(v[0].bicubic_resize(7, 9)?, &p), &[x], EPS)?, &mut worst, &mut cases);

    let x = random(&mut r, &[1, 2, 6, 6]);
    let p = probe(&mut r, &[1, 2, 3, 3]);
    check(grad_check(|v| probed(v[0].avg_pool2d(2)?, &p), &[x], EPS)?, &mut worst, &mut cases);

    let x = random(&mut r, &[2, 5]);
    let p = probe(&mut r, &[2, 5]);
    check(grad_check(|v| probed(v[0].softmax(1)?, &p), &[x], EPS)?, &mut worst, &mut cases);

    let a = random(&mut r, &[1, 2, 3, 3]);
    let b = random(&mut r, &[1, 1, 3, 3]);
    let p = probe(&mut r, &[1, 3, 3, 3]);
    check(
        grad_check(|v| Ok(v[0].concat_channels(&v[1])?.tanh().mul(&p)?.sum()), &[a, b], EPS)?,
        &mut worst,
        &mut cases,
    );

    let a = random(&mut r, &[2, 3]);
    let b = random(&mut r, &[2, 3]);
    check(grad_check(|v| v[0].sub(&v[1])?.mse_loss(&v[0].scale(0.5)), &[a, b], EPS)?, &mut worst, &mut cases);

    for _ in 0..3 {
        let case = jbu_case(&mut r);
        let [_, c, _, _] = case.features.dims4()?;
        let [_, _, s_h, s_w] = case.guidance.dims4()?;
        let p = probe(&mut r, &[1, c, s_h, s_w]);
        let cfg = case.cfg.clone();
        let report = grad_check(
            |v| {
                let layer = JbuVars {
                    sigma_spatial: v[2].clone(),
                    range_temp: v[3].clone(),
                    guidance_proj: v[4].clone(),
                };
                probed(jbu::jbu_upsample_var(&v[0], &v[1], &layer, &cfg)?, &p)
            },
            &[
                case.features,
                case.guidance,
                Tensor::scalar(case.params.sigma_spatial),
                Tensor::scalar(case.params.range_temp),
                case.params.guidance_proj,
            ],
            EPS,
        )?;
        check(report, &mut worst, &mut cases);
    }
    Ok((cases, worst, GRAD_TOL))
}
