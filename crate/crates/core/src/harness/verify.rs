//! Randomized property checks over the numerical core, run by the `verify`
//! command.

use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{shadow_subsample, DatasetName, DatasetSplit, Examples, Preprocessing};
use crate::error::Result;
use crate::mia::{attack_records, roc_auc, run_attack, train_rbf_svm, AttackRecord, Membership, Origin, SvmParams};
use crate::nets::{build_model, evaluate, train_model, Architecture, ModelSpec, Paradigm, QuantSet, TrainConfig};
use crate::quant::{quantize_activation, quantize_membrane, quantize_weight, weight_lattice, Lattice, SUPPORTED_BITS};
use crate::rng::{stream, Rng};
use crate::spiking::{lif_step, unroll, Drive, LifConfig, SurrogateKind, SurrogateSpec};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {}/{}: {}", self.suite, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Runs `f` on a trainable leaf holding `x`, backpropagates `Σ up·f(x)` and
/// returns the outputs and input gradient.
fn forward_backward(
    x: &[f64],
    up: &[f64],
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::from_f64([x.len()], x)?);
    let q = f(&mut g, v)?;
    let out = g.value(q).data().to_vec();
    let w = g.constant(Tensor::from_f64([up.len()], up)?);
    let p = g.mul(q, w)?;
    let s = g.sum(p)?;
    g.backward(s)?;
    Ok((out, g.grad(v).unwrap_or(&[]).to_vec()))
}

/// Quantizer properties for every supported bit width and placement.
pub fn quantization_suite(samples: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("quantization");
    let mut rng = stream(seed, "verify/quant");
    for bits in SUPPORTED_BITS {
        let clip = 1.0 + 0.25 * rng.random_range(-2i32..=2) as f64;
        let x = uniform(&mut rng, -2.0, 2.0, samples);
        let up = uniform(&mut rng, -1.0, 1.0, samples);
        let w: Vec<f64> = (0..samples).map(|_| 0.3 * normal(&mut rng)).collect();
        let cases: [(&str, Lattice, Vec<f64>); 3] = [
            ("activation", Lattice::new(0.0, clip, bits)?, x.clone()),
            ("membrane", Lattice::new(-clip, clip, bits)?, x.clone()),
            (
                "weight",
                weight_lattice(&Tensor::<f64>::from_f64([samples], &w)?, bits)?.expect("spread weights"),
                w,
            ),
        ];
        for (placement, lattice, input) in cases {
            let apply = |g: &mut Graph<f64>, v: Var| match placement {
                "activation" => quantize_activation(g, v, 0.0, clip, bits),
                "membrane" => quantize_membrane(g, v, clip, bits),
                _ => quantize_weight(g, v, bits),
            };
            let (out, grad) = forward_backward(&input, &up, apply)?;
            let tag = format!("k={bits} {placement}");

            let mut levels: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
            levels.sort_unstable();
            levels.dedup();
            rep.check(
                format!("{tag} levels"),
                levels.len() as u64 <= 1 << bits,
                format!("{} distinct of at most {}", levels.len(), 1u64 << bits),
            );

            let (again, _) = forward_backward(&out, &up, apply)?;
            let same = again.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits());
            rep.check(format!("{tag} idempotent"), same, "q(q(x)) == q(x) bitwise");

            let half = lattice.step() / 2.0;
            let worst = input
                .iter()
                .zip(&out)
                .filter(|(x, _)| lattice.contains(**x))
                .map(|(x, q)| (x - q).abs())
                .fold(0.0, f64::max);
            rep.check(
                format!("{tag} error bound"),
                worst <= half * (1.0 + 1e-12),
                format!("max in-range error {worst:.3e}, half step {half:.3e}"),
            );

            let mut order: Vec<usize> = (0..input.len()).collect();
            order.sort_by(|&a, &b| input[a].total_cmp(&input[b]));
            let monotone = order.windows(2).all(|p| out[p[0]] <= out[p[1]]);
            rep.check(format!("{tag} monotone"), monotone, "sorted inputs give sorted outputs");

            let ste = input.iter().zip(&grad).zip(&up).all(
                |((x, g), u)| {
                    if lattice.contains(*x) {
                        g == u
                    } else {
                        *g == 0.0
                    }
                },
            );
            rep.check(
                format!("{tag} straight-through"),
                ste,
                "gradient equals upstream in range and zero outside",
            );
        }
    }
    let (out, _) = forward_backward(&[0.7], &[1.0], |g, v| quantize_activation(g, v, 0.0, 1.5, 2))?;
    rep.check(
        "worked example",
        out[0] == 0.5,
        format!("0.7 on [0, 1.5] at k=2 -> {}", out[0]),
    );
    Ok(rep)
}

/// Surrogate shape checks and LIF forward invariants.
pub fn spiking_suite(samples: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("spiking");
    let mut rng = stream(seed, "verify/spiking");
    let mut us = uniform(&mut rng, -4.0, 4.0, samples);
    us.push(0.0);
    us.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    for kind in SurrogateKind::ALL {
        let spec = SurrogateSpec::of(kind);
        let d: Vec<f64> = us.iter().map(|&u| spec.derivative(u)).collect();
        let even = us.iter().all(|&u| spec.derivative(u) == spec.derivative(-u));
        rep.check(format!("{kind} even"), even, "g(u) == g(-u)");
        let peak = spec.derivative(0.0);
        rep.check(
            format!("{kind} peak"),
            d.iter().all(|&v| v <= peak),
            format!("g(0) = {peak}"),
        );
        rep.check(
            format!("{kind} non-increasing"),
            d.windows(2).all(|w| w[1] <= w[0]),
            format!("over {} points ordered by |u|", us.len()),
        );
    }
    let ste = SurrogateSpec::of(SurrogateKind::Ste);
    rep.check(
        "ste unit",
        us.iter().all(|&u| ste.derivative(u) == 1.0),
        "straight-through derivative is 1 everywhere",
    );

    let (batch, width) = (4, 16);
    let drive: Vec<Vec<f64>> = (0..25).map(|_| uniform(&mut rng, -0.5, 1.5, batch * width)).collect();
    let mut records: Vec<(Vec<u64>, Vec<u64>)> = Vec::new();
    for kind in SurrogateKind::ALL {
        let cfg = LifConfig {
            surrogate: SurrogateSpec::of(kind),
            ..LifConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let currents = drive
            .iter()
            .map(|c| Ok(g.param(Tensor::from_f64([batch, width], c)?)))
            .collect::<Result<Vec<_>>>()?;
        let rec = unroll(&mut g, Drive::PerStep(&currents), &cfg, None)?;
        let bits = |vars: &[Var]| -> Vec<u64> {
            vars.iter()
                .flat_map(|&v| g.value(v).data().iter().map(|x| x.to_bits()))
                .collect()
        };
        records.push((bits(&rec.spikes), bits(&rec.membranes)));
    }
    rep.check(
        "forward independent of surrogate",
        records.windows(2).all(|w| w[0] == w[1]),
        "spike and membrane records bit-identical across kinds",
    );

    let cfg = LifConfig::default();
    let u0 = uniform(&mut rng, -1.0, 0.99, 32);
    let mut g = Graph::<f64>::new();
    let zero = g.constant(Tensor::zeros([u0.len()]));
    let mut state = g.constant(Tensor::from_f64([u0.len()], &u0)?);
    let mut worst = 0.0f64;
    for t in 1..=cfg.num_steps {
        let step = lif_step(&mut g, zero, state, &cfg, None)?;
        for (u, &start) in g.value(step.membrane).data().iter().zip(&u0) {
            worst = worst.max((u - cfg.beta.powi(t as i32) * start).abs());
        }
        state = step.next;
    }
    rep.check(
        "zero-input decay",
        worst <= 1e-9,
        format!("max |U_t - beta^t U_0| = {worst:.2e} over {} steps", cfg.num_steps),
    );
    Ok(rep)
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct GradCase {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Inputs whose gradient is checked; others are treated as constants.
    checked: Vec<bool>,
    build: Build,
    /// Rejects samples close to a non-differentiable point.
    smooth: fn(&[Vec<f64>]) -> bool,
}

fn always(_: &[Vec<f64>]) -> bool {
    true
}

fn away_from_zero(x: &[Vec<f64>]) -> bool {
    x[0].iter().all(|v| v.abs() > 1e-3)
}

fn distinct_windows(x: &[Vec<f64>]) -> bool {
    // 2×2 windows over a [1, 1, 4, 4] input
    (0..2).all(|oy| {
        (0..2).all(|ox| {
            let mut w: Vec<f64> = (0..4).map(|k| x[0][(2 * oy + k / 2) * 4 + 2 * ox + k % 2]).collect();
            w.sort_by(f64::total_cmp);
            w[3] - w[2] > 1e-3
        })
    })
}

fn grad_cases() -> Vec<GradCase> {
    let case = |op, shapes: Vec<Vec<usize>>, checked: Vec<bool>, build: Build, smooth| GradCase {
        op,
        shapes,
        checked,
        build,
        smooth,
    };
    vec![
        case(
            "affine",
            vec![vec![3, 4], vec![4, 2], vec![2]],
            vec![true; 3],
            |g, v| g.affine(v[0], v[1], v[2]),
            always,
        ),
        case(
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            vec![true; 3],
            |g, v| g.conv2d(v[0], v[1], v[2], 1, 0),
            always,
        ),
        case(
            "conv2d padded strided",
            vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3], vec![2]],
            vec![true; 3],
            |g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
            always,
        ),
        case(
            "maxpool2d",
            vec![vec![1, 1, 4, 4]],
            vec![true],
            |g, v| g.maxpool2d(v[0], 2, 2),
            distinct_windows,
        ),
        case("relu", vec![vec![12]], vec![true], |g, v| g.relu(v[0]), away_from_zero),
        case(
            "softmax_cross_entropy",
            vec![vec![3, 4]],
            vec![true],
            |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]),
            always,
        ),
        case("sum", vec![vec![7]], vec![true], |g, v| g.sum(v[0]), always),
        case(
            "add",
            vec![vec![6], vec![6]],
            vec![true; 2],
            |g, v| g.add(v[0], v[1]),
            always,
        ),
        case(
            "sub",
            vec![vec![6], vec![6]],
            vec![true; 2],
            |g, v| g.sub(v[0], v[1]),
            always,
        ),
        case(
            "mul",
            vec![vec![6], vec![6]],
            vec![true; 2],
            |g, v| g.mul(v[0], v[1]),
            always,
        ),
        case("scale", vec![vec![6]], vec![true], |g, v| g.scale(v[0], -1.7), always),
        case(
            "leaky_integrate",
            vec![vec![6], vec![6]],
            vec![true; 2],
            |g, v| g.leaky_integrate(v[0], v[1], 0.95),
            always,
        ),
        case(
            "reset_subtract",
            vec![vec![6], vec![6]],
            vec![true; 2],
            |g, v| g.reset_subtract(v[0], v[1], 1.0, false),
            always,
        ),
        case(
            "reset_subtract detached",
            vec![vec![6], vec![6]],
            vec![true, false],
            |g, v| g.reset_subtract(v[0], v[1], 1.0, true),
            always,
        ),
        case(
            "stack",
            vec![vec![2, 3], vec![2, 3]],
            vec![true; 2],
            |g, v| g.stack(&v[..2]),
            always,
        ),
        case("rows", vec![vec![4, 3]], vec![true], |g, v| g.rows(v[0], 1, 2), always),
        case(
            "reshape",
            vec![vec![2, 6]],
            vec![true],
            |g, v| g.reshape(v[0], [3, 4]),
            always,
        ),
    ]
}

/// `Σ up·f(inputs)` with `up` fixed.
fn weighted_output(case: &GradCase, inputs: &[Vec<f64>], up: &[f64]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .zip(&case.shapes)
        .zip(&case.checked)
        .map(|((x, s), &c)| {
            let t = Tensor::from_f64(s.clone(), x)?;
            Ok(if c { g.param(t) } else { g.constant(t) })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::from_f64(shape, &up[..g.value(out).numel()])?);
    let p = g.mul(out, w)?;
    let s = g.sum(p)?;
    let value = g.value(s).item();
    g.backward(s)?;
    let grads = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
    Ok((value, grads))
}

/// Worst norm-wise relative error between analytic and central-difference
/// gradients over `instances` random draws of one op.
fn gradient_error(case: &GradCase, instances: usize, rng: &mut Rng) -> Result<f64> {
    const H: f64 = 1e-6;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let inputs: Vec<Vec<f64>> = case
            .shapes
            .iter()
            .map(|s| uniform(rng, -1.5, 1.5, s.iter().product()))
            .collect();
        if !(case.smooth)(&inputs) {
            continue;
        }
        let up = uniform(rng, -1.0, 1.0, 256);
        let (_, grads) = weighted_output(case, &inputs, &up)?;
        for (k, checked) in case.checked.iter().enumerate() {
            if !checked {
                continue;
            }
            let analytic = grads[k].clone().unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            let mut numeric = Vec::with_capacity(inputs[k].len());
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k][i] += H;
                let mut minus = inputs.clone();
                minus[k][i] -= H;
                let fp = weighted_output(case, &plus, &up)?.0;
                let fm = weighted_output(case, &minus, &up)?.0;
                numeric.push((fp - fm) / (2.0 * H));
            }
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = norm(&analytic).max(norm(&numeric));
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
        done += 1;
    }
    Ok(worst)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite differences against every builtin op's backward rule.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("gradients");
    let mut rng = stream(seed, "verify/gradients");
    for case in grad_cases() {
        let err = gradient_error(&case, instances, &mut rng)?;
        rep.check(
            case.op,
            err < 1e-4,
            format!("max relative error {err:.2e} over {instances} instances"),
        );
    }
    Ok(rep)
}

/// `(wins + ties/2) / (n_in·n_out)` over all member/non-member pairs.
pub fn brute_force_auc(scores: &[f64], members: &[bool]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &a) in scores.iter().enumerate() {
        if !members[i] {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if members[j] {
                continue;
            }
            pairs += 1;
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn noise_records(rng: &mut Rng, n: usize, dim: usize, origin: Origin, first_id: u64) -> Vec<AttackRecord> {
    (0..n)
        .map(|i| AttackRecord {
            features: (0..dim).map(|_| normal(rng)).collect(),
            label: if i % 2 == 0 { Membership::In } else { Membership::Out },
            origin,
            id: first_id + i as u64,
        })
        .collect()
}

/// AUC exactness, the no-signal baseline and dual feasibility of the attacker.
pub fn attack_suite(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("attack");
    let mut rng = stream(seed, "verify/attack");
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(2..=50);
        let mut members: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        members[0] = true;
        members[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
        if roc_auc(&scores, &members)? != brute_force_auc(&scores, &members) {
            mismatches += 1;
        }
    }
    rep.check(
        "auc matches all-pairs count",
        mismatches == 0,
        format!("{mismatches} of 100 instances differ"),
    );

    let params = SvmParams::default();
    let mut worst = 0.0f64;
    let mut residual = 0.0f64;
    let mut boxed = true;
    for s in 0..5u64 {
        let mut r = stream(seed.wrapping_add(s), "verify/no-signal");
        let train = noise_records(&mut r, 400, 3, Origin::Shadow, 0);
        let test = noise_records(&mut r, 2000, 3, Origin::Target, 1 << 20);
        let report = run_attack(&train, &test, &params, s)?;
        worst = worst.max((report.auc - 0.5).abs());
        residual = residual.max(report.equality_residual);
        boxed &= report.box_feasible;
        let model = train_rbf_svm(&train, &params, s)?;
        residual = residual.max(model.equality_residual());
        boxed &= model.box_feasible();
    }
    rep.check(
        "no-signal baseline",
        worst <= 0.05,
        format!("max |AUC - 0.5| = {worst:.4} over 5 seeds"),
    );
    rep.check(
        "dual feasibility",
        boxed && residual <= 1e-6,
        format!("alpha in [0, C]: {boxed}, max |sum alpha_i y_i| = {residual:.2e}"),
    );

    let (train_acc, auc) = overfit_sanity(seed)?;
    rep.check(
        "overfit target",
        auc > 0.8,
        format!("memorizing target (train accuracy {train_acc:.3}) attacked with AUC {auc:.4}"),
    );
    Ok(rep)
}

fn noise_examples(rng: &mut Rng, n: usize, dim: usize, classes: usize, first_id: u64) -> Result<Examples> {
    let x: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Examples::new(
        Tensor::new([n, dim], x)?,
        labels,
        (first_id..first_id + n as u64).collect(),
    )
}

/// Shadow-model attack on an FCNet that memorizes random labels. Returns the
/// target's train accuracy and the attack AUC.
pub fn overfit_sanity(seed: u64) -> Result<(f64, f64)> {
    let (n, dim, classes) = (200, 100, 10);
    let mut rng = stream(seed, "verify/overfit");
    let split = DatasetSplit {
        // the name only matters to loading and preprocessing, neither of which runs here
        name: DatasetName::Iris,
        train: noise_examples(&mut rng, n, dim, classes, 0)?,
        test: noise_examples(&mut rng, n, dim, classes, 1 << 32)?,
        num_classes: classes,
        input_shape: vec![dim],
        preprocessing: Preprocessing::Raw,
    };
    let spec = ModelSpec {
        architecture: Architecture::FcNet,
        paradigm: Paradigm::Ann,
        num_classes: classes,
        input_shape: vec![dim],
        lif: None,
        quant: QuantSet::default(),
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let target = train_model(build_model(spec.clone(), seed)?, &split, &cfg, seed)?;
    let (shadow_in, shadow_out) = shadow_subsample(&split.train, 0.8, seed)?;
    let shadow_split = split.with_train_test(shadow_in, shadow_out);
    let shadow_seed = seed ^ 0x5EED;
    let shadow = train_model(build_model(spec, shadow_seed)?, &shadow_split, &cfg, shadow_seed)?;
    let (train_acc, t_in) = evaluate(&target.model, &split.train)?;
    let (_, t_out) = evaluate(&target.model, &split.test)?;
    let (_, s_in) = evaluate(&shadow.model, &shadow_split.train)?;
    let (_, s_out) = evaluate(&shadow.model, &shadow_split.test)?;
    let report = run_attack(
        &attack_records(&s_in, &s_out, Origin::Shadow)?,
        &attack_records(&t_in, &t_out, Origin::Target)?,
        &SvmParams::default(),
        seed,
    )?;
    Ok((train_acc, report.auc))
}

/// Every suite with its default sample sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        quantization_suite(10_000, seed)?,
        spiking_suite(10_000, seed)?,
        gradient_suite(50, seed)?,
        attack_suite(seed)?,
    ])
}
