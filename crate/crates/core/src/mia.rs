//! Shadow-model membership inference.
//!
//! The shadow model's outputs on its own training data (`IN`) and on data it
//! never saw (`OUT`) train an RBF-kernel SVM; the SVM then scores the target
//! model's outputs and leakage is summarized by ROC-AUC.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::Examples;
use crate::error::{Error, Result, StageExt};
use crate::nets::{extract_attack_features, AttackFeatures, Model};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    In,
    Out,
}

impl Membership {
    fn sign(self) -> f64 {
        match self {
            Membership::In => 1.0,
            Membership::Out => -1.0,
        }
    }
}

/// Which model produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Shadow,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub features: Vec<f64>,
    pub label: Membership,
    pub origin: Origin,
    /// Identity of the underlying example.
    pub id: u64,
}

fn to_records(feats: &AttackFeatures, label: Membership, origin: Origin) -> Vec<AttackRecord> {
    (0..feats.len())
        .map(|i| AttackRecord {
            features: feats.row(i).iter().map(|&v| v as f64).collect(),
            label,
            origin,
            id: feats.ids[i],
        })
        .collect()
}

/// Builds one labelled attack set from member and non-member features of the same model.
pub fn attack_records(
    members: &AttackFeatures,
    non_members: &AttackFeatures,
    origin: Origin,
) -> Result<Vec<AttackRecord>> {
    if members.source != non_members.source {
        return Err(Error::Config(
            "member and non-member features come from different sources".into(),
        ));
    }
    let seen: HashSet<u64> = members.ids.iter().copied().collect();
    if let Some(id) = non_members.ids.iter().find(|id| seen.contains(id)) {
        return Err(Error::Contract(format!("example {id} is labelled both IN and OUT")));
    }
    let mut out = to_records(members, Membership::In, origin);
    out.extend(to_records(non_members, Membership::Out, origin));
    Ok(out)
}

/// Member/non-member splits of the shadow and target models.
#[derive(Clone, Copy, Debug)]
pub struct AttackSplits<'a> {
    pub shadow_train: &'a Examples,
    pub shadow_held_out: &'a Examples,
    pub target_train: &'a Examples,
    pub target_test: &'a Examples,
}

/// `(attack_train, attack_test)`: shadow outputs labelled by shadow
/// membership, target outputs labelled by target membership.
pub fn assemble_attack_data(
    shadow: &Model,
    target: &Model,
    splits: AttackSplits<'_>,
) -> Result<(Vec<AttackRecord>, Vec<AttackRecord>)> {
    if shadow.spec.paradigm != target.spec.paradigm {
        return Err(Error::Config(format!(
            "shadow is {} but target is {}",
            shadow.spec.paradigm, target.spec.paradigm
        )));
    }
    let train = attack_records(
        &extract_attack_features(shadow, splits.shadow_train)?,
        &extract_attack_features(shadow, splits.shadow_held_out)?,
        Origin::Shadow,
    )?;
    let test = attack_records(
        &extract_attack_features(target, splits.target_train)?,
        &extract_attack_features(target, splits.target_test)?,
        Origin::Target,
    )?;
    Ok((train, test))
}

pub fn count_labels(records: &[AttackRecord]) -> (usize, usize) {
    let n_in = records.iter().filter(|r| r.label == Membership::In).count();
    (n_in, records.len() - n_in)
}

/// Subsamples the majority label down to the minority count, then shuffles.
pub fn undersample_balance(records: &[AttackRecord], seed: u64) -> Result<Vec<AttackRecord>> {
    let (n_in, n_out) = count_labels(records);
    if n_in == 0 || n_out == 0 {
        return Err(Error::Contract(format!(
            "undersampling needs both labels, got {n_in} IN / {n_out} OUT"
        )));
    }
    let keep = n_in.min(n_out);
    let mut rng = stream(seed, "undersample");
    let mut out = Vec::with_capacity(2 * keep);
    for label in [Membership::In, Membership::Out] {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        out.extend(idx.choose_multiple(&mut rng, keep).map(|&i| records[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Per-feature affine map fitted on one set and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(records: &[AttackRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Contract("cannot standardize an empty set".into()));
        };
        let d = first.features.len();
        let n = records.len() as f64;
        let mut mean = vec![0.0; d];
        for r in records {
            if r.features.len() != d {
                return Err(Error::Dimension("attack records differ in length".into()));
            }
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in records {
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(&r.features) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, records: &[AttackRecord]) -> Vec<AttackRecord> {
        records
            .iter()
            .map(|r| AttackRecord {
                features: r
                    .features
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect(),
                ..r.clone()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmParams {
    pub c: f64,
    /// Kernel width; `None` selects `1/(d·variance)` of the training features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub tol: f64,
    /// Update budget, in multiples of the training-set size.
    pub max_passes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_passes: 200,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("SVM C must be positive, got {}", self.c)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("SVM gamma must be positive, got {g}")));
            }
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_passes == 0 {
            return Err(Error::Config("SVM tolerance and pass budget must be positive".into()));
        }
        Ok(())
    }
}

/// `1/(d·var)` with the variance taken over every feature value.
pub fn scale_gamma(records: &[AttackRecord]) -> f64 {
    let d = records.first().map_or(1, |r| r.features.len()).max(1);
    let vals = records.iter().flat_map(|r| r.features.iter().copied());
    let n = (records.len() * d) as f64;
    let mean = vals.clone().sum::<f64>() / n;
    let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

/// Trained kernel classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `α_i·y_i` of each support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl AttackModel {
    /// `|Σ α_i y_i|`.
    pub fn equality_residual(&self) -> f64 {
        self.dual_coef.iter().sum::<f64>().abs()
    }

    /// Every `α_i` lies in `[0, C]`.
    pub fn box_feasible(&self) -> bool {
        self.dual_coef.iter().all(|a| a.abs() <= self.c)
    }
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Lazily computed kernel rows with a bounded cache.
struct KernelRows<'a> {
    x: &'a [Vec<f64>],
    gamma: f64,
    cache: HashMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelRows<'a> {
    const BUDGET: usize = 1 << 25;

    fn new(x: &'a [Vec<f64>], gamma: f64) -> Self {
        Self {
            x,
            gamma,
            cache: HashMap::new(),
            order: VecDeque::new(),
            capacity: (Self::BUDGET / x.len().max(1)).max(2),
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.cache.contains_key(&i) {
            if self.cache.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.cache.remove(&old);
                }
            }
            let xi = &self.x[i];
            let row = self.x.iter().map(|xj| rbf(self.gamma, xi, xj)).collect();
            self.cache.insert(i, row);
            self.order.push_back(i);
        }
        &self.cache[&i]
    }

    fn pair(&mut self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let ri = self.row(i).to_vec();
        let rj = self.row(j).to_vec();
        (ri, rj)
    }
}

const TAU: f64 = 1e-12;

/// Soft-margin C-SVC by sequential minimal optimization with second-order
/// working-pair selection. Records are visited in a seeded order. Stops when
/// the maximal KKT violation drops below `tol`, or after
/// `max_passes · n` pair updates with `converged = false`.
pub fn train_rbf_svm(records: &[AttackRecord], params: &SvmParams, seed: u64) -> Result<AttackModel> {
    params.validate()?;
    if records.iter().any(|r| r.origin != Origin::Shadow) {
        return Err(Error::Contract(
            "attack classifier may only be trained on shadow-model records".into(),
        ));
    }
    let (n_in, n_out) = count_labels(records);
    if n_in < 2 || n_out < 2 {
        return Err(Error::Contract(format!(
            "SVM needs ≥ 2 records per label, got {n_in} IN / {n_out} OUT"
        )));
    }
    if records.iter().any(|r| r.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { op: "train_rbf_svm" });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream(seed, "svm_order"));
    let x: Vec<Vec<f64>> = order.iter().map(|&i| records[i].features.clone()).collect();
    let y: Vec<f64> = order.iter().map(|&i| records[i].label.sign()).collect();
    let n = x.len();
    let c = params.c;
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(records));
    let mut kernel = KernelRows::new(&x, gamma);
    let mut alpha = vec![0.0f64; n];
    // Gradient of ½αᵀQα − eᵀα with Q_ij = y_i y_j K_ij.
    let mut grad = vec![-1.0f64; n];
    let max_iter = params.max_passes.saturating_mul(n);
    let mut iterations = 0;
    let mut converged = false;
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
    while iterations < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            converged = true;
            break;
        }
        let ki = kernel.row(i).to_vec();
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            gmax2 = gmax2.max(y[t] * grad[t]);
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = (ki[i] + 1.0 - 2.0 * ki[t]).max(TAU);
                let obj = -(b * b) / a;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < params.tol || j == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;
        let (ri, rj) = kernel.pair(i, j);
        let qij = y[i] * y[j] * ri[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (ri[i] + rj[j] + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (ri[i] + rj[j] - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ri[t] * di + y[j] * rj[t] * dj);
        }
    }
    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    let (mut support_vectors, mut dual_coef) = (Vec::new(), Vec::new());
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(x[t].clone());
            dual_coef.push(alpha[t] * y[t]);
        }
    }
    if !converged {
        log::warn!(
            "SMO stopped after {iterations} updates without meeting tolerance {}",
            params.tol
        );
    }
    Ok(AttackModel {
        support_vectors,
        dual_coef,
        bias: -rho,
        gamma,
        c,
        converged,
        iterations,
    })
}

/// Decision values `Σ α_i y_i K(x_i, x) + b`; higher means more likely `IN`.
pub fn svm_score(model: &AttackModel, records: &[AttackRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            model
                .support_vectors
                .iter()
                .zip(&model.dual_coef)
                .map(|(sv, &a)| a * rbf(model.gamma, sv, &r.features))
                .sum::<f64>()
                + model.bias
        })
        .collect()
}

fn check_labels(scores: &[f64], members: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != members.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            members.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "roc_auc" });
    }
    let pos = members.iter().filter(|&&m| m).count() as u64;
    let neg = members.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("ROC needs both IN and OUT labels".into()));
    }
    Ok((pos, neg))
}

/// Twice the Mann–Whitney statistic: `Σ_{IN, OUT} 2·[s_in > s_out] + [s_in = s_out]`.
fn twice_u(scores: &[f64], members: &[bool]) -> u128 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut below_out: u128 = 0;
    let mut total: u128 = 0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            end += 1;
        }
        let (mut a, mut b) = (0u128, 0u128);
        for &t in &idx[k..end] {
            if members[t] {
                a += 1;
            } else {
                b += 1;
            }
        }
        total += 2 * a * below_out + a * b;
        below_out += b;
        k = end;
    }
    total
}

/// ROC-AUC with members (`true`) as the positive class; ties count one half.
pub fn roc_auc(scores: &[f64], members: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, members)?;
    Ok(twice_u(scores, members) as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score threshold.
pub fn roc_curve(scores: &[f64], members: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_labels(scores, members)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if members[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub train_in: usize,
    pub train_out: usize,
    pub train_balanced: usize,
    pub test_in: usize,
    pub test_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIAReport {
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub attack_accuracy: f64,
    pub counts: LabelCounts,
    pub gamma: f64,
    pub support_vectors: usize,
    pub converged: bool,
    /// `|Σ α_i y_i|` and box feasibility of the fitted dual.
    pub equality_residual: f64,
    pub box_feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Balance → standardize → fit → score → AUC on already assembled attack sets.
pub fn run_attack(
    attack_train: &[AttackRecord],
    attack_test: &[AttackRecord],
    params: &SvmParams,
    seed: u64,
) -> Result<MIAReport> {
    if attack_test.iter().any(|r| r.origin != Origin::Target) {
        return Err(Error::Contract("attack test set must hold target-model records only".into()).in_stage("assemble"));
    }
    let (train_in, train_out) = count_labels(attack_train);
    let (test_in, test_out) = count_labels(attack_test);
    let balanced = undersample_balance(attack_train, seed).stage("undersample")?;
    let scaler = Standardizer::fit(&balanced).stage("standardize")?;
    let train = scaler.apply(&balanced);
    let test = scaler.apply(attack_test);
    let model = train_rbf_svm(&train, params, seed).stage("svm_train")?;
    let scores = svm_score(&model, &test);
    let members: Vec<bool> = test.iter().map(|r| r.label == Membership::In).collect();
    let auc = roc_auc(&scores, &members).stage("auc")?;
    let roc = roc_curve(&scores, &members).stage("auc")?;
    let hits = scores.iter().zip(&members).filter(|(s, m)| (**s > 0.0) == **m).count();
    Ok(MIAReport {
        auc,
        roc,
        attack_accuracy: hits as f64 / test.len() as f64,
        counts: LabelCounts {
            train_in,
            train_out,
            train_balanced: balanced.len(),
            test_in,
            test_out,
        },
        gamma: model.gamma,
        support_vectors: model.support_vectors.len(),
        converged: model.converged,
        equality_residual: model.equality_residual(),
        box_feasible: model.box_feasible(),
        config_digest: None,
    })
}

/// The full attack against `target`, using `shadow` to build the training set.
pub fn run_membership_inference(
    target: &Model,
    shadow: &Model,
    splits: AttackSplits<'_>,
    params: &SvmParams,
    seed: u64,
) -> Result<MIAReport> {
    let (train, test) = assemble_attack_data(shadow, target, splits).stage("assemble")?;
    run_attack(&train, &test, params, seed)
}
