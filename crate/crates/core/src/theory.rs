//! Numerical checks of the EWA weight recursion.
//!
//! A probe MoE layer is driven through `m` iterations of
//! `W^{k+1} = W̄^k + η·∇^k` followed by an EWA step, where `∇^k` is the
//! recorded update direction (the negative gradient for descent). With
//! constant β and η, the post-EWA weights obey
//!
//! ```text
//! W̄_i^{t+m} = (1-β)^{m+1} W_i^t
//!           + η Σ_{k=1..m} (1-β)^k ∇_i^{t+m-k}
//!           + β/(N-1) Σ_{j≠i} Σ_{k=0..m} (1-β)^{m-k} W_j^{t+k}
//! ```
//!
//! which shows a decay of each expert's own starting weights and an
//! exponentially weighted history of the other experts. The checks here
//! evaluate both sides from the recorded quantities.

use std::fmt::Write as _;

use rand::SeedableRng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::ewa::ewa_step;
use crate::moe::{MoELayer, MoeMode, Routing};
use crate::tensor::Tensor;
use crate::vit::{Binder, FFNParams};
use crate::Rng;

/// Gradient of a probe loss with respect to each expert.
pub trait ProbeLoss {
    /// Returns the loss and one gradient per expert (same shapes).
    fn loss_and_grad(&mut self, experts: &[FFNParams]) -> Result<(f64, Vec<FFNParams>)>;
}

/// `½ Σ_i Σ_p c_{ip} (w_{ip} - target_{ip})²` with random positive
/// curvatures and random targets.
pub struct QuadraticProbe {
    curvature: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

impl QuadraticProbe {
    pub fn random(template: &FFNParams, n_experts: usize, rng: &mut Rng) -> Self {
        let p = template.param_count();
        let mut curvature = Vec::with_capacity(n_experts);
        let mut target = Vec::with_capacity(n_experts);
        for _ in 0..n_experts {
            curvature.push(Tensor::uniform(vec![p], 0.5, 2.0, rng).into_data());
            target.push(Tensor::uniform(vec![p], -1.0, 1.0, rng).into_data());
        }
        Self { curvature, target }
    }
}

impl ProbeLoss for QuadraticProbe {
    fn loss_and_grad(&mut self, experts: &[FFNParams]) -> Result<(f64, Vec<FFNParams>)> {
        if experts.len() != self.curvature.len() {
            return Err(Error::InvalidArgument("probe built for a different expert count".into()));
        }
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(experts.len());
        for ((e, c), t) in experts.iter().zip(&self.curvature).zip(&self.target) {
            let w = e.flatten();
            let mut g = Vec::with_capacity(w.len());
            for ((wv, cv), tv) in w.iter().zip(c).zip(t) {
                let diff = wv - tv;
                loss += 0.5 * cv * diff * diff;
                g.push(cv * diff);
            }
            grads.push(e.with_flat(&g)?);
        }
        Ok((loss, grads))
    }
}

/// Squared error of a RUP MoE layer on fixed random regression data; the
/// gradient comes from the autograd engine and a fresh partition is drawn
/// on every call.
pub struct RegressionProbe {
    tokens: Tensor,
    targets: Tensor,
    rng: Rng,
}

impl RegressionProbe {
    pub fn random(d_model: usize, n_tokens: usize, rng: &mut Rng) -> Self {
        Self {
            tokens: Tensor::randn(vec![n_tokens, d_model], 1.0, rng),
            targets: Tensor::randn(vec![n_tokens, d_model], 1.0, rng),
            rng: Rng::seed_from_u64(rand::Rng::random(rng)),
        }
    }
}

impl ProbeLoss for RegressionProbe {
    fn loss_and_grad(&mut self, experts: &[FFNParams]) -> Result<(f64, Vec<FFNParams>)> {
        let layer = MoELayer {
            experts: experts.to_vec(),
            routing: Routing::Rup,
        };
        let mut g = Graph::new();
        let mut binder = Binder::trainable();
        let x = g.constant(self.tokens.clone());
        let mut ctx = crate::vit::Ctx {
            train: true,
            rng: &mut self.rng,
            dropout: 0.0,
        };
        let out = layer.forward_graph(&mut g, &mut binder, "probe", x, &mut ctx)?;
        let neg = g.constant(Tensor::new(
            self.targets.shape().to_vec(),
            self.targets.data().iter().map(|v| -v).collect(),
        )?);
        let diff = g.add(out.y, neg)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq)?;
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let mut per_expert: Vec<FFNParams> = experts
            .iter()
            .map(|e| FFNParams::zeros(e.d_model(), e.d_hidden()))
            .collect();
        for (name, var) in binder.bound() {
            let Some(gt) = grads.get(*var) else { continue };
            // names look like probe.experts.{j}.{w1|b1|w2|b2}
            let mut parts = name.split('.').skip(2);
            let (Some(j), Some(arr)) = (parts.next(), parts.next()) else { continue };
            let j: usize = j.parse().map_err(|_| Error::InvalidArgument(name.clone()))?;
            let slot = match arr {
                "w1" => 0,
                "b1" => 1,
                "w2" => 2,
                _ => 3,
            };
            per_expert[j].arrays_mut()[slot].data_mut().copy_from_slice(gt.data());
        }
        Ok((loss_value, per_expert))
    }
}

/// Loss with zero gradient everywhere: weights move by mixing only.
pub struct ZeroGradient;

impl ProbeLoss for ZeroGradient {
    fn loss_and_grad(&mut self, experts: &[FFNParams]) -> Result<(f64, Vec<FFNParams>)> {
        Ok((
            0.0,
            experts
                .iter()
                .map(|e| FFNParams::zeros(e.d_model(), e.d_hidden()))
                .collect(),
        ))
    }
}

/// Sign applied to the gradient to form the recorded update direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateSign {
    /// `∇ = -grad`, ordinary gradient descent.
    Descent,
    /// `∇ = +grad`, the update written literally with a plus sign.
    Literal,
}

/// Recorded window of EWA training on one layer, as flat per-expert vectors.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n_experts: usize,
    pub eta: f64,
    /// β used by each of the `m+1` EWA applications.
    pub betas: Vec<f64>,
    /// `pre[k][i]` = `W_i^{t+k}`, before mixing (`m+1` entries).
    pub pre: Vec<Vec<Vec<f64>>>,
    /// `post[k][i]` = `W̄_i^{t+k}`, after mixing (`m+1` entries).
    pub post: Vec<Vec<Vec<f64>>>,
    /// `directions[k][i]` = `∇_i^{t+k}`, evaluated at `W̄^{t+k}` (`m` entries).
    pub directions: Vec<Vec<Vec<f64>>>,
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.directions.len()
    }

    fn constant_beta(&self) -> Result<f64> {
        let b = self.betas[0];
        if self.betas.iter().any(|&x| x != b) {
            return Err(Error::InvalidArgument(
                "closed-form checks need a constant share rate over the window".into(),
            ));
        }
        Ok(b)
    }
}

/// Runs `m` iterations of {step along the recorded direction from the
/// post-EWA weights, then EWA} after an initial EWA on the layer's current
/// weights. `betas` gives β for each of the `m+1` mixing steps (a single
/// value is broadcast).
pub fn record_trajectory(
    layer: &MoELayer,
    loss: &mut dyn ProbeLoss,
    m: usize,
    eta: f64,
    betas: &[f64],
    sign: UpdateSign,
) -> Result<Trajectory> {
    layer.validate()?;
    let betas: Vec<f64> = match betas {
        [b] => vec![*b; m + 1],
        bs if bs.len() == m + 1 => bs.to_vec(),
        bs => {
            return Err(Error::InvalidArgument(format!(
                "{} share rates for a window of {} mixing steps",
                bs.len(),
                m + 1
            )))
        }
    };
    let flat = |es: &[FFNParams]| es.iter().map(FFNParams::flatten).collect::<Vec<_>>();
    let mut current = layer.experts.clone();
    let mut pre = vec![flat(&current)];
    current = ewa_step(&current, betas[0])?;
    let mut post = vec![flat(&current)];
    let mut directions = Vec::with_capacity(m);
    let mut losses = Vec::with_capacity(m);
    let s = match sign {
        UpdateSign::Descent => -1.0,
        UpdateSign::Literal => 1.0,
    };
    for k in 0..m {
        let (l, grads) = loss.loss_and_grad(&current)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "probe loss" });
        }
        losses.push(l);
        let dirs: Vec<Vec<f64>> = grads.iter().map(|g| g.flatten().iter().map(|v| s * v).collect()).collect();
        let next: Vec<FFNParams> = current
            .iter()
            .zip(&dirs)
            .map(|(w, d)| {
                let v: Vec<f64> = w.flatten().iter().zip(d).map(|(a, b)| a + eta * b).collect();
                w.with_flat(&v)
            })
            .collect::<Result<_>>()?;
        pre.push(flat(&next));
        directions.push(dirs);
        current = ewa_step(&next, betas[k + 1])?;
        post.push(flat(&current));
    }
    Ok(Trajectory {
        n_experts: layer.n_experts(),
        eta,
        betas,
        pre,
        post,
        directions,
        losses,
    })
}

/// Mixed weights of one step written out from the previous pre-mix weights:
/// `(1-β)² W_i^k + η(1-β)∇_i^k + Σ_{j≠i} [β/(N-1) W_j^{k+1} + β(1-β)/(N-1) W_j^k]`
/// against `(1-β) W_i^{k+1} + Σ_{j≠i} β/(N-1) W_j^{k+1}`.
///
/// Returns the max abs discrepancy of every step in the window.
pub fn single_step_errors(traj: &Trajectory) -> Result<Vec<f64>> {
    let beta = traj.constant_beta()?;
    let n = traj.n_experts;
    let share = if n > 1 { beta / (n - 1) as f64 } else { 0.0 };
    let keep = 1.0 - beta;
    let mut errs = Vec::with_capacity(traj.steps());
    for k in 0..traj.steps() {
        let (w0, w1, dir) = (&traj.pre[k], &traj.pre[k + 1], &traj.directions[k]);
        let mut worst = 0.0f64;
        for i in 0..n {
            for p in 0..w0[i].len() {
                let mut lhs = keep * w1[i][p];
                let mut rhs = keep * keep * w0[i][p] + traj.eta * keep * dir[i][p];
                for j in (0..n).filter(|&j| j != i) {
                    lhs += share * w1[j][p];
                    rhs += share * w1[j][p] + share * keep * w0[j][p];
                }
                worst = worst.max((lhs - rhs).abs());
            }
        }
        errs.push(worst);
    }
    Ok(errs)
}

/// Max over the window of [`single_step_errors`].
pub fn verify_single_step(traj: &Trajectory) -> Result<f64> {
    if traj.steps() == 0 {
        return Err(Error::InvalidArgument("single-step check needs m >= 1".into()));
    }
    Ok(single_step_errors(traj)?.into_iter().fold(0.0, f64::max))
}

/// Right-hand side of the unrolled closed form for window length `m`,
/// per expert, from the recorded quantities.
pub fn unrolled_rhs(traj: &Trajectory, m: usize) -> Result<Vec<Vec<f64>>> {
    if m > traj.steps() {
        return Err(Error::InvalidArgument(format!("window {m} longer than trajectory {}", traj.steps())));
    }
    let beta = traj.constant_beta()?;
    let n = traj.n_experts;
    let keep = 1.0 - beta;
    let share = if n > 1 { beta / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = traj.pre[0][i].len();
        let mut rhs: Vec<f64> = traj.pre[0][i].iter().map(|w| keep.powi(m as i32 + 1) * w).collect();
        for k in 1..=m {
            let c = traj.eta * keep.powi(k as i32);
            let dir = &traj.directions[m - k][i];
            for p in 0..len {
                rhs[p] += c * dir[p];
            }
        }
        for j in (0..n).filter(|&j| j != i) {
            for k in 0..=m {
                let c = share * keep.powi((m - k) as i32);
                let w = &traj.pre[k][j];
                for p in 0..len {
                    rhs[p] += c * w[p];
                }
            }
        }
        out.push(rhs);
    }
    Ok(out)
}

/// Max abs error between the closed form for each prefix window
/// `1..=m` and the iterated post-EWA weights.
pub fn unrolled_errors(traj: &Trajectory) -> Result<Vec<f64>> {
    (1..=traj.steps())
        .map(|m| {
            let rhs = unrolled_rhs(traj, m)?;
            Ok(rhs
                .iter()
                .zip(&traj.post[m])
                .flat_map(|(r, w)| r.iter().zip(w).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Max abs error of the closed form over the full window.
pub fn verify_unrolled(traj: &Trajectory) -> Result<f64> {
    if traj.steps() == 0 {
        return Err(Error::InvalidArgument("unrolled check needs m >= 1".into()));
    }
    Ok(*unrolled_errors(traj)?.last().expect("m >= 1"))
}

#[derive(Clone, Debug)]
pub struct DecayReport {
    pub n_experts: usize,
    pub m: usize,
    pub beta: f64,
    pub eta: f64,
    /// Least-squares coefficient of `W_i^t` in what remains of `W̄_i^{t+m}`
    /// after removing the update and history terms.
    pub measured_decay: f64,
    /// `(1-β)^{m+1}`
    pub expected_decay: f64,
    /// `β/(N-1)·(1-β)^{m-k}` for `k = 0..=m`.
    pub history_weights: Vec<f64>,
    pub history_increasing: bool,
    pub unrolled_error: f64,
    pub single_step_error: f64,
}

impl DecayReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "N={} m={} beta={} eta={}",
            self.n_experts, self.m, self.beta, self.eta
        );
        let _ = writeln!(
            s,
            "  own-weight decay: measured {:.12} expected (1-beta)^(m+1) = {:.12} (|diff| {:.3e})",
            self.measured_decay,
            self.expected_decay,
            (self.measured_decay - self.expected_decay).abs()
        );
        let w: Vec<String> = self.history_weights.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            s,
            "  history weights k=0..m: [{}] increasing={}",
            w.join(", "),
            self.history_increasing
        );
        let _ = writeln!(
            s,
            "  max abs error: single-step {:.3e}, unrolled {:.3e}",
            self.single_step_error, self.unrolled_error
        );
        s
    }
}

/// Measures the own-weight decay coefficient and lists the history weights.
pub fn decay_and_history_report(traj: &Trajectory) -> Result<DecayReport> {
    let m = traj.steps();
    let beta = traj.constant_beta()?;
    let n = traj.n_experts;
    let keep = 1.0 - beta;
    let share = if n > 1 { beta / (n - 1) as f64 } else { 0.0 };

    // Residual = W̄^{t+m} - (update terms) - (history terms); fit c·W^t.
    let full = unrolled_rhs(traj, m)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let w0 = &traj.pre[0][i];
        for p in 0..w0.len() {
            let decay_term = keep.powi(m as i32 + 1) * w0[p];
            let others = full[i][p] - decay_term;
            let residual = traj.post[m][i][p] - others;
            num += residual * w0[p];
            den += w0[p] * w0[p];
        }
    }
    let measured_decay = if den > 0.0 { num / den } else { f64::NAN };
    let history_weights: Vec<f64> = (0..=m).map(|k| share * keep.powi((m - k) as i32)).collect();
    let history_increasing = history_weights.windows(2).all(|w| w[1] > w[0]);
    Ok(DecayReport {
        n_experts: n,
        m,
        beta,
        eta: traj.eta,
        measured_decay,
        expected_decay: keep.powi(m as i32 + 1),
        history_weights,
        history_increasing,
        unrolled_error: if m > 0 { verify_unrolled(traj)? } else { 0.0 },
        single_step_error: if m > 0 { verify_single_step(traj)? } else { 0.0 },
    })
}

/// Probe layer with tiny dimensions (d=3, h=5) and independently drawn experts.
pub fn probe_layer(n_experts: usize, rng: &mut Rng) -> Result<MoELayer> {
    let mut layer = MoELayer::random(3, 5, n_experts, &MoeMode::Rup, rng)?;
    // spread the experts out so mixing is visible at the scale of the checks
    for e in &mut layer.experts {
        for t in e.arrays_mut() {
            for v in t.data_mut() {
                *v += rand::Rng::random_range(rng, -1.0..1.0);
            }
        }
    }
    Ok(layer)
}

/// One row of a verification sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub report: DecayReport,
    pub per_step_single: Vec<f64>,
    pub per_step_unrolled: Vec<f64>,
}

/// Verifies the closed form on random probes over a grid of
/// `(N, m)` pairs and share rates.
pub fn sweep(cases: &[(usize, usize)], betas: &[f64], eta: f64, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &(n, m) in cases {
        for &beta in betas {
            let layer = probe_layer(n, &mut rng)?;
            let mut probe = QuadraticProbe::random(&layer.experts[0], n, &mut rng);
            let traj = record_trajectory(&layer, &mut probe, m, eta, &[beta], UpdateSign::Descent)?;
            rows.push(SweepRow {
                report: decay_and_history_report(&traj)?,
                per_step_single: single_step_errors(&traj)?,
                per_step_unrolled: unrolled_errors(&traj)?,
            });
        }
    }
    Ok(rows)
}

/// CSV of per-step errors: `n_experts,m,beta,step,single_step_error,unrolled_error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_experts,m,beta,step,single_step_error,unrolled_error\n");
    for r in rows {
        for (k, (a, b)) in r.per_step_single.iter().zip(&r.per_step_unrolled).enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e}",
                r.report.n_experts,
                r.report.m,
                r.report.beta,
                k + 1,
                a,
                b
            );
        }
    }
    s
}
