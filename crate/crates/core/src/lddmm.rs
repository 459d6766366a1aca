//! Reduced geodesic matching: momenta on template vertices drive an RK4
//! particle flow, the objective gradient comes from an exact reverse sweep
//! through the integrator, and a descent loop with Armijo backtracking (or
//! L-BFGS) minimizes kinetic energy plus the kernel-distance attachment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::LddmmError;
use crate::geom::{self, Point};
use crate::kernels::{attachment_grad_prepared, sqdist_prepared, KernelMetric, PreparedTarget};
use crate::scalar::{fl, Scalar};
use crate::varifold::MeshVarifold;

/// Scalar Gaussian kernel times the identity matrix: the reproducing kernel
/// of the vector-field space the flow lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowKernel<T> {
    pub sigma: T,
}

impl<T: Scalar> FlowKernel<T> {
    pub fn gaussian(sigma: T) -> Self {
        assert!(sigma > T::zero(), "flow kernel width must be positive");
        Self { sigma }
    }

    #[inline]
    pub fn eval(&self, x: Point<T>, y: Point<T>) -> T {
        let two = fl::<T>(2.0);
        (-geom::dist2(x, y) / (two * self.sigma * self.sigma)).exp()
    }
}

/// Time-discretized momenta: `a[k][i]` drives vertex `i` on step `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory<T> {
    pub nt: usize,
    pub a: Vec<Vec<Point<T>>>,
}

impl<T: Scalar> ControlTrajectory<T> {
    pub fn zeros(nt: usize, n: usize) -> Self {
        assert!(nt >= 1);
        Self {
            nt,
            a: vec![vec![geom::zero(); n]; nt],
        }
    }

    pub fn n_points(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn norm2(&self) -> T {
        self.a
            .iter()
            .flat_map(|step| step.iter().map(|v| geom::norm2(*v)))
            .sum()
    }
}

/// Vertex positions along the flow, `z[0]` being the template vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory<T> {
    pub z: Vec<Vec<Point<T>>>,
}

impl<T: Scalar> StateTrajectory<T> {
    pub fn initial(&self) -> &[Point<T>] {
        &self.z[0]
    }

    pub fn terminal(&self) -> &[Point<T>] {
        self.z.last().expect("non-empty trajectory")
    }
}

/// Co-states along the flow; the terminal slice is minus the attachment
/// gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoStateTrajectory<T> {
    pub p: Vec<Vec<Point<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptMethod {
    GradientDescent,
    Lbfgs,
}

/// Settings for `register`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig<T> {
    /// Data-attachment weight: the objective adds `sqdist / sigma^2`.
    pub sigma: T,
    /// Flow kernel width.
    pub sigma_v: T,
    /// Number of uniform time steps on [0, 1].
    pub nt: usize,
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tol: T,
    pub armijo_c: T,
    pub max_backtracks: usize,
    pub init_step: T,
    pub method: OptMethod,
}

impl<T: Scalar> RegistrationConfig<T> {
    pub fn new(sigma: T, sigma_v: T) -> Self {
        Self {
            sigma,
            sigma_v,
            nt: 10,
            max_iters: 200,
            tol: fl(1e-6),
            armijo_c: fl(1e-4),
            max_backtracks: 40,
            init_step: T::one(),
            method: OptMethod::GradientDescent,
        }
    }

    pub fn flow_kernel(&self) -> FlowKernel<T> {
        FlowKernel::gaussian(self.sigma_v)
    }
}

const PAR_CHUNK: usize = 128;

/// `v_i = sum_j k(z_i, z_j) a_j`; also the transpose kernel product, since
/// the kernel matrix is symmetric.
fn velocity<T: Scalar>(kv: &FlowKernel<T>, z: &[Point<T>], a: &[Point<T>]) -> Vec<Point<T>> {
    let two_s2 = fl::<T>(2.0) * kv.sigma * kv.sigma;
    let n = z.len();
    let n_chunks = n.div_ceil(PAR_CHUNK);
    let chunks: Vec<Vec<Point<T>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            (ci * PAR_CHUNK..((ci + 1) * PAR_CHUNK).min(n))
                .map(|i| {
                    let mut v = geom::zero();
                    for j in 0..n {
                        let k = (-geom::dist2(z[i], z[j]) / two_s2).exp();
                        v = geom::axpy(v, k, a[j]);
                    }
                    v
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Pullback of a co-vector `w` through the velocity's dependence on `z`:
/// `out_m = sum_j [(w_m . a_j) + (w_j . a_m)] grad1 k(z_m, z_j)`.
///
/// With `w = p - a` this is the z-derivative of the Hamiltonian.
fn velocity_vjp_z<T: Scalar>(
    kv: &FlowKernel<T>,
    z: &[Point<T>],
    a: &[Point<T>],
    w: &[Point<T>],
) -> Vec<Point<T>> {
    let s2 = kv.sigma * kv.sigma;
    let two_s2 = fl::<T>(2.0) * s2;
    let n = z.len();
    let n_chunks = n.div_ceil(PAR_CHUNK);
    let chunks: Vec<Vec<Point<T>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            (ci * PAR_CHUNK..((ci + 1) * PAR_CHUNK).min(n))
                .map(|m| {
                    let mut out = geom::zero();
                    for j in 0..n {
                        let diff = geom::sub(z[m], z[j]);
                        let k = (-geom::norm2(diff) / two_s2).exp();
                        let coef = geom::dot(w[m], a[j]) + geom::dot(w[j], a[m]);
                        // grad1 k = -(z_m - z_j)/sigma^2 * k
                        out = geom::axpy(out, -coef * k / s2, diff);
                    }
                    out
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn axpy_all<T: Scalar>(y: &[Point<T>], s: T, x: &[Point<T>]) -> Vec<Point<T>> {
    y.iter()
        .zip(x)
        .map(|(&yi, &xi)| geom::axpy(yi, s, xi))
        .collect()
}

fn add_assign_all<T: Scalar>(y: &mut [Point<T>], x: &[Point<T>]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = geom::add(*yi, *xi);
    }
}

/// One RK4 step of `z' = vel(z; a)` with frozen controls.
fn rk4_step<T: Scalar>(kv: &FlowKernel<T>, z: &[Point<T>], a: &[Point<T>], h: T) -> Vec<Point<T>> {
    let half = h / fl::<T>(2.0);
    let sixth = h / fl::<T>(6.0);
    let s1 = velocity(kv, z, a);
    let s2 = velocity(kv, &axpy_all(z, half, &s1), a);
    let s3 = velocity(kv, &axpy_all(z, half, &s2), a);
    let s4 = velocity(kv, &axpy_all(z, h, &s3), a);
    let mut out = z.to_vec();
    for i in 0..out.len() {
        let combo = geom::add(
            geom::add(s1[i], geom::scale(s2[i], fl(2.0))),
            geom::add(geom::scale(s3[i], fl(2.0)), s4[i]),
        );
        out[i] = geom::axpy(out[i], sixth, combo);
    }
    out
}

/// Integrates the reduced flow from `z0` with piecewise-constant controls.
pub fn flow_forward<T: Scalar>(
    a: &ControlTrajectory<T>,
    z0: &[Point<T>],
    kv: &FlowKernel<T>,
) -> Result<StateTrajectory<T>, LddmmError> {
    if a.n_points() != z0.len() {
        return Err(LddmmError::ShapeMismatch(format!(
            "{} controls vs {} points",
            a.n_points(),
            z0.len()
        )));
    }
    let h = T::one() / fl::<T>(a.nt as f64);
    let mut z = Vec::with_capacity(a.nt + 1);
    z.push(z0.to_vec());
    for k in 0..a.nt {
        let next = rk4_step(kv, &z[k], &a.a[k], h);
        if !geom::all_finite(&next) {
            return Err(LddmmError::NonFinite { step: k + 1 });
        }
        z.push(next);
    }
    Ok(StateTrajectory { z })
}

/// `H(p, z, a) = sum_ij p_i . k(z_i, z_j) a_j - sum_ij a_i . k(z_i, z_j) a_j`.
pub fn hamiltonian<T: Scalar>(
    p: &[Point<T>],
    z: &[Point<T>],
    a: &[Point<T>],
    kv: &FlowKernel<T>,
) -> T {
    let v = velocity(kv, z, a);
    let mut h = T::zero();
    for i in 0..z.len() {
        h = h + geom::dot(geom::sub(p[i], a[i]), v[i]);
    }
    h
}

/// Reverse sweep through the RK4 steps: exact gradient of the discrete
/// objective plus the matching co-state trajectory.
///
/// `zbar` carries the objective gradient with respect to the state; the
/// co-state is its negative, so `p(1) = -terminal_grad`. The per-step kinetic
/// cost `h a^T K(z) a` feeds both the control gradient and the co-state.
fn backward_sweep<T: Scalar>(
    a: &ControlTrajectory<T>,
    ztraj: &StateTrajectory<T>,
    terminal_grad: &[Point<T>],
    kv: &FlowKernel<T>,
) -> Result<(CoStateTrajectory<T>, Vec<Vec<Point<T>>>), LddmmError> {
    let nt = a.nt;
    let n = a.n_points();
    if ztraj.z.len() != nt + 1 || terminal_grad.len() != n {
        return Err(LddmmError::ShapeMismatch(
            "trajectory/terminal gradient shapes".into(),
        ));
    }
    let h = T::one() / fl::<T>(nt as f64);
    let half = h / fl::<T>(2.0);
    let sixth = h / fl::<T>(6.0);
    let third = h / fl::<T>(3.0);

    let mut zbar = terminal_grad.to_vec();
    let mut p = vec![vec![geom::zero::<T>(); n]; nt + 1];
    p[nt] = zbar.iter().map(|g| geom::scale(*g, -T::one())).collect();
    let mut grad = vec![vec![geom::zero::<T>(); n]; nt];

    for k in (0..nt).rev() {
        let zk = &ztraj.z[k];
        let ak = &a.a[k];
        // Recompute the stages of the forward step.
        let s1 = velocity(kv, zk, ak);
        let y2 = axpy_all(zk, half, &s1);
        let s2 = velocity(kv, &y2, ak);
        let y3 = axpy_all(zk, half, &s2);
        let s3 = velocity(kv, &y3, ak);
        let y4 = axpy_all(zk, h, &s3);

        let w = zbar.clone();

        // Stage 4 at y4.
        let s4bar: Vec<Point<T>> = w.iter().map(|v| geom::scale(*v, sixth)).collect();
        let y4bar = velocity_vjp_z(kv, &y4, ak, &s4bar);
        let mut abar = velocity(kv, &y4, &s4bar);

        // Stage 3 at y3: direct weight 2h/6 plus the path through y4.
        let mut s3bar: Vec<Point<T>> = w.iter().map(|v| geom::scale(*v, third)).collect();
        for i in 0..n {
            s3bar[i] = geom::axpy(s3bar[i], h, y4bar[i]);
        }
        let y3bar = velocity_vjp_z(kv, &y3, ak, &s3bar);
        add_assign_all(&mut abar, &velocity(kv, &y3, &s3bar));

        // Stage 2 at y2.
        let mut s2bar: Vec<Point<T>> = w.iter().map(|v| geom::scale(*v, third)).collect();
        for i in 0..n {
            s2bar[i] = geom::axpy(s2bar[i], half, y3bar[i]);
        }
        let y2bar = velocity_vjp_z(kv, &y2, ak, &s2bar);
        add_assign_all(&mut abar, &velocity(kv, &y2, &s2bar));

        // Stage 1 at z_k.
        let mut s1bar: Vec<Point<T>> = w.iter().map(|v| geom::scale(*v, sixth)).collect();
        for i in 0..n {
            s1bar[i] = geom::axpy(s1bar[i], half, y2bar[i]);
        }
        let y1bar = velocity_vjp_z(kv, zk, ak, &s1bar);
        add_assign_all(&mut abar, &velocity(kv, zk, &s1bar));

        // Collect z_k cotangent: direct path plus all stage pullbacks.
        add_assign_all(&mut zbar, &y1bar);
        add_assign_all(&mut zbar, &y2bar);
        add_assign_all(&mut zbar, &y3bar);
        add_assign_all(&mut zbar, &y4bar);

        // Kinetic term h a^T K(z_k) a: gradient 2h K a in the controls,
        // h d_z(a^T K a) in the state.
        let ka = velocity(kv, zk, ak);
        for i in 0..n {
            abar[i] = geom::axpy(abar[i], fl::<T>(2.0) * h, ka[i]);
        }
        let kin_z = velocity_vjp_z(kv, zk, ak, ak);
        for i in 0..n {
            zbar[i] = geom::axpy(zbar[i], h, kin_z[i]);
        }

        p[k] = zbar.iter().map(|g| geom::scale(*g, -T::one())).collect();
        grad[k] = abar;

        if !geom::all_finite(&zbar) {
            return Err(LddmmError::NonFinite { step: k });
        }
    }

    Ok((CoStateTrajectory { p }, grad))
}

/// Co-state trajectory for a given terminal gradient, integrated backward on
/// the same grid as the forward flow.
pub fn adjoint_backward<T: Scalar>(
    a: &ControlTrajectory<T>,
    ztraj: &StateTrajectory<T>,
    terminal_grad: &[Point<T>],
    kv: &FlowKernel<T>,
) -> Result<CoStateTrajectory<T>, LddmmError> {
    backward_sweep(a, ztraj, terminal_grad, kv).map(|(p, _)| p)
}

/// Objective value split into its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts<T> {
    pub total: T,
    pub kinetic: T,
    pub attachment: T,
}

fn kinetic_energy<T: Scalar>(
    a: &ControlTrajectory<T>,
    ztraj: &StateTrajectory<T>,
    kv: &FlowKernel<T>,
) -> T {
    let h = T::one() / fl::<T>(a.nt as f64);
    let mut e = T::zero();
    for k in 0..a.nt {
        let v = velocity(kv, &ztraj.z[k], &a.a[k]);
        for i in 0..v.len() {
            e = e + geom::dot(a.a[k][i], v[i]);
        }
    }
    e * h
}

fn objective_with<T: Scalar>(
    a: &ControlTrajectory<T>,
    template: &MeshVarifold<T>,
    target: &PreparedTarget<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
) -> Result<(ObjectiveParts<T>, StateTrajectory<T>), LddmmError> {
    let kv = config.flow_kernel();
    let ztraj = flow_forward(a, template.family().positions(), &kv)?;
    let kinetic = kinetic_energy(a, &ztraj, &kv);
    let deformed = template
        .deform(ztraj.terminal())
        .map_err(|e| LddmmError::ShapeMismatch(e.to_string()))?;
    let sqdist = sqdist_prepared(metric, &deformed, target)?;
    let attachment = sqdist / (config.sigma * config.sigma);
    Ok((
        ObjectiveParts {
            total: kinetic + attachment,
            kinetic,
            attachment,
        },
        ztraj,
    ))
}

/// Kinetic energy plus weighted attachment for the controls `a`.
pub fn objective<T: Scalar>(
    a: &ControlTrajectory<T>,
    template: &MeshVarifold<T>,
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
) -> Result<ObjectiveParts<T>, LddmmError> {
    let prepared = PreparedTarget::new(metric, target)?;
    objective_with(a, template, &prepared, metric, config).map(|(parts, _)| parts)
}

fn gradient_with<T: Scalar>(
    a: &ControlTrajectory<T>,
    template: &MeshVarifold<T>,
    target: &PreparedTarget<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
) -> Result<(Vec<Vec<Point<T>>>, StateTrajectory<T>), LddmmError> {
    let kv = config.flow_kernel();
    let ztraj = flow_forward(a, template.family().positions(), &kv)?;
    let deformed = template
        .deform(ztraj.terminal())
        .map_err(|e| LddmmError::ShapeMismatch(e.to_string()))?;
    let mut terminal = attachment_grad_prepared(metric, &deformed, target)?;
    let inv_s2 = T::one() / (config.sigma * config.sigma);
    for g in &mut terminal {
        *g = geom::scale(*g, inv_s2);
    }
    let (_p, grad) = backward_sweep(a, &ztraj, &terminal, &kv)?;
    Ok((grad, ztraj))
}

/// Exact gradient of `objective` with respect to the controls.
pub fn gradient<T: Scalar>(
    a: &ControlTrajectory<T>,
    template: &MeshVarifold<T>,
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
) -> Result<Vec<Vec<Point<T>>>, LddmmError> {
    let prepared = PreparedTarget::new(metric, target)?;
    gradient_with(a, template, &prepared, metric, config).map(|(grad, _)| grad)
}

/// Per-iteration optimizer record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationStats<T> {
    pub objective: T,
    pub kinetic: T,
    pub attachment: T,
    pub step: T,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterDiagnostics<T> {
    pub trace: Vec<IterationStats<T>>,
    pub initial_sqdist: T,
    pub final_sqdist: T,
    /// Relative drift of the Hamiltonian along the returned solution.
    pub hamiltonian_drift: T,
    pub line_search_failed: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterResult<T> {
    pub control: ControlTrajectory<T>,
    pub states: StateTrajectory<T>,
    pub diagnostics: RegisterDiagnostics<T>,
}

struct Flat;

impl Flat {
    fn dot<T: Scalar>(a: &[Vec<Point<T>>], b: &[Vec<Point<T>>]) -> T {
        let mut s = T::zero();
        for (sa, sb) in a.iter().zip(b) {
            for (va, vb) in sa.iter().zip(sb) {
                s = s + geom::dot(*va, *vb);
            }
        }
        s
    }

    fn axpy<T: Scalar>(y: &mut [Vec<Point<T>>], s: T, x: &[Vec<Point<T>>]) {
        for (sy, sx) in y.iter_mut().zip(x) {
            for (vy, vx) in sy.iter_mut().zip(sx) {
                *vy = geom::axpy(*vy, s, *vx);
            }
        }
    }

    fn scaled<T: Scalar>(x: &[Vec<Point<T>>], s: T) -> Vec<Vec<Point<T>>> {
        x.iter()
            .map(|step| step.iter().map(|v| geom::scale(*v, s)).collect())
            .collect()
    }

    fn sub<T: Scalar>(a: &[Vec<Point<T>>], b: &[Vec<Point<T>>]) -> Vec<Vec<Point<T>>> {
        a.iter()
            .zip(b)
            .map(|(sa, sb)| {
                sa.iter()
                    .zip(sb)
                    .map(|(va, vb)| geom::sub(*va, *vb))
                    .collect()
            })
            .collect()
    }
}

/// L-BFGS two-loop recursion over the flattened control array.
struct LbfgsState<T> {
    pairs: std::collections::VecDeque<(Vec<Vec<Point<T>>>, Vec<Vec<Point<T>>>, T)>,
    memory: usize,
}

impl<T: Scalar> LbfgsState<T> {
    fn new(memory: usize) -> Self {
        Self {
            pairs: Default::default(),
            memory,
        }
    }

    fn push(&mut self, s: Vec<Vec<Point<T>>>, y: Vec<Vec<Point<T>>>) {
        let sy = Flat::dot(&s, &y);
        let ss = Flat::dot(&s, &s).sqrt();
        let yy = Flat::dot(&y, &y).sqrt();
        if sy > fl::<T>(1e-12) * ss * yy {
            if self.pairs.len() == self.memory {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, T::one() / sy));
        }
    }

    fn direction(&self, grad: &[Vec<Point<T>>]) -> Vec<Vec<Point<T>>> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let alpha = *rho * Flat::dot(s, &q);
            Flat::axpy(&mut q, -alpha, y);
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = Flat::dot(s, y) / Flat::dot(y, y);
            q = Flat::scaled(&q, gamma);
        }
        for ((s, y, rho), alpha) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let beta = *rho * Flat::dot(y, &q);
            Flat::axpy(&mut q, alpha - beta, s);
        }
        Flat::scaled(&q, -T::one())
    }
}

/// Gradient descent (or L-BFGS) from `a = 0`.
pub fn register<T: Scalar>(
    template: &MeshVarifold<T>,
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
) -> Result<RegisterResult<T>, LddmmError> {
    let init = ControlTrajectory::zeros(config.nt, template.family().n_vertices());
    register_with_init(template, target, metric, config, init)
}

/// Registration warm-started from the given controls.
pub fn register_with_init<T: Scalar>(
    template: &MeshVarifold<T>,
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    config: &RegistrationConfig<T>,
    init: ControlTrajectory<T>,
) -> Result<RegisterResult<T>, LddmmError> {
    let prepared = PreparedTarget::new(metric, target)?;
    let kv = config.flow_kernel();
    let mut a = init;
    let (mut parts, mut ztraj) = objective_with(&a, template, &prepared, metric, config)?;
    let initial_sqdist = parts.attachment * config.sigma * config.sigma;

    let mut trace = vec![IterationStats {
        objective: parts.total,
        kinetic: parts.kinetic,
        attachment: parts.attachment,
        step: T::zero(),
    }];
    let mut step = config.init_step;
    let mut line_search_failed = false;
    let mut lbfgs = LbfgsState::new(10);
    let mut prev: Option<(Vec<Vec<Point<T>>>, Vec<Vec<Point<T>>>)> = None;
    let mut iterations = 0;

    for iter in 0..config.max_iters {
        let (grad, _) = gradient_with(&a, template, &prepared, metric, config)?;
        let direction = match config.method {
            OptMethod::GradientDescent => Flat::scaled(&grad, -T::one()),
            OptMethod::Lbfgs => {
                if let Some((pa, pg)) = &prev {
                    lbfgs.push(Flat::sub(&a.a, pa), Flat::sub(&grad, pg));
                }
                prev = Some((a.a.clone(), grad.clone()));
                let d = lbfgs.direction(&grad);
                if Flat::dot(&d, &grad) < T::zero() {
                    d
                } else {
                    Flat::scaled(&grad, -T::one())
                }
            }
        };
        let slope = Flat::dot(&direction, &grad);
        let gnorm2 = Flat::dot(&grad, &grad);
        if gnorm2 == T::zero() {
            break;
        }

        // Armijo backtracking with step carry-over.
        let mut accepted = false;
        let mut trial_step = step;
        for _ in 0..config.max_backtracks {
            let mut candidate = a.clone();
            Flat::axpy(&mut candidate.a, trial_step, &direction);
            match objective_with(&candidate, template, &prepared, metric, config) {
                Ok((cand_parts, cand_traj))
                    if cand_parts.total <= parts.total + config.armijo_c * trial_step * slope =>
                {
                    a = candidate;
                    parts = cand_parts;
                    ztraj = cand_traj;
                    accepted = true;
                    break;
                }
                _ => trial_step = trial_step / fl::<T>(2.0),
            }
        }
        iterations = iter + 1;
        if !accepted {
            line_search_failed = true;
            break;
        }
        step = trial_step * fl::<T>(2.0);
        let last = trace.last().unwrap().objective;
        trace.push(IterationStats {
            objective: parts.total,
            kinetic: parts.kinetic,
            attachment: parts.attachment,
            step: trial_step,
        });
        let denom = last.abs().max(fl(1e-30));
        if (last - parts.total) / denom < config.tol {
            break;
        }
    }

    // Hamiltonian drift along the returned solution, as a diagnostic of how
    // close the controls are to a geodesic.
    let deformed = template
        .deform(ztraj.terminal())
        .map_err(|e| LddmmError::ShapeMismatch(e.to_string()))?;
    let mut terminal = attachment_grad_prepared(metric, &deformed, &prepared)?;
    let inv_s2 = T::one() / (config.sigma * config.sigma);
    for g in &mut terminal {
        *g = geom::scale(*g, inv_s2);
    }
    let (p, _) = backward_sweep(&a, &ztraj, &terminal, &kv)?;
    let h0 = hamiltonian(&p.p[0], &ztraj.z[0], &a.a[0], &kv);
    let mut drift = T::zero();
    for k in 0..config.nt {
        let hk = hamiltonian(&p.p[k], &ztraj.z[k], &a.a[k], &kv);
        drift = drift.max((hk - h0).abs());
    }
    let drift = drift / h0.abs().max(fl(1e-30));

    let final_sqdist = parts.attachment * config.sigma * config.sigma;
    Ok(RegisterResult {
        control: a,
        states: ztraj,
        diagnostics: RegisterDiagnostics {
            trace,
            initial_sqdist,
            final_sqdist,
            hamiltonian_drift: drift,
            line_search_failed,
            iterations,
        },
    })
}

/// Transports arbitrary probe points through the flow generated by `a`.
///
/// The template vertices are re-integrated alongside, so probes that start at
/// a template vertex reproduce the state trajectory exactly.
pub fn transport_points<T: Scalar>(
    a: &ControlTrajectory<T>,
    kv: &FlowKernel<T>,
    z0: &[Point<T>],
    points: &[Point<T>],
) -> Result<Vec<Point<T>>, LddmmError> {
    if a.n_points() != z0.len() {
        return Err(LddmmError::ShapeMismatch(format!(
            "{} controls vs {} points",
            a.n_points(),
            z0.len()
        )));
    }
    let h = T::one() / fl::<T>(a.nt as f64);
    let half = h / fl::<T>(2.0);
    let sixth = h / fl::<T>(6.0);
    let mut z = z0.to_vec();
    let mut y = points.to_vec();

    let probe_vel = |z: &[Point<T>], y: &[Point<T>], ak: &[Point<T>]| -> Vec<Point<T>> {
        let two_s2 = fl::<T>(2.0) * kv.sigma * kv.sigma;
        y.par_iter()
            .map(|&q| {
                let mut v = geom::zero();
                for j in 0..z.len() {
                    let k = (-geom::dist2(q, z[j]) / two_s2).exp();
                    v = geom::axpy(v, k, ak[j]);
                }
                v
            })
            .collect()
    };

    for k in 0..a.nt {
        let ak = &a.a[k];
        let zs1 = velocity(kv, &z, ak);
        let ys1 = probe_vel(&z, &y, ak);
        let z2 = axpy_all(&z, half, &zs1);
        let y2 = axpy_all(&y, half, &ys1);
        let zs2 = velocity(kv, &z2, ak);
        let ys2 = probe_vel(&z2, &y2, ak);
        let z3 = axpy_all(&z, half, &zs2);
        let y3 = axpy_all(&y, half, &ys2);
        let zs3 = velocity(kv, &z3, ak);
        let ys3 = probe_vel(&z3, &y3, ak);
        let z4 = axpy_all(&z, h, &zs3);
        let y4 = axpy_all(&y, h, &ys3);
        let zs4 = velocity(kv, &z4, ak);
        let ys4 = probe_vel(&z4, &y4, ak);
        for i in 0..z.len() {
            let combo = geom::add(
                geom::add(zs1[i], geom::scale(zs2[i], fl(2.0))),
                geom::add(geom::scale(zs3[i], fl(2.0)), zs4[i]),
            );
            z[i] = geom::axpy(z[i], sixth, combo);
        }
        for q in 0..y.len() {
            let combo = geom::add(
                geom::add(ys1[q], geom::scale(ys2[q], fl(2.0))),
                geom::add(geom::scale(ys3[q], fl(2.0)), ys4[q]),
            );
            y[q] = geom::axpy(y[q], sixth, combo);
        }
        if !geom::all_finite(&y) || !geom::all_finite(&z) {
            return Err(LddmmError::NonFinite { step: k + 1 });
        }
    }
    Ok(y)
}

/// Integrates the geodesic Hamiltonian system with the optimality
/// substitution `a = p/2`, returning states and co-states on the grid.
pub fn geodesic_shoot<T: Scalar>(
    z0: &[Point<T>],
    p0: &[Point<T>],
    kv: &FlowKernel<T>,
    nt: usize,
) -> Result<(StateTrajectory<T>, CoStateTrajectory<T>), LddmmError> {
    assert!(nt >= 1);
    let h = T::one() / fl::<T>(nt as f64);
    let half = h / fl::<T>(2.0);
    let sixth = h / fl::<T>(6.0);
    let halfv = fl::<T>(0.5);

    // z' = vel(z, p/2); p' = -d_z H(p, z, p/2) = -vjp_z(z, p/2, p/2).
    let rhs = |z: &[Point<T>], p: &[Point<T>]| -> (Vec<Point<T>>, Vec<Point<T>>) {
        let a: Vec<Point<T>> = p.iter().map(|v| geom::scale(*v, halfv)).collect();
        let dz = velocity(kv, z, &a);
        let dp = velocity_vjp_z(kv, z, &a, &a)
            .into_iter()
            .map(|v| geom::scale(v, -T::one()))
            .collect();
        (dz, dp)
    };

    let mut z = vec![z0.to_vec()];
    let mut p = vec![p0.to_vec()];
    for k in 0..nt {
        let (zk, pk) = (&z[k], &p[k]);
        let (dz1, dp1) = rhs(zk, pk);
        let (dz2, dp2) = rhs(&axpy_all(zk, half, &dz1), &axpy_all(pk, half, &dp1));
        let (dz3, dp3) = rhs(&axpy_all(zk, half, &dz2), &axpy_all(pk, half, &dp2));
        let (dz4, dp4) = rhs(&axpy_all(zk, h, &dz3), &axpy_all(pk, h, &dp3));
        let mut znext = zk.clone();
        let mut pnext = pk.clone();
        for i in 0..znext.len() {
            let combo_z = geom::add(
                geom::add(dz1[i], geom::scale(dz2[i], fl(2.0))),
                geom::add(geom::scale(dz3[i], fl(2.0)), dz4[i]),
            );
            znext[i] = geom::axpy(znext[i], sixth, combo_z);
            let combo_p = geom::add(
                geom::add(dp1[i], geom::scale(dp2[i], fl(2.0))),
                geom::add(geom::scale(dp3[i], fl(2.0)), dp4[i]),
            );
            pnext[i] = geom::axpy(pnext[i], sixth, combo_p);
        }
        if !geom::all_finite(&znext) || !geom::all_finite(&pnext) {
            return Err(LddmmError::NonFinite { step: k + 1 });
        }
        z.push(znext);
        p.push(pnext);
    }
    Ok((StateTrajectory { z }, CoStateTrajectory { p }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{varifold_sqdist, FeatureKernel, SpatialKernel};
    use crate::mesh::{build_regular_mesh, Aabb};
    use crate::varifold::{FeatureDistribution, FeatureSpace};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn label_space() -> FeatureSpace {
        FeatureSpace::Categorical {
            labels: vec!["a".into(), "b".into()],
        }
    }

    /// Small jittered-grid varifold: n <= 15 vertices in 2D, 8 in 3D.
    fn small_varifold(rng: &mut ChaCha8Rng, dim: usize) -> MeshVarifold<f64> {
        let bbox = if dim == 2 {
            Aabb::new([0.0, 0.0, 0.0], [1.5, 1.5, 0.0])
        } else {
            Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        };
        let grid = build_regular_mesh(bbox, if dim == 2 { 0.75 } else { 1.0 }, dim).unwrap();
        let jitter = if dim == 2 { 0.1 } else { 0.05 };
        let positions: Vec<[f64; 3]> = grid
            .positions()
            .iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-jitter..jitter),
                    p[1] + rng.gen_range(-jitter..jitter),
                    if dim == 3 {
                        p[2] + rng.gen_range(-jitter..jitter)
                    } else {
                        0.0
                    },
                ]
            })
            .collect();
        let family = grid.with_positions(positions).unwrap();
        family.validate_orientation().unwrap();
        let n = family.n_simplices();
        let alpha = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let zeta = (0..n)
            .map(|_| {
                let w: f64 = rng.gen_range(0.1..0.9);
                FeatureDistribution::Discrete {
                    weights: vec![w, 1.0 - w],
                }
            })
            .collect();
        MeshVarifold::new(family, alpha, zeta, label_space()).unwrap()
    }

    fn random_controls(rng: &mut ChaCha8Rng, nt: usize, n: usize, scale: f64) -> ControlTrajectory<f64> {
        let mut a = ControlTrajectory::zeros(nt, n);
        for step in &mut a.a {
            for v in step.iter_mut() {
                *v = [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    0.0,
                ];
            }
        }
        a
    }

    #[test]
    fn zero_controls_freeze_the_flow() {
        let z0: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.2, 0.9, 0.0]];
        let a = ControlTrajectory::zeros(4, 3);
        let kv = FlowKernel::gaussian(0.5);
        let traj = flow_forward(&a, &z0, &kv).unwrap();
        for zk in &traj.z {
            assert_eq!(zk, &z0);
        }
    }

    #[test]
    fn single_particle_moves_in_a_straight_line() {
        // One particle: z' = k(z, z) a = a, so z(1) = z0 + a.
        let z0: Vec<[f64; 3]> = vec![[0.3, -0.2, 0.0]];
        let mut a = ControlTrajectory::zeros(8, 1);
        let dir = [0.4, -0.7, 0.0];
        for step in &mut a.a {
            step[0] = dir;
        }
        let kv = FlowKernel::gaussian(0.5);
        let traj = flow_forward(&a, &z0, &kv).unwrap();
        let end = traj.terminal()[0];
        for k in 0..3 {
            assert!((end[k] - (z0[0][k] + dir[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_refinement_is_fourth_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 6;
        let z0: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let a_vec: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let kv = FlowKernel::gaussian(0.6);
        let endpoint = |nt: usize| {
            let mut a = ControlTrajectory::zeros(nt, n);
            for step in &mut a.a {
                step.clone_from_slice(&a_vec);
            }
            flow_forward(&a, &z0, &kv).unwrap().terminal().to_vec()
        };
        let z4 = endpoint(4);
        let z8 = endpoint(8);
        let z16 = endpoint(16);
        let norm = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| geom::dist2(*x, *y))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = norm(&z4, &z8) / norm(&z8, &z16);
        assert!(
            (8.0..40.0).contains(&ratio),
            "expected ~16 for an order-4 integrator, got {ratio}"
        );
    }

    #[test]
    fn hamiltonian_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let z: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let a: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let kv = FlowKernel::gaussian(0.8);

        assert!(hamiltonian(&a, &z, &a, &kv).abs() < 1e-12);

        let p2: Vec<[f64; 3]> = a.iter().map(|v| geom::scale(*v, 2.0)).collect();
        let h = hamiltonian(&p2, &z, &a, &kv);
        assert!(h >= 0.0);

        // Against a naive double loop.
        let p: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let mut naive = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k = (-geom::dist2(z[i], z[j]) / (2.0 * 0.8 * 0.8)).exp();
                naive += geom::dot(p[i], a[j]) * k - geom::dot(a[i], a[j]) * k;
            }
        }
        assert!((hamiltonian(&p, &z, &a, &kv) - naive).abs() < 1e-10 * naive.abs().max(1.0));
    }

    #[test]
    fn adjoint_with_zero_controls() {
        let z0: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let a = ControlTrajectory::zeros(5, 3);
        let kv = FlowKernel::gaussian(0.5);
        let traj = flow_forward(&a, &z0, &kv).unwrap();

        let zeros = vec![[0.0; 3]; 3];
        let p = adjoint_backward(&a, &traj, &zeros, &kv).unwrap();
        for pk in &p.p {
            assert_eq!(pk, &zeros);
        }

        // Nonzero terminal gradient, zero controls: p is constant in time.
        let tg = vec![[0.2, -0.4, 0.0], [0.1, 0.0, 0.0], [-0.3, 0.5, 0.0]];
        let p = adjoint_backward(&a, &traj, &tg, &kv).unwrap();
        let minus_tg: Vec<[f64; 3]> = tg.iter().map(|g| geom::scale(*g, -1.0)).collect();
        for pk in &p.p {
            for (x, y) in pk.iter().zip(&minus_tg) {
                for k in 0..3 {
                    assert!((x[k] - y[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn zero_controls_identical_varifolds_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v = small_varifold(&mut rng, 2);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.5), FeatureKernel::Identity);
        let config = RegistrationConfig::new(0.5, 0.6);
        let a = ControlTrajectory::zeros(config.nt, v.family().n_vertices());
        let grad = gradient(&a, &v, &v, &metric, &config).unwrap();
        for step in &grad {
            for g in step {
                for k in 0..3 {
                    assert!(g[k].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [2usize, 3] {
            let template = small_varifold(&mut rng, dim);
            let target = small_varifold(&mut rng, dim);
            let metric = KernelMetric::new(SpatialKernel::gaussian(0.6), FeatureKernel::Identity);
            let mut config = RegistrationConfig::new(0.7, 0.8);
            config.nt = 5;
            let n = template.family().n_vertices();
            let mut a = random_controls(&mut rng, config.nt, n, 0.15);
            if dim == 3 {
                for step in &mut a.a {
                    for v in step.iter_mut() {
                        v[2] = rng.gen_range(-0.15..0.15);
                    }
                }
            }

            let grad = gradient(&a, &template, &target, &metric, &config).unwrap();

            let h = 1e-5;
            let mut fd = vec![vec![[0.0f64; 3]; n]; config.nt];
            let mut num = 0.0;
            let mut den = 0.0;
            let mut dot = 0.0;
            let mut g2 = 0.0;
            let mut f2 = 0.0;
            for k in 0..config.nt {
                for i in 0..n {
                    for c in 0..dim {
                        let mut ap = a.clone();
                        ap.a[k][i][c] += h;
                        let mut am = a.clone();
                        am.a[k][i][c] -= h;
                        let fp = objective(&ap, &template, &target, &metric, &config)
                            .unwrap()
                            .total;
                        let fm = objective(&am, &template, &target, &metric, &config)
                            .unwrap()
                            .total;
                        fd[k][i][c] = (fp - fm) / (2.0 * h);
                        let d = grad[k][i][c] - fd[k][i][c];
                        num += d * d;
                        den += fd[k][i][c] * fd[k][i][c];
                        dot += grad[k][i][c] * fd[k][i][c];
                        g2 += grad[k][i][c] * grad[k][i][c];
                        f2 += fd[k][i][c] * fd[k][i][c];
                    }
                }
            }
            let rel = (num / den.max(1e-300)).sqrt();
            let cosine = dot / (g2.sqrt() * f2.sqrt()).max(1e-300);
            assert!(rel < 1e-4, "dim {dim}: relative L2 error {rel}");
            assert!(cosine > 0.9999, "dim {dim}: cosine {cosine}");
        }
    }

    #[test]
    fn register_identical_inputs_is_immediate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = small_varifold(&mut rng, 2);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.5), FeatureKernel::Identity);
        let config = RegistrationConfig::new(0.5, 0.6);
        let result = register(&v, &v, &metric, &config).unwrap();
        assert!(result.diagnostics.iterations <= 2);
        assert!(result.diagnostics.trace.last().unwrap().objective < 1e-12);
        assert!(result.control.norm2() < 1e-20);
    }

    #[test]
    fn register_descends_monotonically_and_closes_the_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let template = small_varifold(&mut rng, 2);
        // Target: the same varifold pushed through a smooth expansion.
        let target_pos: Vec<[f64; 3]> = template
            .family()
            .positions()
            .iter()
            .map(|p| {
                let c = [p[0] - 0.75, p[1] - 0.75, 0.0];
                [0.75 + 1.25 * c[0], 0.75 + 1.25 * c[1], 0.0]
            })
            .collect();
        let target = template.deform(&target_pos).unwrap();
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.4), FeatureKernel::Identity);
        let initial = varifold_sqdist(&metric, &template, &target).unwrap();
        let mut config = RegistrationConfig::new((0.1 * initial.sqrt()).sqrt(), 0.8);
        config.max_iters = 120;
        let result = register(&template, &target, &metric, &config).unwrap();
        for w in result.diagnostics.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
        assert!(
            result.diagnostics.final_sqdist <= 0.2 * initial,
            "final {} vs initial {initial}",
            result.diagnostics.final_sqdist
        );
        // Deformed template stays un-folded.
        let deformed = template.deform(result.states.terminal()).unwrap();
        deformed.family().validate_orientation().unwrap();
    }

    #[test]
    fn larger_sigma_means_less_deformation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let template = small_varifold(&mut rng, 2);
        let target_pos: Vec<[f64; 3]> = template
            .family()
            .positions()
            .iter()
            .map(|p| [p[0] * 1.2, p[1] * 1.2, 0.0])
            .collect();
        let target = template.deform(&target_pos).unwrap();
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.4), FeatureKernel::Identity);
        let mut kinetics = Vec::new();
        for mult in [1.0, 2.0, 4.0] {
            let mut config = RegistrationConfig::new(0.2 * mult, 0.8);
            config.max_iters = 60;
            let result = register(&template, &target, &metric, &config).unwrap();
            kinetics.push(result.diagnostics.trace.last().unwrap().kinetic);
        }
        assert!(kinetics[0] >= kinetics[1] - 1e-12);
        assert!(kinetics[1] >= kinetics[2] - 1e-12);
    }

    #[test]
    fn converged_run_has_small_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let template = small_varifold(&mut rng, 2);
        let target_pos: Vec<[f64; 3]> = template
            .family()
            .positions()
            .iter()
            .map(|p| [p[0] + 0.05, p[1], 0.0])
            .collect();
        let target = template.deform(&target_pos).unwrap();
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.5), FeatureKernel::Identity);
        let mut config = RegistrationConfig::new(0.3, 0.8);
        config.max_iters = 400;
        config.tol = 1e-12;
        let zero = ControlTrajectory::zeros(config.nt, template.family().n_vertices());
        let g0 = gradient(&zero, &template, &target, &metric, &config).unwrap();
        let result = register(&template, &target, &metric, &config).unwrap();
        let g1 = gradient(&result.control, &template, &target, &metric, &config).unwrap();
        let norm = |g: &Vec<Vec<[f64; 3]>>| Flat::dot(g, g).sqrt();
        assert!(norm(&g1) < 1e-3 * norm(&g0).max(1e-30));
    }

    #[test]
    fn lbfgs_option_also_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let template = small_varifold(&mut rng, 2);
        let target_pos: Vec<[f64; 3]> = template
            .family()
            .positions()
            .iter()
            .map(|p| [p[0] * 1.15, p[1] * 1.1, 0.0])
            .collect();
        let target = template.deform(&target_pos).unwrap();
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.4), FeatureKernel::Identity);
        let mut config = RegistrationConfig::new(0.3, 0.8);
        config.method = OptMethod::Lbfgs;
        config.max_iters = 60;
        let result = register(&template, &target, &metric, &config).unwrap();
        for w in result.diagnostics.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
        assert!(
            result.diagnostics.final_sqdist < result.diagnostics.initial_sqdist * 0.5
        );
    }

    #[test]
    fn transported_vertices_reproduce_the_state_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 9;
        let z0: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let a = random_controls(&mut rng, 6, n, 0.4);
        let kv = FlowKernel::gaussian(0.7);
        let traj = flow_forward(&a, &z0, &kv).unwrap();
        let transported = transport_points(&a, &kv, &z0, &z0).unwrap();
        for (t, e) in transported.iter().zip(traj.terminal()) {
            for k in 0..3 {
                assert!((t[k] - e[k]).abs() < 1e-10);
            }
        }

        // Zero controls: identity on any probe set.
        let probes: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0])
            .collect();
        let zero = ControlTrajectory::zeros(6, n);
        let moved = transport_points(&zero, &kv, &z0, &probes).unwrap();
        assert_eq!(moved, probes);
    }

    #[test]
    fn geodesic_shooting_conserves_the_hamiltonian() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 8;
        let z0: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect();
        let p0: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), 0.0])
            .collect();
        let kv = FlowKernel::gaussian(0.6);
        let nt = 50;
        let (ztraj, ptraj) = geodesic_shoot(&z0, &p0, &kv, nt).unwrap();
        let h_at = |k: usize| {
            let a: Vec<[f64; 3]> = ptraj.p[k].iter().map(|v| geom::scale(*v, 0.5)).collect();
            hamiltonian(&ptraj.p[k], &ztraj.z[k], &a, &kv)
        };
        let h0 = h_at(0);
        for k in 0..=nt {
            assert!(
                (h_at(k) - h0).abs() < 1e-3 * h0.abs(),
                "drift at step {k}: {} vs {h0}",
                h_at(k)
            );
        }
    }
}
