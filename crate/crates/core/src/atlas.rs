//! Cross-scale atlasing: imputing fine-scale feature parameters per atlas
//! label by box-constrained quadratic programming, alternated with
//! diffeomorphic registration of the imputed atlas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::AtlasError;
use crate::geom::Point;
use crate::kernels::{FeatureKernel, KernelMetric};
use crate::lddmm::{
    flow_forward, register_with_init, ControlTrajectory, RegisterResult, RegistrationConfig,
};
use crate::mesh::SimplicialFamily;
use crate::scalar::{fl, Scalar};
use crate::varifold::{FeatureDistribution, FeatureSpace, MeshVarifold};

/// A coarse labeled atlas: a mesh with a label distribution per simplex and
/// box constraints on the imputed densities.
#[derive(Clone, Debug)]
pub struct AtlasVarifold<T: Scalar> {
    family: SimplicialFamily<T>,
    labels: Vec<String>,
    /// Per simplex, a probability over the atlas labels.
    zeta: Vec<Vec<T>>,
    alpha_min: Vec<T>,
    alpha_max: Vec<T>,
    /// Optional separately-estimated densities, only consulted by the
    /// literal assembly weighting.
    alpha: Option<Vec<T>>,
}

impl<T: Scalar> AtlasVarifold<T> {
    /// Bounds default to `[0, +inf)` per simplex.
    pub fn new(
        family: SimplicialFamily<T>,
        labels: Vec<String>,
        zeta: Vec<Vec<T>>,
    ) -> Result<Self, AtlasError> {
        let n = family.n_simplices();
        if zeta.len() != n || zeta.iter().any(|row| row.len() != labels.len()) {
            return Err(AtlasError::ModeMismatch(format!(
                "need {n} label rows of width {}",
                labels.len()
            )));
        }
        Ok(Self {
            family,
            labels,
            zeta,
            alpha_min: vec![T::zero(); n],
            alpha_max: vec![T::infinity(); n],
            alpha: None,
        })
    }

    pub fn with_bounds(mut self, alpha_min: Vec<T>, alpha_max: Vec<T>) -> Result<Self, AtlasError> {
        let n = self.family.n_simplices();
        if alpha_min.len() != n || alpha_max.len() != n {
            return Err(AtlasError::ModeMismatch("bound lengths".into()));
        }
        for (c, (lo, hi)) in alpha_min.iter().zip(&alpha_max).enumerate() {
            if !(*lo >= T::zero() && lo <= hi) {
                return Err(AtlasError::ModeMismatch(format!(
                    "bounds on simplex {c} must satisfy 0 <= min <= max"
                )));
            }
        }
        self.alpha_min = alpha_min;
        self.alpha_max = alpha_max;
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: Vec<T>) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn family(&self) -> &SimplicialFamily<T> {
        &self.family
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn zeta(&self) -> &[Vec<T>] {
        &self.zeta
    }

    pub fn bounds(&self) -> (&[T], &[T]) {
        (&self.alpha_min, &self.alpha_max)
    }
}

/// Per-label feature parameters: `theta[l]` is a nonnegative vector over the
/// fine feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelParameters<T> {
    pub theta: Vec<Vec<T>>,
}

/// Which special-case reduction the QP encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlasMode {
    /// Fine features are cell-type labels; identity feature kernel.
    CellType,
    /// Fine features are gene-count vectors; Euclidean feature kernel, which
    /// identifies each law with its mean expression.
    GeneCount,
}

/// The assembled quadratic program `min theta^T A theta - 2 b . theta`
/// subject to nonnegativity and per-simplex density bands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpProblem<T> {
    /// Label-by-label Gram matrix, shared across features.
    pub a: Vec<Vec<T>>,
    /// Right-hand side per label and feature.
    pub b: Vec<Vec<T>>,
    /// Constraint rows: per simplex, the label distribution.
    pub zeta_rows: Vec<Vec<T>>,
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn n_labels(&self) -> usize {
        self.a.len()
    }

    pub fn n_features(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    /// `sum_{l0,l1,f} A theta theta - 2 sum_{l,f} b theta`.
    pub fn objective(&self, theta: &LabelParameters<T>) -> T {
        let nl = self.n_labels();
        let nf = self.n_features();
        let mut phi = T::zero();
        for f in 0..nf {
            for l0 in 0..nl {
                let mut at = T::zero();
                for l1 in 0..nl {
                    at = at + self.a[l0][l1] * theta.theta[l1][f];
                }
                phi = phi + theta.theta[l0][f] * at
                    - fl::<T>(2.0) * self.b[l0][f] * theta.theta[l0][f];
            }
        }
        phi
    }
}

/// Solver settings for `solve_qp`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QpSettings<T> {
    pub max_iters: usize,
    /// Absolute bound on the projected-gradient (KKT) residual.
    pub tol: T,
}

impl<T: Scalar> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            tol: fl(1e-9),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpSolution<T> {
    pub theta: LabelParameters<T>,
    pub objective: T,
    pub kkt_residual: T,
    pub iterations: usize,
}

/// Varifold representation of the atlas under the parameters `theta`:
/// imputed density `alpha_c = sum_l zeta_c(l) w_theta_l` and the mixture
/// feature law, normalized per simplex.
pub fn imputed_varifold<T: Scalar>(
    atlas: &AtlasVarifold<T>,
    theta: &LabelParameters<T>,
    fine_space: &FeatureSpace,
) -> Result<MeshVarifold<T>, AtlasError> {
    let nl = atlas.labels.len();
    if theta.theta.len() != nl || theta.theta.iter().any(|t| t.len() != fine_space.len()) {
        return Err(AtlasError::ModeMismatch(
            "theta shape does not match labels x features".into(),
        ));
    }
    let totals: Vec<T> = theta
        .theta
        .iter()
        .map(|t| t.iter().copied().sum())
        .collect();
    let mut alpha = Vec::with_capacity(atlas.family.n_simplices());
    let mut zeta = Vec::with_capacity(atlas.family.n_simplices());
    for (c, row) in atlas.zeta.iter().enumerate() {
        let a_c: T = row.iter().zip(&totals).map(|(&z, &w)| z * w).sum();
        if a_c <= T::zero() {
            return Err(AtlasError::ZeroDensity(c));
        }
        alpha.push(a_c);
        match fine_space {
            FeatureSpace::Categorical { labels } => {
                let mut weights = vec![T::zero(); labels.len()];
                for (l, &z) in row.iter().enumerate() {
                    for (w, &t) in weights.iter_mut().zip(&theta.theta[l]) {
                        *w = *w + z * t / a_c;
                    }
                }
                zeta.push(FeatureDistribution::Discrete { weights });
            }
            FeatureSpace::CountVector { .. } => {
                let mut components = Vec::new();
                for (l, &z) in row.iter().enumerate() {
                    let w = z * totals[l] / a_c;
                    if w > T::zero() {
                        let eta: Vec<T> =
                            theta.theta[l].iter().map(|&t| t / totals[l]).collect();
                        components.push((w, eta));
                    }
                }
                zeta.push(FeatureDistribution::VectorMixture { components });
            }
        }
    }
    MeshVarifold::new(atlas.family.clone(), alpha, zeta, fine_space.clone())
        .map_err(AtlasError::from)
}

fn target_feature_rows<T: Scalar>(
    target: &MeshVarifold<T>,
    mode: AtlasMode,
) -> Result<Vec<Vec<T>>, AtlasError> {
    match mode {
        AtlasMode::CellType => {
            if !matches!(target.feature_space(), FeatureSpace::Categorical { .. }) {
                return Err(AtlasError::ModeMismatch(
                    "cell-type mode needs a categorical target".into(),
                ));
            }
            target
                .zeta()
                .iter()
                .enumerate()
                .map(|(c, z)| match z {
                    FeatureDistribution::Discrete { weights } => Ok(weights.clone()),
                    _ => Err(AtlasError::ModeMismatch(format!(
                        "target simplex {c} does not carry a discrete label law"
                    ))),
                })
                .collect()
        }
        AtlasMode::GeneCount => {
            if !matches!(target.feature_space(), FeatureSpace::CountVector { .. }) {
                return Err(AtlasError::ModeMismatch(
                    "gene-count mode needs a count-vector target".into(),
                ));
            }
            target
                .zeta()
                .iter()
                .enumerate()
                .map(|(c, z)| {
                    z.mean_vector().ok_or_else(|| {
                        AtlasError::ModeMismatch(format!(
                            "target simplex {c} does not carry a vector law"
                        ))
                    })
                })
                .collect()
        }
    }
}

fn check_mode_kernel<T: Scalar>(metric: &KernelMetric<T>, mode: AtlasMode) -> Result<(), AtlasError> {
    let ok = match mode {
        AtlasMode::CellType => matches!(metric.k2, FeatureKernel::Identity),
        AtlasMode::GeneCount => matches!(metric.k2, FeatureKernel::EuclideanDot),
    };
    if ok {
        Ok(())
    } else {
        Err(AtlasError::ModeMismatch(
            "feature kernel does not match the atlasing mode (identity for \
             cell types, euclidean for gene counts)"
                .into(),
        ))
    }
}

/// Builds the QP for the current atlas geometry.
///
/// `positions` are the (possibly deformed) atlas vertex positions. The atlas
/// side enters with unit density by default; `literal_alpha` switches to
/// weighting by the atlas's stored densities.
pub fn assemble_qp<T: Scalar>(
    atlas: &AtlasVarifold<T>,
    positions: &[Point<T>],
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    mode: AtlasMode,
    literal_alpha: bool,
) -> Result<QpProblem<T>, AtlasError> {
    check_mode_kernel(metric, mode)?;
    let family = atlas
        .family
        .with_positions(positions.to_vec())
        .map_err(|e| AtlasError::ModeMismatch(e.to_string()))?;
    let nc = family.n_simplices();
    let nl = atlas.labels.len();
    let feat = target_feature_rows(target, mode)?;
    let nf = target.feature_space().len();

    let alpha_w: Vec<T> = match (literal_alpha, &atlas.alpha) {
        (false, _) => vec![T::one(); nc],
        (true, Some(alpha)) => alpha.clone(),
        (true, None) => {
            return Err(AtlasError::ModeMismatch(
                "literal weighting requested but the atlas carries no densities".into(),
            ))
        }
    };
    let w: Vec<T> = (0..nc)
        .map(|c| alpha_w[c] * family.simplex_volume(c))
        .collect();
    let m: Vec<Point<T>> = (0..nc).map(|c| family.simplex_center(c)).collect();

    let k1 = &metric.k1;
    let cutoff = if metric.cutoff {
        let r = fl::<T>(6.0) * k1.sigma;
        Some(r * r)
    } else {
        None
    };
    let k1_eval = |x: Point<T>, y: Point<T>| -> T {
        if let Some(r2) = cutoff {
            if crate::geom::dist2(x, y) > r2 {
                return T::zero();
            }
        }
        k1.eval(x, y)
    };

    // A[l0][l1] = sum_{c0,c1} w_c0 w_c1 zeta_c0(l0) zeta_c1(l1) K1(m_c0, m_c1)
    let rows: Vec<Vec<Vec<T>>> = (0..nc)
        .into_par_iter()
        .map(|c0| {
            let mut acc = vec![vec![T::zero(); nl]; nl];
            for c1 in 0..nc {
                let s = w[c0] * w[c1] * k1_eval(m[c0], m[c1]);
                if s == T::zero() {
                    continue;
                }
                for l0 in 0..nl {
                    let sz = s * atlas.zeta[c0][l0];
                    for l1 in 0..nl {
                        acc[l0][l1] = acc[l0][l1] + sz * atlas.zeta[c1][l1];
                    }
                }
            }
            acc
        })
        .collect();
    let mut a = vec![vec![T::zero(); nl]; nl];
    for acc in rows {
        for l0 in 0..nl {
            for l1 in 0..nl {
                a[l0][l1] = a[l0][l1] + acc[l0][l1];
            }
        }
    }
    // Symmetrize away roundoff.
    for l0 in 0..nl {
        for l1 in 0..l0 {
            let v = (a[l0][l1] + a[l1][l0]) / fl::<T>(2.0);
            a[l0][l1] = v;
            a[l1][l0] = v;
        }
    }

    // t_c(f) = sum_{c'} alpha'_{c'} |gamma'_{c'}| K1(m_c, m'_{c'}) feat_{c'}(f)
    let tw: Vec<T> = (0..target.n_simplices())
        .map(|cp| target.alpha()[cp] * target.family().simplex_volume(cp))
        .collect();
    let tm: Vec<Point<T>> = (0..target.n_simplices())
        .map(|cp| target.family().simplex_center(cp))
        .collect();
    let t_rows: Vec<Vec<T>> = (0..nc)
        .into_par_iter()
        .map(|c| {
            let mut t = vec![T::zero(); nf];
            for cp in 0..tw.len() {
                let s = tw[cp] * k1_eval(m[c], tm[cp]);
                if s == T::zero() {
                    continue;
                }
                for (tf, ff) in t.iter_mut().zip(&feat[cp]) {
                    *tf = *tf + s * *ff;
                }
            }
            t
        })
        .collect();
    let mut b = vec![vec![T::zero(); nf]; nl];
    for c in 0..nc {
        for l in 0..nl {
            let s = w[c] * atlas.zeta[c][l];
            for f in 0..nf {
                b[l][f] = b[l][f] + s * t_rows[c][f];
            }
        }
    }

    Ok(QpProblem {
        a,
        b,
        zeta_rows: atlas.zeta.clone(),
        lo: atlas.alpha_min.clone(),
        hi: atlas.alpha_max.clone(),
    })
}

/// Dykstra's alternating projection onto the intersection of the
/// nonnegativity box and the per-simplex density slabs. Operates on the
/// flattened `theta` (label-major).
struct PolytopeProjector<'a, T: Scalar> {
    qp: &'a QpProblem<T>,
    /// Squared norms of the slab normals.
    n2: Vec<T>,
    nf: usize,
}

impl<'a, T: Scalar> PolytopeProjector<'a, T> {
    fn new(qp: &'a QpProblem<T>) -> Self {
        let nf = qp.n_features();
        let n2 = qp
            .zeta_rows
            .iter()
            .map(|row| {
                let s: T = row.iter().map(|&z| z * z).sum();
                s * fl::<T>(nf as f64)
            })
            .collect();
        Self { qp, n2, nf }
    }

    fn slab_value(&self, c: usize, x: &[T]) -> T {
        let mut v = T::zero();
        for (l, &z) in self.qp.zeta_rows[c].iter().enumerate() {
            if z != T::zero() {
                let mut s = T::zero();
                for f in 0..self.nf {
                    s = s + x[l * self.nf + f];
                }
                v = v + z * s;
            }
        }
        v
    }

    fn project_slab(&self, c: usize, x: &mut [T]) {
        if self.n2[c] <= T::zero() {
            return;
        }
        let v = self.slab_value(c, x);
        let t = v.max(self.qp.lo[c]).min(self.qp.hi[c]);
        if t == v {
            return;
        }
        let coef = (v - t) / self.n2[c];
        for (l, &z) in self.qp.zeta_rows[c].iter().enumerate() {
            if z != T::zero() {
                for f in 0..self.nf {
                    x[l * self.nf + f] = x[l * self.nf + f] - coef * z;
                }
            }
        }
    }

    /// Largest relative violation of box or slab constraints at `x`.
    fn violation(&self, x: &[T]) -> (T, Vec<usize>) {
        let mut worst = T::zero();
        let mut offenders = Vec::new();
        for &v in x.iter() {
            worst = worst.max(-v);
        }
        for c in 0..self.qp.zeta_rows.len() {
            let v = self.slab_value(c, x);
            let scale = T::one().max(self.qp.lo[c].abs()).max(if self.qp.hi[c].is_finite() {
                self.qp.hi[c].abs()
            } else {
                T::one()
            });
            let gap = (self.qp.lo[c] - v).max(v - self.qp.hi[c]).max(T::zero()) / scale;
            if gap > fl(1e-8) {
                offenders.push(c);
            }
            worst = worst.max(gap);
        }
        (worst, offenders)
    }

    fn project(&self, x: &mut Vec<T>) {
        let n_sets = 1 + self.qp.zeta_rows.len();
        let dim = x.len();
        let mut corrections = vec![vec![T::zero(); dim]; n_sets];
        let mut prev = x.clone();
        for _sweep in 0..2000 {
            for (set, q) in corrections.iter_mut().enumerate() {
                for (xi, qi) in x.iter_mut().zip(q.iter()) {
                    *xi = *xi + *qi;
                }
                let before = x.clone();
                if set == 0 {
                    for xi in x.iter_mut() {
                        *xi = xi.max(T::zero());
                    }
                } else {
                    self.project_slab(set - 1, x);
                }
                for ((qi, bi), xi) in q.iter_mut().zip(&before).zip(x.iter()) {
                    *qi = *bi - *xi;
                }
            }
            let mut change = T::zero();
            let mut scale = T::zero();
            for (a, b) in x.iter().zip(&prev) {
                change = change + (*a - *b) * (*a - *b);
                scale = scale + *a * *a;
            }
            if change <= fl::<T>(1e-26) * scale.max(T::one()) {
                break;
            }
            prev.clone_from(x);
        }
    }
}

fn unflatten<T: Scalar>(x: &[T], nl: usize, nf: usize) -> LabelParameters<T> {
    LabelParameters {
        theta: (0..nl).map(|l| x[l * nf..(l + 1) * nf].to_vec()).collect(),
    }
}

/// Largest eigenvalue of the label Gram matrix by power iteration.
fn lambda_max<T: Scalar>(a: &[Vec<T>]) -> T {
    let n = a.len();
    let mut v = vec![T::one(); n];
    let mut lam = T::zero();
    for _ in 0..100 {
        let mut av = vec![T::zero(); n];
        for i in 0..n {
            for j in 0..n {
                av[i] = av[i] + a[i][j] * v[j];
            }
        }
        let norm: T = av.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm <= T::zero() {
            return T::zero();
        }
        lam = norm;
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = *ai / norm;
        }
    }
    lam
}

/// Accelerated projected gradient on the QP, with Dykstra projections onto
/// the constraint polytope. Returns the minimizer with a KKT report.
pub fn solve_qp<T: Scalar>(
    qp: &QpProblem<T>,
    settings: &QpSettings<T>,
) -> Result<QpSolution<T>, AtlasError> {
    let nl = qp.n_labels();
    let nf = qp.n_features();
    let dim = nl * nf;
    let projector = PolytopeProjector::new(qp);

    // Feasibility probe from the origin.
    let mut x = vec![T::zero(); dim];
    projector.project(&mut x);
    let (violation, offenders) = projector.violation(&x);
    if violation > fl(1e-6) {
        return Err(AtlasError::Infeasible {
            violation: violation.to_f64().unwrap_or(f64::NAN),
            constraints: offenders,
        });
    }

    let lam = lambda_max(&qp.a);
    let lipschitz = (fl::<T>(2.0) * lam).max(fl(1e-30));
    let step = T::one() / (lipschitz * fl::<T>(1.01));

    let grad = |x: &[T]| -> Vec<T> {
        let mut g = vec![T::zero(); dim];
        for f in 0..nf {
            for l0 in 0..nl {
                let mut at = T::zero();
                for l1 in 0..nl {
                    at = at + qp.a[l0][l1] * x[l1 * nf + f];
                }
                g[l0 * nf + f] = fl::<T>(2.0) * (at - qp.b[l0][f]);
            }
        }
        g
    };
    let objective = |x: &[T]| -> T { qp.objective(&unflatten(x, nl, nf)) };

    let kkt = |x: &[T], g: &[T]| -> T {
        let mut probe: Vec<T> = x.iter().zip(g).map(|(&xi, &gi)| xi - step * gi).collect();
        projector.project(&mut probe);
        let mut r = T::zero();
        for (xi, pi) in x.iter().zip(&probe) {
            let d = (*xi - *pi) / step;
            r = r + d * d;
        }
        r.sqrt()
    };

    // FISTA with gradient restarts.
    let mut y = x.clone();
    let mut t_acc = T::one();
    let mut best = x.clone();
    let mut best_obj = objective(&x);
    let mut residual = T::infinity();
    let mut iterations = 0;
    for iter in 0..settings.max_iters {
        iterations = iter + 1;
        let gy = grad(&y);
        let mut next: Vec<T> = y.iter().zip(&gy).map(|(&yi, &gi)| yi - step * gi).collect();
        projector.project(&mut next);

        // Restart the momentum when it points against descent.
        let mut momentum_ok = T::zero();
        for ((ni, xi), gi) in next.iter().zip(&x).zip(&gy) {
            momentum_ok = momentum_ok + *gi * (*ni - *xi);
        }
        if momentum_ok > T::zero() {
            t_acc = T::one();
            y = x.clone();
            continue;
        }

        let t_next = (T::one() + (T::one() + fl::<T>(4.0) * t_acc * t_acc).sqrt()) / fl(2.0);
        let beta = (t_acc - T::one()) / t_next;
        y = next
            .iter()
            .zip(&x)
            .map(|(&ni, &xi)| ni + beta * (ni - xi))
            .collect();
        t_acc = t_next;
        x = next;

        let obj = objective(&x);
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&x);
        }

        if iter % 10 == 0 || iter + 1 == settings.max_iters {
            let gx = grad(&x);
            residual = kkt(&x, &gx);
            if residual < settings.tol {
                best.clone_from(&x);
                best_obj = obj;
                break;
            }
        }
    }

    if residual >= settings.tol {
        let gb = grad(&best);
        residual = kkt(&best, &gb);
        if residual >= settings.tol {
            return Err(AtlasError::MaxIterations {
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    Ok(QpSolution {
        theta: unflatten(&best, nl, nf),
        objective: best_obj,
        kkt_residual: residual,
        iterations,
    })
}

/// Settings for the alternating minimization.
#[derive(Clone, Debug)]
pub struct AtlasConfig<T> {
    pub registration: RegistrationConfig<T>,
    pub qp: QpSettings<T>,
    pub rounds: usize,
    pub mode: AtlasMode,
    pub literal_alpha: bool,
}

#[derive(Clone, Debug)]
pub struct AtlasResult<T: Scalar> {
    pub theta: LabelParameters<T>,
    pub registration: RegisterResult<T>,
    /// Full objective (kinetic + weighted attachment) after each round.
    pub objective_trace: Vec<T>,
    pub qp_residual: T,
}

/// Alternates the QP parameter estimate with registration of the imputed
/// atlas, warm-starting the momenta across rounds.
pub fn alternate_minimize<T: Scalar>(
    atlas: &AtlasVarifold<T>,
    target: &MeshVarifold<T>,
    metric: &KernelMetric<T>,
    config: &AtlasConfig<T>,
) -> Result<AtlasResult<T>, AtlasError> {
    assert!(config.rounds >= 1);
    let kv = config.registration.flow_kernel();
    let mut control = ControlTrajectory::zeros(config.registration.nt, atlas.family.n_vertices());
    let mut trace = Vec::with_capacity(config.rounds);
    let mut theta = None;
    let mut registration = None;
    let mut qp_residual = T::zero();

    for _ in 0..config.rounds {
        let flowed = flow_forward(&control, atlas.family.positions(), &kv)?;
        let qp = assemble_qp(
            atlas,
            flowed.terminal(),
            target,
            metric,
            config.mode,
            config.literal_alpha,
        )?;
        let sol = solve_qp(&qp, &config.qp)?;
        qp_residual = sol.kkt_residual;
        let imputed = imputed_varifold(atlas, &sol.theta, target.feature_space())?;
        let reg = register_with_init(
            &imputed,
            target,
            metric,
            &config.registration,
            control.clone(),
        )?;
        control = reg.control.clone();
        trace.push(reg.diagnostics.trace.last().unwrap().objective);
        theta = Some(sol.theta);
        registration = Some(reg);
    }

    Ok(AtlasResult {
        theta: theta.expect("at least one round"),
        registration: registration.expect("at least one round"),
        objective_trace: trace,
        qp_residual,
    })
}
