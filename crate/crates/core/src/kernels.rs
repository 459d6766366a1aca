//! Spatial and feature kernels, the varifold inner product they induce, and
//! the gradient of the squared kernel distance with respect to vertex
//! positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::geom::{self, Point};
use crate::scalar::{fl, Scalar};
use crate::varifold::{FeatureDistribution, MeshVarifold};

/// Work unit for the pairwise kernel sums.
const CHUNK: usize = 512;

/// Gaussian spatial kernel `exp(-|x-y|^2 / (2 sigma^2))`, so `K1(x,x) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernel<T> {
    pub sigma: T,
}

impl<T: Scalar> SpatialKernel<T> {
    pub fn gaussian(sigma: T) -> Self {
        assert!(sigma > T::zero(), "kernel width must be positive");
        Self { sigma }
    }

    #[inline]
    pub fn eval(&self, x: Point<T>, y: Point<T>) -> T {
        let two = fl::<T>(2.0);
        (-geom::dist2(x, y) / (two * self.sigma * self.sigma)).exp()
    }

    /// Gradient in the first argument.
    #[inline]
    pub fn grad1(&self, x: Point<T>, y: Point<T>) -> Point<T> {
        let k = self.eval(x, y);
        geom::scale(geom::sub(x, y), -k / (self.sigma * self.sigma))
    }
}

/// Kernel on the feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKernel<T> {
    /// Kronecker delta on categorical labels.
    Identity,
    /// Euclidean dot product on count vectors.
    EuclideanDot,
    /// `v . v' / (sigma^2 + |v - v'|^2)` on count vectors.
    CauchyProduct { sigma: T },
    /// Applies the inner vector kernel to `log(1 + v)`.
    LogWrapped { inner: Box<FeatureKernel<T>> },
}

#[derive(Clone, Copy, Debug)]
enum VectorKernel<T> {
    Euclidean,
    Cauchy { sigma: T },
}

impl<T: Scalar> VectorKernel<T> {
    #[inline]
    fn eval(&self, a: &[T], b: &[T]) -> T {
        let mut dot = T::zero();
        match self {
            VectorKernel::Euclidean => {
                for (&x, &y) in a.iter().zip(b) {
                    dot = dot + x * y;
                }
                dot
            }
            VectorKernel::Cauchy { sigma } => {
                let mut d2 = T::zero();
                for (&x, &y) in a.iter().zip(b) {
                    dot = dot + x * y;
                    let d = x - y;
                    d2 = d2 + d * d;
                }
                dot / (*sigma * *sigma + d2)
            }
        }
    }
}

/// How a feature kernel pairs the per-simplex laws.
#[derive(Clone, Copy, Debug)]
enum PairMode<T> {
    Labels,
    Vectors { kernel: VectorKernel<T>, log_scale: bool },
}

fn pair_mode<T: Scalar>(k2: &FeatureKernel<T>) -> Result<PairMode<T>, KernelError> {
    match k2 {
        FeatureKernel::Identity => Ok(PairMode::Labels),
        FeatureKernel::EuclideanDot => Ok(PairMode::Vectors {
            kernel: VectorKernel::Euclidean,
            log_scale: false,
        }),
        FeatureKernel::CauchyProduct { sigma } => Ok(PairMode::Vectors {
            kernel: VectorKernel::Cauchy { sigma: *sigma },
            log_scale: false,
        }),
        FeatureKernel::LogWrapped { inner } => match pair_mode(inner.as_ref())? {
            PairMode::Vectors { kernel, .. } => Ok(PairMode::Vectors {
                kernel,
                log_scale: true,
            }),
            PairMode::Labels => Err(KernelError::KindMismatch(
                "log scale only applies to count-vector kernels".into(),
            )),
        },
    }
}

/// The product-kernel metric on varifolds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMetric<T> {
    pub k1: SpatialKernel<T>,
    pub k2: FeatureKernel<T>,
    /// Opt-in truncation of spatial kernel terms beyond `6 sigma1`.
    #[serde(default)]
    pub cutoff: bool,
}

impl<T: Scalar> KernelMetric<T> {
    pub fn new(k1: SpatialKernel<T>, k2: FeatureKernel<T>) -> Self {
        Self {
            k1,
            k2,
            cutoff: false,
        }
    }

    pub fn with_cutoff(mut self, cutoff: bool) -> Self {
        self.cutoff = cutoff;
        self
    }

    fn cutoff_dist2(&self) -> Option<T> {
        if self.cutoff {
            let r = fl::<T>(6.0) * self.k1.sigma;
            Some(r * r)
        } else {
            None
        }
    }
}

/// `<zeta, zeta'>` under the feature kernel: the double integral of `K2`.
pub fn k2_inner<T: Scalar>(
    k2: &FeatureKernel<T>,
    a: &FeatureDistribution<T>,
    b: &FeatureDistribution<T>,
) -> Result<T, KernelError> {
    let mode = pair_mode(k2)?;
    let pa = prepare_one(&mode, a)?;
    let pb = prepare_one(&mode, b)?;
    Ok(zeta_inner(&mode, &pa, &pb))
}

/// Per-simplex feature data, pre-transformed for the pair loop.
enum PreparedZeta<T> {
    Labels(Vec<T>),
    Components(Vec<(T, Vec<T>)>),
}

fn prepare_one<T: Scalar>(
    mode: &PairMode<T>,
    zeta: &FeatureDistribution<T>,
) -> Result<PreparedZeta<T>, KernelError> {
    match (mode, zeta) {
        (PairMode::Labels, FeatureDistribution::Discrete { weights }) => {
            Ok(PreparedZeta::Labels(weights.clone()))
        }
        (PairMode::Labels, _) => Err(KernelError::KindMismatch(
            "identity kernel needs discrete label laws".into(),
        )),
        (PairMode::Vectors { log_scale, .. }, FeatureDistribution::DiracVector { values }) => {
            Ok(PreparedZeta::Components(vec![(
                T::one(),
                transform(values, *log_scale),
            )]))
        }
        (PairMode::Vectors { log_scale, .. }, FeatureDistribution::VectorMixture { components }) => {
            Ok(PreparedZeta::Components(
                components
                    .iter()
                    .map(|(w, v)| (*w, transform(v, *log_scale)))
                    .collect(),
            ))
        }
        (PairMode::Vectors { .. }, FeatureDistribution::Discrete { .. }) => {
            Err(KernelError::KindMismatch(
                "vector kernel needs count-vector laws".into(),
            ))
        }
    }
}

fn transform<T: Scalar>(values: &[T], log_scale: bool) -> Vec<T> {
    if log_scale {
        values.iter().map(|&v| v.ln_1p()).collect()
    } else {
        values.to_vec()
    }
}

fn zeta_inner<T: Scalar>(mode: &PairMode<T>, a: &PreparedZeta<T>, b: &PreparedZeta<T>) -> T {
    match (mode, a, b) {
        (PairMode::Labels, PreparedZeta::Labels(wa), PreparedZeta::Labels(wb)) => {
            let mut s = T::zero();
            for (&x, &y) in wa.iter().zip(wb) {
                s = s + x * y;
            }
            s
        }
        (
            PairMode::Vectors { kernel, .. },
            PreparedZeta::Components(ca),
            PreparedZeta::Components(cb),
        ) => {
            let mut s = T::zero();
            for (wa, va) in ca {
                for (wb, vb) in cb {
                    s = s + *wa * *wb * kernel.eval(va, vb);
                }
            }
            s
        }
        _ => unreachable!("prepared against the same mode"),
    }
}

/// One varifold flattened into the arrays the pair loops consume.
struct Side<T: Scalar> {
    alpha: Vec<T>,
    volume: Vec<T>,
    /// `alpha_c * |gamma_c|`, signed.
    weight: Vec<T>,
    center: Vec<Point<T>>,
    zeta: Vec<PreparedZeta<T>>,
}

fn prepare_side<T: Scalar>(
    mode: &PairMode<T>,
    v: &MeshVarifold<T>,
) -> Result<Side<T>, KernelError> {
    let n = v.n_simplices();
    let mut side = Side {
        alpha: Vec::with_capacity(n),
        volume: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        center: Vec::with_capacity(n),
        zeta: Vec::with_capacity(n),
    };
    for c in 0..n {
        let vol = v.family().simplex_volume(c);
        side.alpha.push(v.alpha()[c]);
        side.volume.push(vol);
        side.weight.push(v.alpha()[c] * vol);
        side.center.push(v.family().simplex_center(c));
        side.zeta.push(prepare_one(mode, &v.zeta()[c])?);
    }
    Ok(side)
}

fn check_spaces<T: Scalar>(u: &MeshVarifold<T>, v: &MeshVarifold<T>) -> Result<(), KernelError> {
    if u.feature_space() != v.feature_space() {
        return Err(KernelError::FeatureSpaceMismatch);
    }
    Ok(())
}

fn inner_prepared<T: Scalar>(
    metric: &KernelMetric<T>,
    mode: &PairMode<T>,
    a: &Side<T>,
    b: &Side<T>,
) -> T {
    let na = a.weight.len();
    let cutoff = metric.cutoff_dist2();
    let two_s2 = fl::<T>(2.0) * metric.k1.sigma * metric.k1.sigma;
    let n_chunks = na.div_ceil(CHUNK);
    let partials: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = T::zero();
            for c in ci * CHUNK..((ci + 1) * CHUNK).min(na) {
                let wa = a.weight[c];
                if wa == T::zero() {
                    continue;
                }
                let ma = a.center[c];
                let za = &a.zeta[c];
                for cp in 0..b.weight.len() {
                    let d2 = geom::dist2(ma, b.center[cp]);
                    if let Some(r2) = cutoff {
                        if d2 > r2 {
                            continue;
                        }
                    }
                    let k1 = (-d2 / two_s2).exp();
                    acc = acc + wa * b.weight[cp] * k1 * zeta_inner(mode, za, &b.zeta[cp]);
                }
            }
            acc
        })
        .collect();
    // Fixed chunk boundaries and an ordered merge keep the sum deterministic.
    partials.into_iter().fold(T::zero(), |s, p| s + p)
}

/// The varifold inner product `<mu_u, mu_v>` under the product kernel.
pub fn varifold_inner<T: Scalar>(
    metric: &KernelMetric<T>,
    u: &MeshVarifold<T>,
    v: &MeshVarifold<T>,
) -> Result<T, KernelError> {
    check_spaces(u, v)?;
    let mode = pair_mode(&metric.k2)?;
    let a = prepare_side(&mode, u)?;
    let b = prepare_side(&mode, v)?;
    Ok(inner_prepared(metric, &mode, &a, &b))
}

/// Squared kernel distance `|mu_u - mu_v|^2`, clamped at zero.
pub fn varifold_sqdist<T: Scalar>(
    metric: &KernelMetric<T>,
    u: &MeshVarifold<T>,
    v: &MeshVarifold<T>,
) -> Result<T, KernelError> {
    let target = PreparedTarget::new(metric, v)?;
    sqdist_prepared(metric, u, &target)
}

/// Fixed comparison side with its self inner product cached; the registration
/// loop evaluates many deformed templates against a constant target.
pub struct PreparedTarget<T: Scalar> {
    mode: PairMode<T>,
    side: Side<T>,
    self_inner: T,
    space: crate::varifold::FeatureSpace,
}

impl<T: Scalar> PreparedTarget<T> {
    pub fn new(metric: &KernelMetric<T>, v: &MeshVarifold<T>) -> Result<Self, KernelError> {
        let mode = pair_mode(&metric.k2)?;
        let side = prepare_side(&mode, v)?;
        let self_inner = inner_prepared(metric, &mode, &side, &side);
        Ok(Self {
            mode,
            side,
            self_inner,
            space: v.feature_space().clone(),
        })
    }

    pub fn self_inner(&self) -> T {
        self.self_inner
    }
}

/// `|mu_u - mu_target|^2` against a prepared target, clamped at zero.
pub fn sqdist_prepared<T: Scalar>(
    metric: &KernelMetric<T>,
    u: &MeshVarifold<T>,
    target: &PreparedTarget<T>,
) -> Result<T, KernelError> {
    if u.feature_space() != &target.space {
        return Err(KernelError::FeatureSpaceMismatch);
    }
    let a = prepare_side(&target.mode, u)?;
    let uu = inner_prepared(metric, &target.mode, &a, &a);
    let uv = inner_prepared(metric, &target.mode, &a, &target.side);
    Ok((uu - fl::<T>(2.0) * uv + target.self_inner).max(T::zero()))
}

/// Gradient of `|mu_u - mu_target|^2` against a prepared target.
pub fn attachment_grad_prepared<T: Scalar>(
    metric: &KernelMetric<T>,
    u: &MeshVarifold<T>,
    target: &PreparedTarget<T>,
) -> Result<Vec<Point<T>>, KernelError> {
    if u.feature_space() != &target.space {
        return Err(KernelError::FeatureSpaceMismatch);
    }
    let a = prepare_side(&target.mode, u)?;
    let self_grad = inner_gradient(metric, &target.mode, u, &a, &a);
    let cross_grad = inner_gradient(metric, &target.mode, u, &a, &target.side);
    Ok(self_grad
        .into_iter()
        .zip(cross_grad)
        .map(|(s, c)| geom::scale(geom::sub(s, c), fl::<T>(2.0)))
        .collect())
}

/// Gradient over `u`'s vertices of `<mu_u(x), mu_other>`, the other side held
/// fixed: per pair, a kernel-derivative term through the simplex center and a
/// volume-derivative term through the face normals.
fn inner_gradient<T: Scalar>(
    metric: &KernelMetric<T>,
    mode: &PairMode<T>,
    u: &MeshVarifold<T>,
    a: &Side<T>,
    b: &Side<T>,
) -> Vec<Point<T>> {
    let family = u.family();
    let dim = family.dim();
    let n_vertices = family.n_vertices();
    let na = a.weight.len();
    let inv_dp1 = T::one() / fl::<T>((dim + 1) as f64);
    let inv_fact = T::one() / fl::<T>(if dim == 2 { 2.0 } else { 6.0 });
    let inv_s2 = T::one() / (metric.k1.sigma * metric.k1.sigma);
    let two_s2 = fl::<T>(2.0) * metric.k1.sigma * metric.k1.sigma;
    let cutoff = metric.cutoff_dist2();

    let normals: Vec<[Point<T>; 4]> = (0..na).map(|c| family.face_normals(c)).collect();

    let n_chunks = na.div_ceil(CHUNK);
    let partials: Vec<Vec<Point<T>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut grad = vec![geom::zero::<T>(); n_vertices];
            for c in ci * CHUNK..((ci + 1) * CHUNK).min(na) {
                let tuple = family.structure().simplex(c);
                let ma = a.center[c];
                let alpha = a.alpha[c];
                let vol = a.volume[c];
                // Sum over the other side first, then spread to vertices.
                let mut gsum = geom::zero::<T>();
                let mut nsum = T::zero();
                for cp in 0..b.weight.len() {
                    let d2 = geom::dist2(ma, b.center[cp]);
                    if let Some(r2) = cutoff {
                        if d2 > r2 {
                            continue;
                        }
                    }
                    let k1 = (-d2 / two_s2).exp();
                    let s = alpha * b.weight[cp] * zeta_inner(mode, &a.zeta[c], &b.zeta[cp]);
                    // grad1 K1 = -(ma - mb)/sigma^2 * k1
                    let g1 = geom::scale(geom::sub(ma, b.center[cp]), -k1 * inv_s2);
                    gsum = geom::axpy(gsum, s, g1);
                    nsum = nsum + s * k1;
                }
                let center_term = geom::scale(gsum, vol * inv_dp1);
                for (jpos, &vertex) in tuple.iter().enumerate() {
                    let mut g = geom::add(grad[vertex], center_term);
                    g = geom::axpy(g, nsum * inv_fact, normals[c][jpos]);
                    grad[vertex] = g;
                }
            }
            grad
        })
        .collect();

    let mut grad = vec![geom::zero::<T>(); n_vertices];
    for partial in partials {
        for (g, p) in grad.iter_mut().zip(partial) {
            *g = geom::add(*g, p);
        }
    }
    grad
}

/// Gradient of `|mu_u - mu_target|^2` with respect to `u`'s vertex positions.
pub fn attachment_grad<T: Scalar>(
    metric: &KernelMetric<T>,
    u: &MeshVarifold<T>,
    target: &MeshVarifold<T>,
) -> Result<Vec<Point<T>>, KernelError> {
    let prepared = PreparedTarget::new(metric, target)?;
    attachment_grad_prepared(metric, u, &prepared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_regular_mesh, Aabb, SimplicialFamily, SimplicialStructure};
    use crate::varifold::FeatureSpace;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn label_space(n: usize) -> FeatureSpace {
        FeatureSpace::Categorical {
            labels: (0..n).map(|i| format!("l{i}")).collect(),
        }
    }

    fn gene_space(n: usize) -> FeatureSpace {
        FeatureSpace::CountVector {
            gene_ids: (0..n).map(|i| format!("g{i}")).collect(),
        }
    }

    /// Random jittered-grid varifold for gradient and norm checks.
    fn random_varifold(
        rng: &mut ChaCha8Rng,
        dim: usize,
        categorical: bool,
    ) -> MeshVarifold<f64> {
        let bbox = if dim == 2 {
            Aabb::new([0.0, 0.0, 0.0], [2.0, 2.0, 0.0])
        } else {
            Aabb::new([0.0, 0.0, 0.0], [1.5, 1.5, 1.5])
        };
        let grid = build_regular_mesh(bbox, 0.75, dim).unwrap();
        let jitter = if dim == 2 { 0.12 } else { 0.06 };
        let jittered: Vec<[f64; 3]> = grid
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
        let family = grid.with_positions(jittered).unwrap();
        family.validate_orientation().unwrap();
        let n = family.n_simplices();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let (zeta, space) = if categorical {
            let zeta = (0..n)
                .map(|_| {
                    let w0: f64 = rng.gen_range(0.05..0.95);
                    FeatureDistribution::Discrete {
                        weights: vec![w0, 1.0 - w0],
                    }
                })
                .collect();
            (zeta, label_space(2))
        } else {
            let zeta = (0..n)
                .map(|_| FeatureDistribution::DiracVector {
                    values: vec![rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)],
                })
                .collect();
            (zeta, gene_space(2))
        };
        MeshVarifold::new(family, alpha, zeta, space).unwrap()
    }

    fn fd_gradient(
        metric: &KernelMetric<f64>,
        u: &MeshVarifold<f64>,
        target: &MeshVarifold<f64>,
        h: f64,
    ) -> Vec<[f64; 3]> {
        let dim = u.family().dim();
        let base = u.family().positions().to_vec();
        let mut grad = vec![[0.0; 3]; base.len()];
        for i in 0..base.len() {
            for k in 0..dim {
                let mut plus = base.clone();
                plus[i][k] += h;
                let mut minus = base.clone();
                minus[i][k] -= h;
                let fp = varifold_sqdist(metric, &u.deform(&plus).unwrap(), target).unwrap();
                let fm = varifold_sqdist(metric, &u.deform(&minus).unwrap(), target).unwrap();
                grad[i][k] = (fp - fm) / (2.0 * h);
            }
        }
        grad
    }

    fn rel_l2(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (x, y) in a.iter().zip(b) {
            for k in 0..3 {
                diff += (x[k] - y[k]).powi(2);
                norm += y[k].powi(2);
            }
        }
        (diff / norm.max(1e-300)).sqrt()
    }

    #[test]
    fn gaussian_at_coincident_points() {
        let k1 = SpatialKernel::gaussian(0.7);
        let x = [0.3, -0.2, 0.1];
        assert_eq!(k1.eval(x, x), 1.0);
        assert_eq!(k1.grad1(x, x), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_grad_antisymmetry_and_fd() {
        let k1: SpatialKernel<f64> = SpatialKernel::gaussian(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let g = k1.grad1(x, y);
            let gr = k1.grad1(y, x);
            for k in 0..3 {
                assert!((g[k] + gr[k]).abs() < 1e-14);
            }
            let h = 1e-6;
            for k in 0..3 {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let fd = (k1.eval(xp, y) - k1.eval(xm, y)) / (2.0 * h);
                assert!((g[k] - fd).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn identity_kernel_on_diracs() {
        let a = FeatureDistribution::Discrete {
            weights: vec![1.0, 0.0],
        };
        let b = FeatureDistribution::Discrete {
            weights: vec![0.0, 1.0],
        };
        let k2 = FeatureKernel::Identity;
        assert_eq!(k2_inner(&k2, &a, &a).unwrap(), 1.0);
        assert_eq!(k2_inner(&k2, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cauchy_kernel_by_hand() {
        let a: FeatureDistribution<f64> = FeatureDistribution::DiracVector {
            values: vec![1.0, 1.0],
        };
        let k2 = FeatureKernel::CauchyProduct { sigma: 1.0 };
        assert!((k2_inner(&k2, &a, &a).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn log_scale_applies_before_inner_kernel() {
        let a = FeatureDistribution::DiracVector {
            values: vec![std::f64::consts::E - 1.0],
        };
        let k2 = FeatureKernel::LogWrapped {
            inner: Box::new(FeatureKernel::EuclideanDot),
        };
        assert!((k2_inner(&k2, &a, &a).unwrap() - 1.0).abs() < 1e-14);
        let bad = FeatureKernel::LogWrapped {
            inner: Box::new(FeatureKernel::Identity),
        };
        assert!(k2_inner(&bad, &a, &a).is_err());
    }

    #[test]
    fn kind_mismatch_detected() {
        let discrete = FeatureDistribution::Discrete {
            weights: vec![1.0],
        };
        let dirac = FeatureDistribution::DiracVector { values: vec![1.0] };
        assert!(k2_inner(&FeatureKernel::Identity, &discrete, &dirac).is_err());
        assert!(k2_inner(&FeatureKernel::EuclideanDot, &discrete, &discrete).is_err());
    }

    fn single_simplex_varifold(
        shift: [f64; 2],
        alpha_over_vol: bool,
        weights: Vec<f64>,
    ) -> MeshVarifold<f64> {
        let structure = SimplicialStructure::new(2, 3, vec![vec![0, 1, 2]]).unwrap();
        let family = SimplicialFamily::new(
            structure,
            vec![
                [shift[0], shift[1], 0.0],
                [shift[0] + 1.0, shift[1], 0.0],
                [shift[0], shift[1] + 1.0, 0.0],
            ],
        )
        .unwrap();
        let alpha = if alpha_over_vol {
            vec![1.0 / family.simplex_volume(0)]
        } else {
            vec![1.0]
        };
        MeshVarifold::new(
            family,
            alpha,
            vec![FeatureDistribution::Discrete { weights }],
            label_space(2),
        )
        .unwrap()
    }

    #[test]
    fn single_dirac_inner_is_k1_times_k2() {
        let v = single_simplex_varifold([0.0, 0.0], true, vec![1.0, 0.0]);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.5), FeatureKernel::Identity);
        // alpha |gamma| = 1, so <v, v> = K1(m, m) K2(f, f) = 1.
        assert!((varifold_inner(&metric, &v, &v).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inner_is_bilinear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_varifold(&mut rng, 2, true);
        let v = random_varifold(&mut rng, 2, true);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.8), FeatureKernel::Identity);
        let base = varifold_inner(&metric, &u, &v).unwrap();
        let t = 3.25;
        let scaled = MeshVarifold::new(
            u.family().clone(),
            u.alpha().iter().map(|a| a * t).collect(),
            u.zeta().to_vec(),
            u.feature_space().clone(),
        )
        .unwrap();
        let got = varifold_inner(&metric, &scaled, &v).unwrap();
        assert!((got - t * base).abs() < 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn two_by_two_inner_matches_hand_expansion() {
        let bbox = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        let fam = build_regular_mesh(bbox, 1.0, 2).unwrap();
        let mk = |alpha: Vec<f64>, w: Vec<Vec<f64>>| {
            MeshVarifold::new(
                fam.clone(),
                alpha,
                w.into_iter()
                    .map(|weights| FeatureDistribution::Discrete { weights })
                    .collect(),
                label_space(2),
            )
            .unwrap()
        };
        let u = mk(vec![1.5, 0.5], vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let v = mk(vec![2.0, 1.0], vec![vec![0.25, 0.75], vec![0.0, 1.0]]);
        let k1 = SpatialKernel::gaussian(0.6);
        let metric = KernelMetric::new(k1, FeatureKernel::Identity);

        let mut hand = 0.0;
        for c in 0..2 {
            for cp in 0..2 {
                let wz = match (&u.zeta()[c], &v.zeta()[cp]) {
                    (
                        FeatureDistribution::Discrete { weights: a },
                        FeatureDistribution::Discrete { weights: b },
                    ) => a[0] * b[0] + a[1] * b[1],
                    _ => unreachable!(),
                };
                hand += u.alpha()[c]
                    * fam.simplex_volume(c)
                    * v.alpha()[cp]
                    * fam.simplex_volume(cp)
                    * k1.eval(fam.simplex_center(c), fam.simplex_center(cp))
                    * wz;
            }
        }
        let got = varifold_inner(&metric, &u, &v).unwrap();
        assert!((got - hand).abs() < 1e-14 * hand.abs().max(1.0));
    }

    #[test]
    fn sqdist_zero_symmetric_and_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = random_varifold(&mut rng, 2, true);
        let v = random_varifold(&mut rng, 2, true);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.5), FeatureKernel::Identity);

        let self_dist = varifold_sqdist(&metric, &u, &u).unwrap();
        let scale = varifold_inner(&metric, &u, &u).unwrap();
        assert!(self_dist.abs() <= 1e-9 * scale);

        let duv = varifold_sqdist(&metric, &u, &v).unwrap();
        let dvu = varifold_sqdist(&metric, &v, &u).unwrap();
        assert!((duv - dvu).abs() <= 1e-10 * duv.max(1.0));

        // Translate v far beyond the kernel range: distance approaches the
        // sum of the self inner products.
        let far: Vec<[f64; 3]> = v
            .family()
            .positions()
            .iter()
            .map(|p| [p[0] + 20.0, p[1], p[2]])
            .collect();
        let vfar = v.deform(&far).unwrap();
        let expected = varifold_inner(&metric, &u, &u).unwrap()
            + varifold_inner(&metric, &vfar, &vfar).unwrap();
        let got = varifold_sqdist(&metric, &u, &vfar).unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected);
    }

    #[test]
    fn gram_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vs: Vec<MeshVarifold<f64>> =
            (0..6).map(|_| random_varifold(&mut rng, 2, true)).collect();
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.7), FeatureKernel::Identity);
        let n = vs.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                gram[i][j] = varifold_inner(&metric, &vs[i], &vs[j]).unwrap();
            }
        }
        let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
        for i in 0..n {
            for j in 0..n {
                assert!((gram[i][j] - gram[j][i]).abs() <= 1e-10 * trace);
            }
        }
        // Shifted Cholesky: success means every eigenvalue is above the floor.
        let shift = 1e-8 * trace;
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = gram[i][j] + if i == j { shift } else { 0.0 };
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    assert!(s > 0.0, "eigenvalue below -1e-8 * trace");
                    l[i][j] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
    }

    #[test]
    fn attachment_grad_vanishes_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = random_varifold(&mut rng, 2, true);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.6), FeatureKernel::Identity);
        let grad = attachment_grad(&metric, &u, &u).unwrap();
        for g in grad {
            for k in 0..3 {
                assert!(g[k].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn far_translation_gradient_follows_cross_term() {
        // A single simplex far from the target: the self term has zero
        // gradient under translation, so the gradient is minus twice the
        // cross-term derivative, which points along grad1 K1.
        let u = single_simplex_varifold([4.0, 0.0], false, vec![1.0, 0.0]);
        let target = single_simplex_varifold([0.0, 0.0], false, vec![1.0, 0.0]);
        let metric = KernelMetric::new(SpatialKernel::gaussian(2.0), FeatureKernel::Identity);
        let grad = attachment_grad(&metric, &u, &target).unwrap();
        let total: [f64; 3] = grad.iter().fold([0.0; 3], |acc, g| geom::add(acc, *g));
        // Moving u further right increases the distance: positive x-gradient.
        assert!(total[0] > 0.0);
        assert!(total[0].abs() > 10.0 * total[1].abs());
    }

    #[test]
    fn attachment_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for dim in [2usize, 3] {
            for categorical in [true, false] {
                let u = random_varifold(&mut rng, dim, categorical);
                let target = random_varifold(&mut rng, dim, categorical);
                let metric = KernelMetric::new(
                    SpatialKernel::gaussian(0.8),
                    if categorical {
                        FeatureKernel::Identity
                    } else {
                        FeatureKernel::CauchyProduct { sigma: 1.0 }
                    },
                );
                let grad = attachment_grad(&metric, &u, &target).unwrap();
                let fd = fd_gradient(&metric, &u, &target, 1e-5);
                let err = rel_l2(&grad, &fd);
                assert!(err < 1e-5, "dim {dim} categorical {categorical}: {err}");
            }
        }
    }

    #[test]
    fn constant_kernel_isolates_volume_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = random_varifold(&mut rng, 2, true);
        let target = random_varifold(&mut rng, 2, true);
        // Sigma far beyond the domain diameter: K1 is 1 and grad1 K1 is 0.
        let metric = KernelMetric::new(SpatialKernel::gaussian(1e6 * 4.0), FeatureKernel::Identity);
        let grad = attachment_grad(&metric, &u, &target).unwrap();
        let fd = fd_gradient(&metric, &u, &target, 1e-5);
        assert!(rel_l2(&grad, &fd) < 1e-5);

        // Pure volume-derivative form, assembled independently from normals.
        let zdot = |a: &FeatureDistribution<f64>, b: &FeatureDistribution<f64>| match (a, b) {
            (
                FeatureDistribution::Discrete { weights: x },
                FeatureDistribution::Discrete { weights: y },
            ) => x[0] * y[0] + x[1] * y[1],
            _ => unreachable!(),
        };
        let mut manual = vec![[0.0; 3]; u.family().n_vertices()];
        for c in 0..u.n_simplices() {
            let tuple = u.family().structure().simplex(c).to_vec();
            let normals = u.family().face_normals(c);
            // d/dx_j |gamma_c| = n_{c,j} / d!
            let mut s = 0.0;
            for cp in 0..u.n_simplices() {
                s += u.alpha()[cp]
                    * u.family().simplex_volume(cp)
                    * zdot(&u.zeta()[c], &u.zeta()[cp]);
            }
            for cp in 0..target.n_simplices() {
                s -= target.alpha()[cp]
                    * target.family().simplex_volume(cp)
                    * zdot(&u.zeta()[c], &target.zeta()[cp]);
            }
            for (jpos, &vertex) in tuple.iter().enumerate() {
                manual[vertex] =
                    geom::axpy(manual[vertex], 2.0 * u.alpha()[c] * s / 2.0, normals[jpos]);
            }
        }
        assert!(rel_l2(&grad, &manual) < 1e-9);
    }

    #[test]
    fn cutoff_only_drops_negligible_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let u = random_varifold(&mut rng, 2, true);
        let v = random_varifold(&mut rng, 2, true);
        let metric = KernelMetric::new(SpatialKernel::gaussian(0.25), FeatureKernel::Identity);
        let full = varifold_inner(&metric, &u, &v).unwrap();
        let truncated = varifold_inner(&metric.clone().with_cutoff(true), &u, &v).unwrap();
        assert!((full - truncated).abs() <= 1e-7 * full.abs().max(1.0));
    }
}
