//! Semi-discrete mesh varifolds: per-simplex densities and feature laws,
//! built from point data, transported by vertex displacement.

use serde::{Deserialize, Serialize};

use crate::error::VarifoldError;
use crate::geom::Point;
use crate::mesh::SimplicialFamily;
use crate::scalar::Scalar;

/// The space the per-simplex feature laws live on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Finite label set (cell types, atlas regions).
    Categorical { labels: Vec<String> },
    /// Nonnegative count vectors indexed by a gene panel.
    CountVector { gene_ids: Vec<String> },
}

impl FeatureSpace {
    pub fn len(&self) -> usize {
        match self {
            FeatureSpace::Categorical { labels } => labels.len(),
            FeatureSpace::CountVector { gene_ids } => gene_ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        match self {
            FeatureSpace::Categorical { labels } => labels,
            FeatureSpace::CountVector { gene_ids } => gene_ids,
        }
    }
}

/// A probability law on the feature space attached to one simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDistribution<T> {
    /// Weights over a categorical label set, aligned with the space's labels.
    Discrete { weights: Vec<T> },
    /// Dirac measure at one count vector.
    DiracVector { values: Vec<T> },
    /// Finite mixture of Dirac measures on count vectors (weights sum to 1).
    /// This is the law of an imputed atlas simplex in gene-count mode.
    VectorMixture { components: Vec<(T, Vec<T>)> },
}

impl<T: Scalar> FeatureDistribution<T> {
    /// First moment for vector-valued laws; `None` for categorical ones.
    pub fn mean_vector(&self) -> Option<Vec<T>> {
        match self {
            FeatureDistribution::Discrete { .. } => None,
            FeatureDistribution::DiracVector { values } => Some(values.clone()),
            FeatureDistribution::VectorMixture { components } => {
                let n = components.first().map_or(0, |(_, v)| v.len());
                let mut mean = vec![T::zero(); n];
                for (w, v) in components {
                    for (m, x) in mean.iter_mut().zip(v) {
                        *m = *m + *w * *x;
                    }
                }
                Some(mean)
            }
        }
    }
}

/// Borrowed view of a single feature value, for pairing with test functions.
#[derive(Clone, Copy, Debug)]
pub enum FeatureRef<'a, T> {
    Label(usize),
    Vector(&'a [T]),
}

/// One input record: a location with either a gene-count vector or a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord<T> {
    pub position: Point<T>,
    pub payload: Payload<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload<T> {
    /// Count per gene, aligned with the `CountVector` panel.
    Counts(Vec<T>),
    /// Index into the `Categorical` label list.
    Label(usize),
}

/// How gene-count data turns into per-simplex densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Detected molecules per unit volume.
    CountDensity,
    /// Data points (e.g. cells) per unit volume.
    PointDensity,
}

/// A simplicial family with a density and a feature law per simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshVarifold<T: Scalar> {
    family: SimplicialFamily<T>,
    alpha: Vec<T>,
    zeta: Vec<FeatureDistribution<T>>,
    feature_space: FeatureSpace,
}

impl<T: Scalar> MeshVarifold<T> {
    pub fn new(
        family: SimplicialFamily<T>,
        alpha: Vec<T>,
        zeta: Vec<FeatureDistribution<T>>,
        feature_space: FeatureSpace,
    ) -> Result<Self, VarifoldError> {
        let n = family.n_simplices();
        if alpha.len() != n || zeta.len() != n {
            return Err(VarifoldError::PayloadMismatch(format!(
                "need {n} alpha/zeta entries, got {}/{}",
                alpha.len(),
                zeta.len()
            )));
        }
        Ok(Self {
            family,
            alpha,
            zeta,
            feature_space,
        })
    }

    pub fn family(&self) -> &SimplicialFamily<T> {
        &self.family
    }

    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    pub fn zeta(&self) -> &[FeatureDistribution<T>] {
        &self.zeta
    }

    pub fn feature_space(&self) -> &FeatureSpace {
        &self.feature_space
    }

    pub fn n_simplices(&self) -> usize {
        self.family.n_simplices()
    }

    /// Transports the varifold by moving its vertices: densities and feature
    /// laws carry over unchanged, volumes and centers follow the positions.
    pub fn deform(&self, new_positions: &[Point<T>]) -> Result<Self, VarifoldError> {
        if new_positions.len() != self.family.n_vertices() {
            return Err(VarifoldError::PositionCount {
                expected: self.family.n_vertices(),
                got: new_positions.len(),
            });
        }
        let family = self.family.with_positions(new_positions.to_vec())?;
        Ok(Self {
            family,
            alpha: self.alpha.clone(),
            zeta: self.zeta.clone(),
            feature_space: self.feature_space.clone(),
        })
    }

    /// Pairs the varifold with a space-feature function: the weighted sum
    /// over simplices of `alpha_c |gamma_c| E_zeta[F(m_c, .)]`.
    pub fn pair(&self, f: impl Fn(Point<T>, FeatureRef<'_, T>) -> T) -> T {
        let mut total = T::zero();
        for c in 0..self.n_simplices() {
            let w = self.alpha[c] * self.family.simplex_volume(c);
            let m = self.family.simplex_center(c);
            let expect = match &self.zeta[c] {
                FeatureDistribution::Discrete { weights } => weights
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| p * f(m, FeatureRef::Label(k)))
                    .sum(),
                FeatureDistribution::DiracVector { values } => f(m, FeatureRef::Vector(values)),
                FeatureDistribution::VectorMixture { components } => components
                    .iter()
                    .map(|(w, v)| *w * f(m, FeatureRef::Vector(v)))
                    .sum(),
            };
            total = total + w * expect;
        }
        total
    }

    /// Total measure mass `sum_c alpha_c |gamma_c|`.
    pub fn total_mass(&self) -> T {
        (0..self.n_simplices())
            .map(|c| self.alpha[c] * self.family.simplex_volume(c))
            .sum()
    }
}

fn counts_of<T: Scalar>(record: &PointRecord<T>, n_genes: usize) -> Result<&[T], VarifoldError> {
    match &record.payload {
        Payload::Counts(v) if v.len() == n_genes => Ok(v),
        Payload::Counts(v) => Err(VarifoldError::PayloadMismatch(format!(
            "count vector length {} does not match panel size {n_genes}",
            v.len()
        ))),
        Payload::Label(_) => Err(VarifoldError::PayloadMismatch(
            "expected gene counts, found a label".into(),
        )),
    }
}

fn assign_points<T: Scalar>(
    family: &SimplicialFamily<T>,
    points: &[PointRecord<T>],
) -> Vec<Option<usize>> {
    let locator = family.locator();
    points.iter().map(|p| locator.locate(p.position)).collect()
}

/// Gene-frequency varifold: `zeta_c` is the relative count frequency per gene
/// and `alpha_c` the count or point density, depending on `mode`.
pub fn from_gene_counts<T: Scalar>(
    points: &[PointRecord<T>],
    family: &SimplicialFamily<T>,
    feature_space: &FeatureSpace,
    mode: WeightMode,
) -> Result<MeshVarifold<T>, VarifoldError> {
    let genes = match feature_space {
        FeatureSpace::CountVector { gene_ids } => gene_ids.len(),
        _ => {
            return Err(VarifoldError::PayloadMismatch(
                "gene-count construction needs a count-vector feature space".into(),
            ))
        }
    };
    let n = family.n_simplices();
    let mut sums = vec![vec![T::zero(); genes]; n];
    let mut n_points = vec![0usize; n];
    for (record, a) in points.iter().zip(assign_points(family, points)) {
        let counts = counts_of(record, genes)?;
        if let Some(c) = a {
            for (s, &v) in sums[c].iter_mut().zip(counts) {
                *s = *s + v;
            }
            n_points[c] += 1;
        }
    }
    let mut alpha = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    for c in 0..n {
        let total: T = sums[c].iter().copied().sum();
        if total <= T::zero() {
            return Err(VarifoldError::EmptySimplex(c));
        }
        let volume = family.simplex_volume(c);
        alpha.push(match mode {
            WeightMode::CountDensity => total / volume,
            WeightMode::PointDensity => T::from_usize(n_points[c]).unwrap() / volume,
        });
        zeta.push(FeatureDistribution::Discrete {
            weights: sums[c].iter().map(|&s| s / total).collect(),
        });
    }
    MeshVarifold::new(family.clone(), alpha, zeta, feature_space.clone())
}

/// RNA-count varifold: `zeta_c` is a Dirac at the per-simplex mean count
/// vector and `alpha_c` the point density.
pub fn from_rna_counts<T: Scalar>(
    points: &[PointRecord<T>],
    family: &SimplicialFamily<T>,
    feature_space: &FeatureSpace,
) -> Result<MeshVarifold<T>, VarifoldError> {
    let genes = match feature_space {
        FeatureSpace::CountVector { gene_ids } => gene_ids.len(),
        _ => {
            return Err(VarifoldError::PayloadMismatch(
                "RNA-count construction needs a count-vector feature space".into(),
            ))
        }
    };
    let n = family.n_simplices();
    let mut sums = vec![vec![T::zero(); genes]; n];
    let mut n_points = vec![0usize; n];
    for (record, a) in points.iter().zip(assign_points(family, points)) {
        let counts = counts_of(record, genes)?;
        if let Some(c) = a {
            for (s, &v) in sums[c].iter_mut().zip(counts) {
                *s = *s + v;
            }
            n_points[c] += 1;
        }
    }
    let mut alpha = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    for c in 0..n {
        if n_points[c] == 0 {
            return Err(VarifoldError::EmptySimplex(c));
        }
        let count = T::from_usize(n_points[c]).unwrap();
        alpha.push(count / family.simplex_volume(c));
        zeta.push(FeatureDistribution::DiracVector {
            values: sums[c].iter().map(|&s| s / count).collect(),
        });
    }
    MeshVarifold::new(family.clone(), alpha, zeta, feature_space.clone())
}

/// Cell-label varifold: `zeta_c` is the label frequency among the points in
/// each simplex and `alpha_c` the point density.
pub fn from_cell_labels<T: Scalar>(
    points: &[PointRecord<T>],
    family: &SimplicialFamily<T>,
    feature_space: &FeatureSpace,
) -> Result<MeshVarifold<T>, VarifoldError> {
    let n_labels = match feature_space {
        FeatureSpace::Categorical { labels } => labels.len(),
        _ => {
            return Err(VarifoldError::PayloadMismatch(
                "label construction needs a categorical feature space".into(),
            ))
        }
    };
    let n = family.n_simplices();
    let mut tallies = vec![vec![0usize; n_labels]; n];
    let mut n_points = vec![0usize; n];
    for (record, a) in points.iter().zip(assign_points(family, points)) {
        let label = match record.payload {
            Payload::Label(l) if l < n_labels => l,
            Payload::Label(l) => {
                return Err(VarifoldError::PayloadMismatch(format!(
                    "label index {l} out of range {n_labels}"
                )))
            }
            Payload::Counts(_) => {
                return Err(VarifoldError::PayloadMismatch(
                    "expected a label, found gene counts".into(),
                ))
            }
        };
        if let Some(c) = a {
            tallies[c][label] += 1;
            n_points[c] += 1;
        }
    }
    let mut alpha = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    for c in 0..n {
        if n_points[c] == 0 {
            return Err(VarifoldError::EmptySimplex(c));
        }
        let count = T::from_usize(n_points[c]).unwrap();
        alpha.push(count / family.simplex_volume(c));
        zeta.push(FeatureDistribution::Discrete {
            weights: tallies[c]
                .iter()
                .map(|&k| T::from_usize(k).unwrap() / count)
                .collect(),
        });
    }
    MeshVarifold::new(family.clone(), alpha, zeta, feature_space.clone())
}

/// Keeps the `k` genes with the largest per-point count standard deviation,
/// preserving panel order. Returns the filtered records and reduced space.
pub fn select_genes<T: Scalar>(
    points: &[PointRecord<T>],
    feature_space: &FeatureSpace,
    k: usize,
) -> Result<(Vec<PointRecord<T>>, FeatureSpace), VarifoldError> {
    let gene_ids = match feature_space {
        FeatureSpace::CountVector { gene_ids } => gene_ids,
        _ => {
            return Err(VarifoldError::PayloadMismatch(
                "gene selection needs a count-vector feature space".into(),
            ))
        }
    };
    let g = gene_ids.len();
    if k >= g {
        return Ok((points.to_vec(), feature_space.clone()));
    }
    let n = T::from_usize(points.len().max(1)).unwrap();
    let mut mean = vec![T::zero(); g];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(counts_of(p, g)?) {
            *m = *m + v / n;
        }
    }
    let mut var = vec![T::zero(); g];
    for p in points {
        for ((s, &v), &m) in var.iter_mut().zip(counts_of(p, g)?).zip(&mean) {
            let d = v - m;
            *s = *s + d * d / n;
        }
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&i, &j| var[j].partial_cmp(&var[i]).unwrap().then(i.cmp(&j)));
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();

    let space = FeatureSpace::CountVector {
        gene_ids: selected.iter().map(|&i| gene_ids[i].clone()).collect(),
    };
    let records = points
        .iter()
        .map(|p| {
            let counts = counts_of(p, g).expect("validated above");
            PointRecord {
                position: p.position,
                payload: Payload::Counts(selected.iter().map(|&i| counts[i]).collect()),
            }
        })
        .collect();
    Ok((records, space))
}
