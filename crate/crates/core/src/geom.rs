//! Small fixed-size vector helpers.
//!
//! Points live in `[T; 3]` regardless of the mesh dimension; planar data keeps
//! a zero third coordinate, which every operation below preserves.

use crate::scalar::Scalar;

/// A point or vector in ambient space (third coordinate zero for 2D data).
pub type Point<T> = [T; 3];

#[inline]
pub fn zero<T: Scalar>() -> Point<T> {
    [T::zero(); 3]
}

#[inline]
pub fn add<T: Scalar>(a: Point<T>, b: Point<T>) -> Point<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: Point<T>, b: Point<T>) -> Point<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Point<T>, s: T) -> Point<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy<T: Scalar>(y: Point<T>, s: T, x: Point<T>) -> Point<T> {
    [y[0] + s * x[0], y[1] + s * x[1], y[2] + s * x[2]]
}

#[inline]
pub fn dot<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: Point<T>, b: Point<T>) -> Point<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm2<T: Scalar>(a: Point<T>) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Scalar>(a: Point<T>) -> T {
    norm2(a).sqrt()
}

#[inline]
pub fn dist2<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    norm2(sub(a, b))
}

/// Determinant of the 2x2 matrix with columns `a`, `b` (x/y components).
#[inline]
pub fn det2<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    a[0] * b[1] - a[1] * b[0]
}

/// Determinant of the 3x3 matrix with columns `a`, `b`, `c`.
#[inline]
pub fn det3<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    dot(a, cross(b, c))
}

/// Counter-clockwise quarter turn in the plane (z untouched).
#[inline]
pub fn rot90<T: Scalar>(a: Point<T>) -> Point<T> {
    [-a[1], a[0], a[2]]
}

pub fn all_finite<T: Scalar>(points: &[Point<T>]) -> bool {
    points
        .iter()
        .all(|p| p.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_orthogonal() {
        let a: Point<f64> = [1.0, 2.0, 3.0];
        let b: Point<f64> = [-2.0, 0.5, 4.0];
        let c = cross(a, b);
        assert!(dot(a, c).abs() < 1e-12);
        assert!(dot(b, c).abs() < 1e-12);
    }

    #[test]
    fn rot90_turns_left() {
        let v: Point<f64> = [1.0, 0.0, 0.0];
        assert_eq!(rot90(v), [0.0, 1.0, 0.0]);
    }
}
