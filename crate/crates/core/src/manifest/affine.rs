use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Scalar;

/// Determinants with magnitude at or below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// 2-D affine map `(x, y) -> (a·x + b·y + c, d·x + e·y + f)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
    pub f: T,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("affine transform is singular (det = {det})")]
pub struct SingularTransform {
    pub det: f64,
}

impl<T: Scalar> Default for AffineTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> AffineTransform<T> {
    pub fn new(a: T, b: T, c: T, d: T, e: T, f: T) -> Self {
        Self { a, b, c, d, e, f }
    }

    pub fn identity() -> Self {
        Self::scale(T::one())
    }

    pub fn scale(s: T) -> Self {
        Self::scale_xy(s, s)
    }

    pub fn scale_xy(sx: T, sy: T) -> Self {
        let z = T::zero();
        Self::new(sx, z, z, z, sy, z)
    }

    pub fn translate(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(o, z, tx, z, o, ty)
    }

    pub fn from_array(v: [T; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    #[inline]
    pub fn apply(&self, x: T, y: T) -> (T, T) {
        (
            self.a * x + self.b * y + self.c,
            self.d * x + self.e * y + self.f,
        )
    }

    /// Returns `self ∘ other`: the map that applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            a: self.a * other.a + self.b * other.d,
            b: self.a * other.b + self.b * other.e,
            c: self.a * other.c + self.b * other.f + self.c,
            d: self.d * other.a + self.e * other.d,
            e: self.d * other.b + self.e * other.e,
            f: self.d * other.c + self.e * other.f + self.f,
        }
    }

    pub fn det(&self) -> T {
        self.a * self.e - self.b * self.d
    }

    pub fn invert(&self) -> Result<Self, SingularTransform> {
        let det = self.det();
        if !(det.abs().as_f64() > SINGULAR_DET) {
            return Err(SingularTransform { det: det.as_f64() });
        }
        let a = self.e / det;
        let b = -self.b / det;
        let d = -self.d / det;
        let e = self.a / det;
        Ok(Self {
            a,
            b,
            c: -(a * self.c + b * self.f),
            d,
            e,
            f: -(d * self.c + e * self.f),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Largest coefficient-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(x, y)| (*x - y).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> AffineTransform<U> {
        AffineTransform::from_array(self.to_array().map(|v| U::lit(v.as_f64())))
    }
}

impl<T: Scalar> Serialize for AffineTransform<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().map(Scalar::as_f64).serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for AffineTransform<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 6]>::deserialize(d)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(D::Error::custom("non-finite affine coefficient"));
        }
        Ok(Self::from_array(v.map(T::lit)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Affine = AffineTransform<f64>;

    fn random_affine(rng: &mut ChaCha8Rng) -> Affine {
        loop {
            let t = Affine::from_array(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            if t.det().abs() > 0.1 {
                return t;
            }
        }
    }

    #[test]
    fn compose_with_identity() {
        let t = Affine::new(1.5, 0.2, 3.0, -0.4, 2.0, 7.0);
        assert_eq!(t.compose(&Affine::identity()), t);
        assert_eq!(Affine::identity().compose(&t), t);
    }

    #[test]
    fn scale_after_translate() {
        let t = Affine::scale(2.0).compose(&Affine::translate(3.0, 5.0));
        assert_eq!(t.apply(0.0, 0.0), (6.0, 10.0));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t1 = random_affine(&mut rng);
            let t2 = random_affine(&mut rng);
            let fused = t1.compose(&t2);
            for _ in 0..100 {
                let (x, y) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                let (ix, iy) = t2.apply(x, y);
                let (sx, sy) = t1.apply(ix, iy);
                let (fx, fy) = fused.apply(x, y);
                assert!((sx - fx).abs() < 1e-9 && (sy - fy).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (a, b, c) = (
                random_affine(&mut rng),
                random_affine(&mut rng),
                random_affine(&mut rng),
            );
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!(l.max_abs_diff(&r) < 1e-9);
        }
    }

    #[test]
    fn invert_known() {
        assert_eq!(Affine::identity().invert().unwrap(), Affine::identity());
        assert_eq!(Affine::scale(2.0).invert().unwrap(), Affine::scale(0.5));
        assert!(Affine::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0).invert().is_err());
    }

    #[test]
    fn invert_random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let t = random_affine(&mut rng);
            let id = t.compose(&t.invert().unwrap());
            assert!(id.max_abs_diff(&Affine::identity()) < 1e-9, "{t:?}");
        }
    }

    #[test]
    fn serde_as_six_array() {
        let t = Affine::new(1.0, 0.0, 2.5, 0.0, 1.0, -3.0);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "[1.0,0.0,2.5,0.0,1.0,-3.0]");
        let back: Affine = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Affine>("[1,2,3]").is_err());
    }
}
